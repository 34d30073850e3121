"""Co-simulation, edge detection and random-delay mitigation of EV-station oscillatory load attacks."""

__version__ = "0.1.0"
