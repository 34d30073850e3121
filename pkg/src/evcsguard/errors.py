"""Exception hierarchy shared by the simulator, learner and CLI."""


class EvcsGuardError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""

    exit_code = 1


class ConfigError(EvcsGuardError, ValueError):
    exit_code = 1


class DataFault(EvcsGuardError):
    """Corrupt or inconsistent input files / datasets."""

    exit_code = 2


class SimulationFault(EvcsGuardError):
    """A generator exceeded the speed-deviation trip threshold."""

    exit_code = 3

    def __init__(self, message, time_s=None, generator=None, scenario=None):
        super().__init__(message)
        self.time_s = time_s
        self.generator = generator
        self.scenario = scenario


class NumericalFault(EvcsGuardError):
    exit_code = 3

    def __init__(self, message, time_s=None):
        super().__init__(message)
        self.time_s = time_s


class TrainingFault(NumericalFault):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class SearchFault(NumericalFault):
    pass
