"""Benign noise versus a synchronised square-wave attack on bus 9 of wscc9.

Prints the peak-to-peak frequency swing of each run and the dominant
oscillation frequency picked out of the attacked trace.
"""
import numpy as np

from evcsguard.attacks import attack_profile, fleet_size_for_attack, square_wave
from evcsguard.grid import benign_load_noise, build_grid, dominant_frequency, simulate

model = build_grid("wscc9")
horizon, se = 60.0, 0.05
noise = benign_load_noise(np.random.default_rng(0), model, horizon, cap_fraction=0.02)

benign = simulate(model, noise, horizon, sample_every=se)[9].samples
print(f"benign      ptp {np.ptp(benign) * 1e3:7.2f} mHz")

magnitude = 0.2 * model.bus(9).nominal_load_MW
n = fleet_size_for_attack(magnitude, 11.0)
for hz in (0.5, 0.75, 1.0):
    sc = square_wave(9, 1.0 / hz, 0.5, magnitude, 5.0, horizon - 5.0, list(range(n)))
    f = simulate(model, attack_profile(model, sc, horizon) + noise, horizon, sample_every=se)[9].samples
    fund, _ = dominant_frequency(f[int(10 / se):], se)
    print(f"{hz:4.2f} Hz attack ({n} stations, {magnitude:.0f} MW)  ptp {np.ptp(f) * 1e3:7.2f} mHz  "
          f"dominant {fund:.3f} Hz")
