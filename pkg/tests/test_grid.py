import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evcsguard import grid
from evcsguard.errors import ConfigError, SimulationFault
from evcsguard.grid import (FrequencyTrace, GridState, build_grid, bus_frequency, dominant_frequency,
                            load_grid_config, peak_to_peak, random_load_perturbation, simulate, step)


def square_profile(model, bus, mw, period, duty, horizon, dt=0.01, start=0.0):
    n = int(round(horizon / dt))
    t = np.arange(n) * dt
    prof = np.zeros((n, len(model.buses)))
    on = ((t - start) % period < duty * period) & (t >= start)
    prof[:, model.bus_index(bus)] = mw * on
    return prof


def test_builtin_topologies(wscc9):
    assert wscc9.n_gen == 3 and len(wscc9.buses) == 3
    assert wscc9.bus_ids == [5, 7, 9]
    ne = build_grid("ne39-reduced")
    assert ne.n_gen == 10


def test_builtin_bit_identical():
    a, b = build_grid("wscc9"), build_grid("wscc9")
    assert np.array_equal(a.coupling, b.coupling)
    assert np.array_equal(a.propagator(0.01)[0], b.propagator(0.01)[0])


def test_power_balance_oracle_of_shipped_configs():
    for name in ("wscc9", "ne39-reduced"):
        m = build_grid(name)
        assert abs(grid.power_balance_mismatch(m)) < 1e-6


def test_zero_droop_rejected():
    cfg = load_grid_config("wscc9")
    cfg["generators"][0]["droop_R"] = 0.0
    with pytest.raises(ConfigError):
        build_grid(cfg)


def test_unknown_topology():
    with pytest.raises(ConfigError):
        build_grid("ieee-118")


def test_distribution_columns_sum_to_one(wscc9):
    assert np.allclose(wscc9.distribution.sum(axis=0), 1.0)


def test_step_equilibrium_fixed_point(wscc9):
    s = GridState.equilibrium(wscc9)
    out = step(wscc9, s, np.zeros(3))
    assert np.abs(out.as_vector()).max() < 1e-12
    assert out.time == pytest.approx(0.01)


def test_step_load_increase_slows_all_generators(wscc9):
    s = GridState.equilibrium(wscc9)
    load = np.zeros(3)
    load[wscc9.bus_index(9)] = 0.1 * wscc9.bus(9).nominal_load_MW
    for _ in range(100):
        s = step(wscc9, s, load)
    assert np.all(s.rotor_speed_dev < 0)


def test_step_dt_precondition(wscc9):
    with pytest.raises(ConfigError):
        step(wscc9, GridState.equilibrium(wscc9), np.zeros(3), dt=0.1)


def test_trip_threshold_raises_with_time(wscc9):
    m = build_grid("wscc9", trip_threshold_pu=1e-4)
    s = GridState.equilibrium(m)
    load = np.full(3, 50.0)
    with pytest.raises(SimulationFault) as exc:
        for _ in range(500):
            s = step(m, s, load)
    assert exc.value.time_s is not None and exc.value.time_s > 0


def test_bus_frequency(wscc9):
    s = GridState.equilibrium(wscc9)
    assert bus_frequency(wscc9, s, 9) == 60.0
    s.rotor_speed_dev[:] = -0.001
    assert bus_frequency(wscc9, s, 9) == pytest.approx(59.94, abs=1e-12)
    with pytest.raises(ConfigError):
        bus_frequency(wscc9, s, 99)


def test_perturbation_golden_value():
    p = random_load_perturbation(np.random.default_rng(42), 100.0, 0.02, "gaussian")
    assert p.p_mw == 0.30471707975443135
    assert p.q_mvar == pytest.approx(p.p_mw * 0.75)


def test_perturbation_cap_zero_and_range():
    rng = np.random.default_rng(0)
    assert all(random_load_perturbation(rng, 100.0, 0.0).p_mw == 0.0 for _ in range(20))
    with pytest.raises(ConfigError):
        random_load_perturbation(rng, 100.0, 0.2)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), cap=st.floats(0.0, 0.1), nominal=st.floats(1.0, 500.0),
       dist=st.sampled_from(["gaussian", "uniform"]))
def test_perturbation_bounded(seed, cap, nominal, dist):
    p = random_load_perturbation(np.random.default_rng(seed), nominal, cap, dist)
    assert abs(p.p_mw) <= cap * nominal + 1e-12


def test_flat_profile_stays_nominal(wscc9):
    traces = simulate(wscc9, np.zeros((12000, 3)), 120.0)
    for tr in traces.values():
        assert len(tr.samples) == 240
        assert np.abs(tr.samples - 60.0).max() < 1e-9


def test_simulate_deterministic(wscc9):
    prof = grid.benign_load_noise(np.random.default_rng(5), wscc9, 20.0, cap_fraction=0.02)
    a = simulate(wscc9, prof, 20.0)[9].samples
    b = simulate(wscc9, prof, 20.0)[9].samples
    assert np.array_equal(a, b)


def test_simulate_preconditions(wscc9):
    with pytest.raises(ConfigError):
        simulate(wscc9, np.zeros((1000, 3)), 10.0, sample_every=0.3)


def test_attack_peak_to_peak_monotone_in_magnitude(wscc9):
    nominal = wscc9.bus(9).nominal_load_MW
    ptp = []
    for frac in (0.1, 0.2, 0.3):
        prof = square_profile(wscc9, 9, frac * nominal, 2.0, 0.5, 40.0)
        f = simulate(wscc9, prof, 40.0, sample_every=0.05)[9].samples
        ptp.append(peak_to_peak(f[200:]))
    assert ptp[0] <= ptp[1] <= ptp[2]


def test_oscillation_fundamental(wscc9):
    prof = square_profile(wscc9, 9, 25.0, 1.25, 0.5, 100.0)
    f = simulate(wscc9, prof, 100.0, sample_every=0.05)[9].samples[200:]
    fund, width = dominant_frequency(f, 0.05)
    assert abs(fund - 0.8) <= width


def test_power_balance_after_step_settles(wscc9):
    """Mechanical-power increase + damping loss equals the load step at steady state."""
    dP = 10.0
    prof = np.zeros((6000, 3))
    prof[:, wscc9.bus_index(7)] = dP
    _, x = grid.integrate(wscc9, prof)
    ng = wscc9.n_gen
    dw, pm = x[ng:2 * ng], x[2 * ng:]
    damping = (wscc9._derived["D"] * dw).sum()
    assert abs(pm.sum() - damping - dP / wscc9.base_MVA) < 1e-6


def test_frequency_trace_window():
    tr = FrequencyTrace(9, 0.5, np.arange(300.0) + 60)
    w = tr.window(150.0)
    assert len(w) == 240 and w[-1] == tr.samples[299]
    assert tr.window(100.0) is None


def test_export_csv(tmp_path, wscc9):
    traces = simulate(wscc9, np.zeros((200, 3)), 2.0)
    path = tmp_path / "tr.csv"
    grid.export_traces_csv(traces, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "time_s,bus_id,freq_hz"
    assert len(lines) == 1 + 3 * 4


def test_config_roundtrip_is_json():
    cfg = load_grid_config("wscc9")
    assert json.loads(json.dumps(cfg)) == cfg
