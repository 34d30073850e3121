"""Reduced-order multi-machine frequency model.

Classical swing dynamics per generator, a first-order droop governor and a
DC (lossless, linear) network.  The network is Kron-reduced onto the
generator internal nodes plus the load buses, so a load change on a bus is
shared among the machines through fixed distribution factors, and the bus
frequency is the same factor-weighted average of machine speeds.

State vector layout (all deviations from the operating point)::

    x = [rotor angle (rad), speed deviation (pu), mechanical power (pu, system base)]

each block having one entry per generator.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, NumericalFault, SimulationFault

DEFAULT_DT = 0.01
DEFAULT_SAMPLE_EVERY = 0.5
DEFAULT_TRIP_PU = 0.05
DEFAULT_NORMAL_BAND_HZ = 0.1
POWER_FACTOR = 0.8
BUILTIN_GRIDS = {"wscc9": "wscc9.json", "ne39-reduced": "ne39_reduced.json"}


@dataclass(frozen=True)
class GeneratorParams:
    inertia_H: float
    damping_D: float
    droop_R: float
    governor_T: float
    rated_MVA: float
    nominal_freq: float = 60.0
    gen_id: int = 0
    dispatch_MW: float = 0.0

    def __post_init__(self):
        for name in ("inertia_H", "droop_R", "governor_T", "rated_MVA"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigError(f"generator {self.gen_id}: {name} must be > 0, got {value}")
        if not (np.isfinite(self.damping_D) and self.damping_D >= 0):
            raise ConfigError(f"generator {self.gen_id}: damping_D must be >= 0")
        if self.nominal_freq <= 0:
            raise ConfigError("nominal_freq must be > 0")


@dataclass(frozen=True)
class Bus:
    bus_id: int
    nominal_load_MW: float
    attached_generator_ids: tuple = ()


@dataclass(frozen=True, eq=False)
class GridModel:
    """Immutable grid description plus the derived linear system.

    ``coupling`` is a Laplacian-form susceptance matrix over the generator
    internal nodes followed by the load buses (same order as ``generators``
    and ``buses``).
    """

    generators: tuple
    buses: tuple
    coupling: np.ndarray
    base_MVA: float = 100.0
    name: str = "custom"
    trip_threshold_pu: float = DEFAULT_TRIP_PU
    normal_band_hz: float = DEFAULT_NORMAL_BAND_HZ
    _derived: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.generators) == 0:
            raise ConfigError("grid needs at least one generator")
        ids = [b.bus_id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ConfigError("bus ids must be unique")
        if len(self.buses) == 0:
            raise ConfigError("grid needs at least one load bus")
        freqs = {g.nominal_freq for g in self.generators}
        if len(freqs) != 1:
            raise ConfigError("all generators must share one nominal frequency")
        n = len(self.generators) + len(self.buses)
        B = np.asarray(self.coupling, dtype=float)
        if B.shape != (n, n):
            raise ConfigError(f"coupling must be {n}x{n}, got {B.shape}")
        if not np.allclose(B, B.T, atol=1e-12):
            raise ConfigError("coupling matrix must be symmetric")
        scale = max(1.0, np.abs(B).max())
        if np.abs(B.sum(axis=1)).max() > 1e-9 * scale:
            raise ConfigError("coupling rows must sum to zero (Laplacian form)")
        if np.linalg.eigvalsh(B).min() < -1e-9 * scale:
            raise ConfigError("coupling matrix must be positive semidefinite")
        if self.trip_threshold_pu <= 0 or self.normal_band_hz <= 0:
            raise ConfigError("trip threshold and normal band must be positive")
        B.setflags(write=False)
        object.__setattr__(self, "coupling", B)
        self._derive()

    # -- derived quantities -------------------------------------------------
    def _derive(self):
        ng = len(self.generators)
        B = self.coupling
        Bgg, Bgl = B[:ng, :ng], B[:ng, ng:]
        Bll = B[ng:, ng:]
        try:
            Bll_inv = np.linalg.inv(Bll)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("load buses are not connected to any generator") from exc
        dist = -Bgl @ Bll_inv  # (ng, nb); column j: share of bus j load per generator
        if np.any(dist < -1e-9):
            raise ConfigError("negative load distribution factor; check coupling")
        dist = np.clip(dist, 0.0, None)
        dist /= dist.sum(axis=0, keepdims=True)
        L = Bgg + dist @ Bgl.T

        S = np.array([g.rated_MVA for g in self.generators]) / self.base_MVA
        M = 2.0 * np.array([g.inertia_H for g in self.generators]) * S
        D = np.array([g.damping_D for g in self.generators]) * S
        K = S / np.array([g.droop_R for g in self.generators])
        T = np.array([g.governor_T for g in self.generators])
        omega_s = 2.0 * math.pi * self.nominal_freq

        A = np.zeros((3 * ng, 3 * ng))
        I = np.eye(ng)
        A[:ng, ng:2 * ng] = omega_s * I
        A[ng:2 * ng, :ng] = -L / M[:, None]
        A[ng:2 * ng, ng:2 * ng] = -np.diag(D / M)
        A[ng:2 * ng, 2 * ng:] = np.diag(1.0 / M)
        A[2 * ng:, ng:2 * ng] = -np.diag(K / T)
        A[2 * ng:, 2 * ng:] = -np.diag(1.0 / T)
        E = np.zeros((3 * ng, len(self.buses)))
        E[ng:2 * ng, :] = -dist / M[:, None] / self.base_MVA  # input in MW

        self._derived.update(dist=dist, reduced=L, M=M, D=D, K=K, T=T, A=A, E=E, omega_s=omega_s)

    @property
    def nominal_freq(self):
        return self.generators[0].nominal_freq

    @property
    def n_gen(self):
        return len(self.generators)

    @property
    def bus_ids(self):
        return [b.bus_id for b in self.buses]

    @property
    def distribution(self):
        """(n_gen, n_bus) load sharing factors; every column sums to one."""
        return self._derived["dist"]

    def bus_index(self, bus_id):
        for k, b in enumerate(self.buses):
            if b.bus_id == bus_id:
                return k
        raise ConfigError(f"unknown bus id {bus_id}")

    def bus(self, bus_id):
        return self.buses[self.bus_index(bus_id)]

    def nominal_loads(self):
        return np.array([b.nominal_load_MW for b in self.buses])

    def state_matrices(self):
        return self._derived["A"], self._derived["E"]

    def propagator(self, dt):
        """RK4 one-step maps for a load held constant over the step.

        Returns (Phi, Psi) with x_next = Phi @ x + Psi @ load_MW.  This is the
        exact algebraic expansion of a classical RK4 step on this linear ODE.
        """
        key = ("rk4", float(dt))
        cache = self._derived.setdefault("prop", {})
        if key not in cache:
            A, E = self.state_matrices()
            hA = dt * A
            I = np.eye(A.shape[0])
            hA2 = hA @ hA
            hA3 = hA2 @ hA
            Phi = I + hA + hA2 / 2.0 + hA3 / 6.0 + hA3 @ hA / 24.0
            Psi = dt * (I + hA / 2.0 + hA2 / 6.0 + hA3 / 24.0) @ E
            cache[key] = (Phi, Psi)
        return cache[key]

    def frequency_weights(self):
        """(n_bus, n_gen) weights turning speed deviations into bus frequency."""
        return self.distribution.T


@dataclass
class GridState:
    rotor_angles: np.ndarray
    rotor_speed_dev: np.ndarray
    mech_power: np.ndarray
    time: float = 0.0

    @classmethod
    def equilibrium(cls, model, time=0.0):
        z = np.zeros(model.n_gen)
        return cls(z.copy(), z.copy(), z.copy(), time)

    def as_vector(self):
        return np.concatenate([self.rotor_angles, self.rotor_speed_dev, self.mech_power])

    @classmethod
    def from_vector(cls, x, time):
        ng = len(x) // 3
        return cls(x[:ng].copy(), x[ng:2 * ng].copy(), x[2 * ng:].copy(), time)


@dataclass
class FrequencyTrace:
    bus_id: int
    tick_interval: float
    samples: np.ndarray
    start_time: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.tick_interval <= 0:
            raise ConfigError("tick_interval must be > 0")
        if not np.all(np.isfinite(self.samples)):
            raise NumericalFault("non-finite frequency sample")

    @property
    def times(self):
        """Sample k is taken at the end of tick k."""
        return self.start_time + self.tick_interval * np.arange(1, len(self.samples) + 1)

    def window(self, t_end, n_ticks=240):
        """The n_ticks samples ending at t_end (inclusive); None if history is short."""
        k_end = int(round((t_end - self.start_time) / self.tick_interval))
        if k_end < n_ticks or k_end > len(self.samples):
            return None
        return self.samples[k_end - n_ticks:k_end]


class LoadPerturbation(NamedTuple):
    p_mw: float
    q_mvar: float


# -- construction ---------------------------------------------------------------
def laplacian_from_branches(nodes, branches):
    index = {node: k for k, node in enumerate(nodes)}
    B = np.zeros((len(nodes), len(nodes)))
    for a, b, x in branches:
        if x <= 0:
            raise ConfigError(f"branch {a}-{b}: reactance must be > 0")
        i, j = index[a], index[b]
        B[i, i] += 1.0 / x
        B[j, j] += 1.0 / x
        B[i, j] -= 1.0 / x
        B[j, i] -= 1.0 / x
    return B


def kron_reduce(B, keep):
    keep = np.asarray(keep)
    drop = np.setdiff1d(np.arange(B.shape[0]), keep)
    if len(drop) == 0:
        return B[np.ix_(keep, keep)]
    Bkk = B[np.ix_(keep, keep)]
    Bkd = B[np.ix_(keep, drop)]
    Bdd = B[np.ix_(drop, drop)]
    return Bkk - Bkd @ np.linalg.solve(Bdd, Bkd.T)


def _from_network_config(cfg, **overrides):
    freq = float(cfg.get("nominal_freq", 60.0))
    gens_cfg = cfg["generators"]
    gens = tuple(
        GeneratorParams(
            inertia_H=float(g["inertia_H"]),
            damping_D=float(g.get("damping_D", 0.0)),
            droop_R=float(g["droop_R"]),
            governor_T=float(g["governor_T"]),
            rated_MVA=float(g["rated_MVA"]),
            nominal_freq=freq,
            gen_id=int(g.get("id", k + 1)),
            dispatch_MW=float(g.get("dispatch_MW", 0.0)),
        )
        for k, g in enumerate(gens_cfg)
    )
    load_buses = [int(ld["bus"]) for ld in cfg["loads"]]
    net_buses = sorted({int(b["from"]) for b in cfg["branches"]} | {int(b["to"]) for b in cfg["branches"]})
    internal = [("g", int(g.get("id", k + 1))) for k, g in enumerate(gens_cfg)]
    nodes = internal + net_buses
    branches = [(int(b["from"]), int(b["to"]), float(b["x"])) for b in cfg["branches"]]
    for node, g in zip(internal, gens_cfg):
        if "xd_prime" not in g:
            raise ConfigError("generator needs xd_prime when the network is given as branches")
        branches.append((node, int(g["bus"]), float(g["xd_prime"])))
    B = laplacian_from_branches(nodes, branches)
    keep = list(range(len(internal))) + [len(internal) + net_buses.index(b) for b in load_buses]
    coupling = kron_reduce(B, keep)
    coupling = (coupling + coupling.T) / 2.0
    coupling -= np.diag(coupling.sum(axis=1))  # exact zero row sums after round-off

    # generators electrically adjacent to each load bus in the reduced network
    ng = len(gens)
    buses = []
    for j, ld in enumerate(cfg["loads"]):
        col = -coupling[:ng, ng + j]
        attached = tuple(gens[i].gen_id for i in range(ng) if col[i] > 1e-6 * col.max())
        buses.append(Bus(int(ld["bus"]), float(ld["P_MW"]), attached))
    return GridModel(
        generators=gens,
        buses=tuple(buses),
        coupling=coupling,
        base_MVA=float(cfg.get("base_MVA", 100.0)),
        name=cfg.get("name", "custom"),
        **overrides,
    )


def _from_explicit(cfg, **overrides):
    freq = float(cfg.get("nominal_freq", 60.0))
    gens = tuple(
        GeneratorParams(
            inertia_H=float(g["inertia_H"]),
            damping_D=float(g.get("damping_D", 0.0)),
            droop_R=float(g["droop_R"]),
            governor_T=float(g["governor_T"]),
            rated_MVA=float(g["rated_MVA"]),
            nominal_freq=freq,
            gen_id=int(g.get("id", k + 1)),
            dispatch_MW=float(g.get("dispatch_MW", 0.0)),
        )
        for k, g in enumerate(cfg["generators"])
    )
    buses = tuple(
        Bus(int(b["bus_id"]), float(b["nominal_load_MW"]), tuple(b.get("attached_generator_ids", ())))
        for b in cfg["buses"]
    )
    return GridModel(gens, buses, np.asarray(cfg["coupling"], dtype=float),
                     base_MVA=float(cfg.get("base_MVA", 100.0)), name=cfg.get("name", "custom"), **overrides)


def load_grid_config(name):
    if name not in BUILTIN_GRIDS:
        raise ConfigError(f"unknown topology {name!r}; built-ins: {sorted(BUILTIN_GRIDS)}")
    text = resources.files("evcsguard").joinpath("grids").joinpath(BUILTIN_GRIDS[name]).read_text()
    return json.loads(text)


def build_grid(config="wscc9", **overrides):
    """Build a validated GridModel.

    ``config`` is a built-in topology name (``"wscc9"``, ``"ne39-reduced"``),
    a path to a JSON grid file, or a dict.  Dicts either describe a network
    (``generators`` with ``xd_prime``/``bus``, ``branches``, ``loads``) or give
    ``generators``, ``buses`` and a ready ``coupling`` Laplacian.
    """
    if isinstance(config, str):
        if config in BUILTIN_GRIDS:
            config = load_grid_config(config)
        elif config.endswith(".json"):
            with open(config) as fh:
                config = json.load(fh)
        else:
            raise ConfigError(f"unknown topology {config!r}; built-ins: {sorted(BUILTIN_GRIDS)}")
    if not isinstance(config, Mapping):
        raise ConfigError("grid config must be a name, a JSON path or a mapping")
    try:
        if "coupling" in config:
            return _from_explicit(config, **overrides)
        return _from_network_config(config, **overrides)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed grid config: {exc}") from exc


def power_balance_mismatch(model):
    """Base-case generation minus load in MW (zero for a consistent dispatch)."""
    return sum(g.dispatch_MW for g in model.generators) - float(model.nominal_loads().sum())


# -- dynamics -------------------------------------------------------------------
def derivatives(model, x, load_MW):
    A, E = model.state_matrices()
    return A @ x + E @ load_MW


def _check_state(model, x, time, scenario=None):
    ng = model.n_gen
    if not np.all(np.isfinite(x)):
        raise NumericalFault(f"non-finite grid state at t={time:.3f}s", time_s=time)
    dw = np.abs(x[..., ng:2 * ng])
    if dw.max() > model.trip_threshold_pu:
        idx = np.unravel_index(int(np.argmax(dw)), dw.shape)
        raise SimulationFault(
            f"generator speed deviation {dw.max():.4f} pu exceeds trip threshold "
            f"{model.trip_threshold_pu} pu at t={time:.3f}s",
            time_s=time, generator=int(idx[-1]), scenario=int(idx[0]) if dw.ndim > 1 else scenario,
        )


def step(model, state, load_delta_MW, dt=DEFAULT_DT):
    """Advance one classical RK4 step with the load held constant."""
    if not (0.0 < dt <= 0.05):
        raise ConfigError(f"dt must be in (0, 0.05], got {dt}")
    u = np.asarray(load_delta_MW, dtype=float)
    if u.shape != (len(model.buses),) or not np.all(np.isfinite(u)):
        raise ConfigError("load_delta_MW must be a finite vector with one entry per bus")
    x = state.as_vector()
    k1 = derivatives(model, x, u)
    k2 = derivatives(model, x + 0.5 * dt * k1, u)
    k3 = derivatives(model, x + 0.5 * dt * k2, u)
    k4 = derivatives(model, x + dt * k3, u)
    x_new = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    t_new = state.time + dt
    _check_state(model, x_new, t_new)
    return GridState.from_vector(x_new, t_new)


def bus_frequency(model, state, bus_id):
    j = model.bus_index(bus_id)
    weights = model.distribution[:, j]
    return model.nominal_freq * (1.0 + float(weights @ state.rotor_speed_dev))


def bus_frequencies(model, speed_dev):
    """Vectorised bus frequency for speed deviations shaped (..., n_gen)."""
    return model.nominal_freq * (1.0 + speed_dev @ model.distribution)


def random_load_perturbation(rng, nominal_MW, cap_fraction, dist="gaussian"):
    """One benign load deviation bounded by cap_fraction * nominal_MW.

    The Gaussian variant uses sigma = cap/2 and rejects draws beyond the cap.
    Reactive power at 0.8 lagging is returned alongside.
    """
    cap = _check_cap(cap_fraction) * nominal_MW
    p = float(_noise(rng, cap, 1, dist)[0])
    return LoadPerturbation(p, p * math.tan(math.acos(POWER_FACTOR)))


def _check_cap(cap_fraction):
    if not (0.0 <= cap_fraction <= 0.1):
        raise ConfigError(f"cap_fraction must be in [0, 0.1], got {cap_fraction}")
    return cap_fraction


def _noise(rng, cap, size, dist):
    cap = np.broadcast_to(np.asarray(cap, dtype=float), size)
    if dist == "uniform":
        return rng.uniform(-1.0, 1.0, size) * cap
    if dist != "gaussian":
        raise ConfigError(f"unknown distribution {dist!r}")
    out = rng.normal(0.0, 0.5, size)
    bad = np.abs(out) > 1.0
    while bad.any():
        out[bad] = rng.normal(0.0, 0.5, int(bad.sum()))
        bad = np.abs(out) > 1.0
    return out * cap


def benign_load_noise(rng, model, horizon, dt=DEFAULT_DT, cap_fraction=0.02, dist="gaussian", hold=DEFAULT_DT):
    """Random load blocks on every bus: (n_steps, n_bus) MW, redrawn every ``hold`` s."""
    _check_cap(cap_fraction)
    n_steps = int(round(horizon / dt))
    per_hold = max(1, int(round(hold / dt)))
    n_draw = -(-n_steps // per_hold)
    draws = _noise(rng, cap_fraction * model.nominal_loads(), (n_draw, len(model.buses)), dist)
    return np.repeat(draws, per_hold, axis=0)[:n_steps]


def profile_from_function(fn, model, horizon, dt=DEFAULT_DT):
    """Sample ``fn(t) -> per-bus MW`` at the start of every step."""
    n_steps = int(round(horizon / dt))
    return np.array([np.asarray(fn(k * dt), dtype=float) for k in range(n_steps)]).reshape(n_steps, len(model.buses))


def _grid_counts(horizon, dt, sample_every):
    n_steps = horizon / dt
    per_sample = sample_every / dt
    n_samples = horizon / sample_every
    for value, what in ((n_steps, "horizon/dt"), (per_sample, "sample_every/dt"), (n_samples, "horizon/sample_every")):
        if abs(value - round(value)) > 1e-6 or round(value) < 1:
            raise ConfigError(f"{what} must be a positive integer, got {value}")
    return int(round(n_steps)), int(round(per_sample)), int(round(n_samples))


def integrate(model, loads_MW, dt=DEFAULT_DT, sample_every_steps=1, x0=None, feedback=None, t0=0.0):
    """Batched fixed-step integration.

    loads_MW: (n_scenarios, n_steps, n_bus) or (n_steps, n_bus).
    feedback: optional callable (k, t, bus_freq_hz (N, n_bus)) -> extra load (N, n_bus)
    evaluated before each step.
    Returns speed deviations (N, n_samples, n_gen) sampled at the end of every
    ``sample_every_steps`` steps and the final state vectors (N, 3 n_gen).
    """
    if not (0.0 < dt <= 0.05):
        raise ConfigError(f"dt must be in (0, 0.05], got {dt}")
    loads = np.asarray(loads_MW, dtype=float)
    squeeze = loads.ndim == 2
    if squeeze:
        loads = loads[None]
    N, n_steps, nb = loads.shape
    if nb != len(model.buses):
        raise ConfigError("load profile has wrong number of buses")
    if not np.all(np.isfinite(loads)):
        raise ConfigError("load profile must be finite")
    Phi, Psi = model.propagator(dt)
    PhiT, PsiT = Phi.T.copy(), Psi.T.copy()
    ng = model.n_gen
    x = np.zeros((N, 3 * ng)) if x0 is None else np.array(x0, dtype=float).reshape(N, 3 * ng)
    n_samples = n_steps // sample_every_steps
    out = np.empty((N, n_samples, ng))
    W = model.distribution
    f0 = model.nominal_freq
    limit = model.trip_threshold_pu
    s = 0
    for k in range(n_steps):
        u = loads[:, k]
        if feedback is not None:
            freq = f0 * (1.0 + x[:, ng:2 * ng] @ W)
            u = u + feedback(k, t0 + k * dt, freq)
        x = x @ PhiT + u @ PsiT
        dw = x[:, ng:2 * ng]
        if np.abs(dw).max() > limit or not np.isfinite(dw).all():
            _check_state(model, x, t0 + (k + 1) * dt)
        if (k + 1) % sample_every_steps == 0:
            out[:, s] = dw
            s += 1
    if squeeze:
        return out[0], x[0]
    return out, x


def simulate(model, load_profile, horizon, dt=DEFAULT_DT, sample_every=DEFAULT_SAMPLE_EVERY,
             buses=None, feedback=None):
    """Simulate from equilibrium and return {bus_id: FrequencyTrace}.

    ``load_profile`` is an (n_steps, n_bus) MW array (value k held over step k)
    or a callable t -> per-bus MW vector.
    """
    n_steps, per_sample, _ = _grid_counts(horizon, dt, sample_every)
    if callable(load_profile):
        profile = profile_from_function(load_profile, model, horizon, dt)
    else:
        profile = np.asarray(load_profile, dtype=float)
    if profile.shape != (n_steps, len(model.buses)):
        raise ConfigError(f"load profile must have shape {(n_steps, len(model.buses))}, got {profile.shape}")
    if feedback is not None:
        fb = feedback
        feedback = lambda k, t, f: fb(k, t, f[0])[None]  # noqa: E731
    speeds, _ = integrate(model, profile[None], dt, per_sample, feedback=feedback)
    freqs = bus_frequencies(model, speeds[0])
    wanted = model.bus_ids if buses is None else list(buses)
    return {b: FrequencyTrace(b, sample_every, freqs[:, model.bus_index(b)]) for b in wanted}


def peak_to_peak(samples):
    samples = np.asarray(samples)
    return float(samples.max() - samples.min())


def dominant_frequency(samples, sample_interval):
    """Frequency (Hz) of the largest non-DC DFT bin, and the bin width."""
    x = np.asarray(samples, dtype=float)
    x = x - x.mean()
    spec = np.abs(np.fft.rfft(x))
    freqs = np.fft.rfftfreq(len(x), sample_interval)
    k = 1 + int(np.argmax(spec[1:]))
    return float(freqs[k]), float(freqs[1] - freqs[0])


def export_traces_csv(traces, path):
    """Write traces as rows ``time_s,bus_id,freq_hz``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "bus_id", "freq_hz"])
        for trace in traces.values() if isinstance(traces, Mapping) else traces:
            for t, f in zip(trace.times, trace.samples):
                w.writerow([f"{t:.3f}", trace.bus_id, repr(float(f))])
