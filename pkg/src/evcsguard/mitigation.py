"""Station-side two-model detection, randomised request delays and the closed-loop grid run."""

import heapq
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import grid
from .dataset import normalize_frequency
from .errors import ConfigError
from .fleet import N_TICKS, TICK_S, Kind, window_events

log = logging.getLogger(__name__)

MAX_DELAY_S = 4.0
DETECTION_LAG_S = 5.0        # worst-case detection: this long after the attack starts
HIST_BINS = np.linspace(0.0, MAX_DELAY_S, 9)


@dataclass
class MitigationState:
    active: bool = False
    last_decisions: dict = field(default_factory=lambda: {"m1_label": 0, "m2_label": 0})
    report_log: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    activations: int = 0


def decide(state, l1, l2, t, station_id, bus_id, source="models"):
    """Apply one pair of model decisions to ``state`` in place.

    Either model abnormal switches mitigation on; it goes off only when both
    read normal.  Every evaluation made while active reports to the operator.
    """
    l1, l2 = int(bool(l1)), int(bool(l2))
    was = state.active
    state.active = bool(l1 or l2)
    state.last_decisions = {"m1_label": l1, "m2_label": l2}
    if state.active:
        if not was:
            state.activations += 1
        if l1 and l2:
            src = f"{source}:both"
        else:
            src = f"{source}:m1" if l1 else f"{source}:m2"
        state.report_log.append({"time": float(t), "station_id": int(station_id), "bus_id": int(bus_id),
                                 "label_source": src})
    return state


def delay_for_request(rng, state, max_delay=MAX_DELAY_S):
    """0 while inactive, else uniform on (0, max_delay]."""
    if not state.active:
        return 0.0
    return float(max_delay - rng.uniform(0.0, max_delay))


def station_rng(seed, station_id):
    return np.random.default_rng([int(seed), 17, int(station_id)])


def _bounds_of(checkpoint, fallback=None):
    b = checkpoint.meta.get("bounds") if hasattr(checkpoint, "meta") else None
    if b is None:
        b = fallback
    if b is None:
        raise ConfigError("checkpoint carries no normalisation bounds; pass bounds explicitly")
    return tuple(b)


def build_window(log_events, freq_hz, t, bounds):
    """(240, 2) features from a station log and the tick frequency history ending at t."""
    f = np.asarray(freq_hz, dtype=float)
    return np.stack([window_events(log_events, t).astype(float),
                     normalize_frequency(f[-N_TICKS:], *bounds)], axis=1)


def _net(m):
    return m.network() if hasattr(m, "network") else m


def detect_on_event(station, m1, m2, log_events, freq_trace, t, state=None, bounds=None):
    """Evaluate both detectors on the window ending at ``t`` and update the station state.

    ``station`` is (station_id, bus_id) or an object with those attributes;
    ``freq_trace`` holds the bus frequency (Hz) at every tick up to ``t``.
    Less than a full window of history counts as normal, with a warning.
    """
    state = MitigationState() if state is None else state
    sid, bus = (station.station_id, station.bus_id) if hasattr(station, "station_id") else station
    f = np.asarray(getattr(freq_trace, "samples", freq_trace), dtype=float)
    if len(f) < N_TICKS or t < N_TICKS * TICK_S - 1e-9:
        msg = f"station {sid}: history shorter than the window at t={t:.2f}s, treated as normal"
        log.warning(msg)
        state.warnings.append(msg)
        return decide(state, 0, 0, t, sid, bus)
    labels = []
    for m in (m1, m2):
        w = build_window(log_events, f, t, _bounds_of(m, bounds))
        labels.append(int(_net(m).forward(w[None])[0] >= 0.5))
    return decide(state, labels[0], labels[1], t, sid, bus)


@dataclass
class MitigationConfig:
    horizon: float = 60.0
    dt: float = grid.DEFAULT_DT
    sample_every: float = 0.05
    history: float = 125.0          # benign lead-in simulated before t = 0
    worst_case: bool = True
    detection_lag: float = DETECTION_LAG_S
    max_delay: float = MAX_DELAY_S
    noise_cap: float = 0.01
    noise_dist: str = "gaussian"
    band_hz: float = grid.DEFAULT_NORMAL_BAND_HZ
    seed: int = 0

    def __post_init__(self):
        if self.horizon <= 0 or self.history < 0:
            raise ConfigError("horizon must be > 0 and history >= 0")
        if not 0 < self.max_delay:
            raise ConfigError("max_delay must be > 0")
        ratio = self.sample_every / self.dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError("sample_every must be a multiple of dt")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown mitigation options: {sorted(bad)}")
        return cls(**d)


class _StationSide:
    """Per-station detectors, delay streams and FIFO execution of requests."""

    def __init__(self, scenario, m1, m2, config, mitigate):
        self.sc = scenario
        self.m1, self.m2 = m1, m2
        self.cfg = config
        self.mitigate = mitigate
        self.ids = scenario.station_ids
        self.index = {sid: i for i, sid in enumerate(self.ids)}
        self.on = np.zeros(len(self.ids), bool)
        self.last_exec = np.full(len(self.ids), -np.inf)
        self.logs = [[] for _ in self.ids]
        self.states = [MitigationState() for _ in self.ids]
        self.rngs = [station_rng(config.seed, sid) for sid in self.ids]
        reqs = []
        for sid in self.ids:
            reqs.extend((t, sid, k) for t, k in scenario.per_station_schedules[sid])
        reqs.sort(key=lambda r: (r[0], r[1]))
        self.requests = reqs
        self.r = 0
        self.pending = []
        self.seq = 0
        self.delays = []
        self.first_active = None
        self.per_kW = scenario.charge_rate_kW / 1000.0
        self._nets = None if m1 is None else (_net(m1), _net(m2))
        self._bounds = None if m1 is None else (_bounds_of(m1), _bounds_of(m2))

    def _labels(self, sids, t, freq_ticks):
        """Model decisions for a batch of stations; identical windows share one pass."""
        if self.cfg.worst_case:
            hit = int(t >= self.sc.start_time + self.cfg.detection_lag - 1e-9)
            return [(hit, hit, "forced")] * len(sids)
        if len(freq_ticks) < N_TICKS or t < N_TICKS * TICK_S - self.cfg.history - 1e-9:
            return [None] * len(sids)
        out = []
        for net, bounds in zip(self._nets, self._bounds):
            wins = np.stack([build_window(self.logs[self.index[s]], freq_ticks, t, bounds) for s in sids])
            uniq, inv = np.unique(wins.reshape(len(sids), -1), axis=0, return_inverse=True)
            p = net.forward(uniq.reshape(-1, N_TICKS, 2))
            out.append((p >= 0.5).astype(int)[inv.reshape(-1)])
        return [(a, b, "models") for a, b in zip(out[0], out[1])]

    def handle_requests(self, t, freq_ticks):
        start = self.r
        while self.r < len(self.requests) and self.requests[self.r][0] <= t + 1e-9:
            self.r += 1
        batch = self.requests[start:self.r]
        if not batch:
            return
        if not self.mitigate:
            for tr, sid, kind in batch:
                self._push(tr, sid, kind)
            return
        labels = self._labels([sid for _, sid, _ in batch], t, freq_ticks)
        for (tr, sid, kind), lab in zip(batch, labels):
            i = self.index[sid]
            st = self.states[i]
            if lab is None:
                msg = f"station {sid}: history shorter than the window at t={tr:.2f}s, treated as normal"
                st.warnings.append(msg)
                decide(st, 0, 0, tr, sid, self.sc.target_bus)
            else:
                decide(st, lab[0], lab[1], tr, sid, self.sc.target_bus, lab[2])
            if st.active and self.first_active is None:
                self.first_active = tr
            d = delay_for_request(self.rngs[i], st, self.cfg.max_delay)
            if st.active:
                self.delays.append(d)
            self._push(tr + d, sid, kind)

    def _push(self, te, sid, kind):
        i = self.index[sid]
        te = max(te, self.last_exec[i])        # a station executes its requests in order
        self.last_exec[i] = te
        heapq.heappush(self.pending, (te, self.seq, i, kind))
        self.seq += 1

    def execute(self, t):
        while self.pending and self.pending[0][0] <= t + 1e-9:
            te, _, i, kind = heapq.heappop(self.pending)
            want = kind == Kind.START
            if want != self.on[i]:
                self.on[i] = want
                self.logs[i].append((te, Kind(kind)))

    def load_MW(self):
        return self.on.sum() * self.per_kW


def _run(model, scenario, m1, m2, cfg, noise, mitigate):
    side = _StationSide(scenario, m1, m2, cfg, mitigate)
    j = model.bus_index(scenario.target_bus)
    per_tick = int(round(TICK_S / cfg.dt))
    per_sample = int(round(cfg.sample_every / cfg.dt))
    n_hist = int(round(cfg.history / cfg.dt))
    ticks = []
    attack = []

    def hook(k, t, freq):
        if (k - n_hist) % per_tick == 0:
            ticks.append(float(freq[0, j]))
        side.handle_requests(t, ticks)
        side.execute(t)
        out = np.zeros(freq.shape)
        out[:, j] = side.load_MW()
        if k >= n_hist and (k - n_hist) % per_sample == 0:
            attack.append(out[0, j])
        return out

    speeds, _ = grid.integrate(model, noise, cfg.dt, per_sample, feedback=hook, t0=-n_hist * cfg.dt)
    f = grid.bus_frequencies(model, speeds)[:, j]
    n0 = n_hist // per_sample
    return f[n0:], np.array(attack), side


@dataclass
class MitigationReport:
    time_s: np.ndarray
    freq_hz: np.ndarray
    freq_unmitigated_hz: np.ndarray
    attack_load_MW: np.ndarray
    attack_load_unmitigated_MW: np.ndarray
    attack_start_s: float
    mitigation_start_s: float
    detection_time_s: float
    time_to_normal_band_s: float
    decay_onset_s: float
    plateau_fraction: float
    spectral_ratio: float
    delays: np.ndarray
    report_log: list
    activations: int
    magnitude_MW: float
    period_s: float
    band_hz: float
    nominal_hz: float
    warnings: list = field(default_factory=list)

    @property
    def delayed_request_count(self):
        return int(len(self.delays))

    def delay_histogram(self, bins=HIST_BINS):
        counts, edges = np.histogram(self.delays, bins=bins)
        return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}

    def summary(self):
        return {
            "attack_start_s": self.attack_start_s,
            "mitigation_start_s": self.mitigation_start_s,
            "detection_time_s": self.detection_time_s,
            "time_to_normal_band_s": round(self.time_to_normal_band_s, 6),
            "decay_onset_s": None if self.decay_onset_s is None else round(self.decay_onset_s, 6),
            "plateau_fraction": round(self.plateau_fraction, 6),
            "spectral_ratio": round(self.spectral_ratio, 8),
            "delayed_request_count": self.delayed_request_count,
            "delay_histogram": self.delay_histogram(),
            "activations": self.activations,
            "operator_reports": len(self.report_log),
            "magnitude_MW": self.magnitude_MW,
            "period_s": self.period_s,
            "peak_to_peak_hz": {"mitigated": round(float(np.ptp(self.freq_hz)), 9),
                                "unmitigated": round(float(np.ptp(self.freq_unmitigated_hz)), 9)},
        }

    def write(self, out_dir):
        """freq.csv, attack_load.csv, summary.json and reports.json under out_dir."""
        import os
        np.savetxt(os.path.join(out_dir, "freq.csv"), np.column_stack([self.time_s, self.freq_hz]),
                   fmt="%.6f", delimiter=",", header="time_s,freq_hz", comments="")
        np.savetxt(os.path.join(out_dir, "freq_unmitigated.csv"),
                   np.column_stack([self.time_s, self.freq_unmitigated_hz]),
                   fmt="%.6f", delimiter=",", header="time_s,freq_hz", comments="")
        np.savetxt(os.path.join(out_dir, "attack_load.csv"),
                   np.column_stack([self.time_s, self.attack_load_MW, self.attack_load_unmitigated_MW]),
                   fmt="%.6f", delimiter=",", header="time_s,attack_load_mw,unmitigated_attack_load_mw",
                   comments="")
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, "reports.json"), "w") as fh:
            json.dump(self.report_log, fh, indent=1)


def time_to_band(t, f, t_m, nominal, band, step):
    """Seconds after t_m until the last exit from the band; 0 if it never leaves."""
    out = np.flatnonzero((np.abs(f - nominal) > band) & (t >= t_m))
    return 0.0 if len(out) == 0 else float(t[out[-1]] + step - t_m)


def swing_extrema(f, threshold):
    """Indices of confirmed alternating extrema: moves smaller than ``threshold`` are ignored."""
    ext = []
    lo = hi = c = 0
    d = 0
    for i in range(1, len(f)):
        if d == 0:
            lo = i if f[i] < f[lo] else lo
            hi = i if f[i] > f[hi] else hi
            if f[i] - f[lo] >= threshold:
                ext.append(lo)
                d, c = 1, i
            elif f[hi] - f[i] >= threshold:
                ext.append(hi)
                d, c = -1, i
        elif d == 1:
            if f[i] > f[c]:
                c = i
            elif f[c] - f[i] >= threshold:
                ext.append(c)
                d, c = -1, i
        else:
            if f[i] < f[c]:
                c = i
            elif f[i] - f[c] >= threshold:
                ext.append(c)
                d, c = 1, i
    return np.array(ext, dtype=int)


def decay_onset(t, f, t_m, drop=0.9):
    """Delay after t_m of the last full swing before the first swing below drop x the pre-mitigation amplitude.

    Swings are the differences between successive extrema; the reference
    amplitude is the median swing of the 5 s before t_m.  None if no
    oscillation precedes t_m or it never shrinks.
    """
    pre = f[(t >= t_m - 5.0) & (t < t_m)]
    if len(pre) < 3 or np.ptp(pre) == 0:
        return None
    ext = swing_extrema(f, 0.1 * np.ptp(pre))
    if len(ext) < 3:
        return None
    sw = np.abs(np.diff(f[ext]))
    ends = t[ext[1:]]
    ref_mask = (ends >= t_m - 5.0) & (ends < t_m)
    if not ref_mask.any():
        return None
    ref = float(np.median(sw[ref_mask]))
    for k in np.flatnonzero(ends >= t_m):
        if sw[k] < drop * ref:
            return max(0.0, float(t[ext[k]] - t_m))
    return None


def fundamental_power(x, t, period):
    x = x - x.mean()
    return float(abs(np.sum(x * np.exp(-2j * np.pi * t / period))) ** 2)


def run_closed_loop(model, attack, m1=None, m2=None, config=None, fleet=None):
    """Simulate an attack against stations running the detector and delay loop.

    Returns a MitigationReport holding the mitigated run and an unmitigated
    counterfactual driven by the same benign noise.  With ``worst_case`` the
    models are bypassed and every station switches to mitigation exactly
    ``detection_lag`` s after the attack starts.  ``fleet`` optionally adds
    the load of benign stations (not subject to detection).
    """
    cfg = MitigationConfig() if config is None else config
    if not cfg.worst_case and (m1 is None or m2 is None):
        raise ConfigError("two checkpoints are needed unless worst_case is set")
    if attack.target_bus not in model.bus_ids:
        raise ConfigError(f"attack targets unknown bus {attack.target_bus}")
    n_hist = int(round(cfg.history / cfg.dt))
    n_run = int(round(cfg.horizon / cfg.dt))
    rng = np.random.default_rng([cfg.seed, 3])
    noise = grid.benign_load_noise(rng, model, (n_hist + n_run) * cfg.dt, cfg.dt, cfg.noise_cap, cfg.noise_dist)
    noise = noise[:n_hist + n_run]
    if fleet is not None:
        from .fleet import advance_fleet
        extra = np.zeros_like(noise)
        cols = [model.bus_index(b) for b in fleet.bus_ids]
        for k in range(n_run):
            _, loads = advance_fleet(fleet, k * cfg.dt, cfg.dt)
            extra[n_hist + k, cols] = loads
        noise = noise + extra
    f_m, a_m, side = _run(model, attack, m1, m2, cfg, noise, True)
    f_u, a_u, _ = _run(model, attack, m1, m2, cfg, noise, False)
    t = np.arange(len(f_m)) * cfg.sample_every + cfg.sample_every
    ta = np.arange(len(a_m)) * cfg.sample_every
    if cfg.worst_case:
        t_m = attack.start_time + cfg.detection_lag
    else:
        t_m = side.first_active if side.first_active is not None else float("inf")
    nominal = model.nominal_freq
    ttn = time_to_band(t, f_m, t_m, nominal, cfg.band_hz, cfg.sample_every) if np.isfinite(t_m) else float("nan")
    win = (ta >= t_m) & (ta < t_m + 30.0)
    if win.any() and attack.aggregate_period > 0:
        pu = fundamental_power(a_u[win], ta[win], attack.aggregate_period)
        ratio = fundamental_power(a_m[win], ta[win], attack.aggregate_period) / pu if pu > 0 else 0.0
    else:
        ratio = float("nan")
    late = (ta >= t_m + 10.0) & (ta < t_m + 30.0)
    plateau = float(a_m[late].mean() / attack.magnitude_MW) if late.any() else float("nan")
    reports = [r for st in side.states for r in st.report_log]
    reports.sort(key=lambda r: (r["time"], r["station_id"]))
    warnings = [w for st in side.states for w in st.warnings]
    return MitigationReport(
        time_s=t, freq_hz=f_m, freq_unmitigated_hz=f_u, attack_load_MW=a_m, attack_load_unmitigated_MW=a_u,
        attack_start_s=attack.start_time, mitigation_start_s=float(t_m),
        detection_time_s=None if side.first_active is None else float(side.first_active),
        time_to_normal_band_s=ttn, decay_onset_s=decay_onset(t, f_m, t_m) if np.isfinite(t_m) else None,
        plateau_fraction=plateau, spectral_ratio=float(ratio), delays=np.array(side.delays),
        report_log=reports, activations=sum(st.activations for st in side.states),
        magnitude_MW=attack.magnitude_MW, period_s=attack.aggregate_period, band_hz=cfg.band_hz,
        nominal_hz=nominal, warnings=warnings)


def demo_attack(model, magnitude_MW=37.5, bus=9, period=2.4, start=5.0, duration=None, charge_rate_kW=360.0,
                horizon=60.0):
    """Synchronous 50% duty square wave used for the closed-loop demonstration."""
    from .attacks import fleet_size_for_attack, square_wave
    n = fleet_size_for_attack(magnitude_MW, charge_rate_kW)
    duration = horizon - start if duration is None else duration
    return square_wave(bus, period, 0.5, magnitude_MW, start, duration, list(range(n)), charge_rate_kW)
