"""Labelled 240 x 2 windows coupling a station's events with its bus frequency.

One window per scenario.  Normal scenarios come in four flavours and attack
scenarios in two; every scenario draws its parameters from its own stream
``default_rng([seed, scenario_id])`` so datasets are reproducible and any
subset can be regenerated independently.
"""

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from enum import IntEnum

import numpy as np

from . import attacks, fleet, grid
from .errors import ConfigError, DataFault

N_TICKS = fleet.N_TICKS
HORIZON = 125.0          # s simulated per scenario; the window ends at the horizon
HISTORY = 3600.0         # s of benign station history generated before t = 0
DT = grid.DEFAULT_DT


class Regime(IntEnum):
    ATTACK1 = 1      # early-detection probe windows only
    ATTACK5 = 5
    ATTACK10 = 10


class ScenarioClass(IntEnum):
    VERY_SLOW_NORMAL = 0
    VERY_SLOW_ABNORMAL = 1
    SLOW_NORMAL = 2
    FAST_NORMAL = 3
    FAST_ATTACK = 4
    STEALTHY_ATTACK = 5


NORMAL_CLASSES = (ScenarioClass.VERY_SLOW_NORMAL, ScenarioClass.VERY_SLOW_ABNORMAL,
                  ScenarioClass.SLOW_NORMAL, ScenarioClass.FAST_NORMAL)
ATTACK_CLASSES = (ScenarioClass.FAST_ATTACK, ScenarioClass.STEALTHY_ATTACK)

# arrival-rate ranges, events per hour
LAMBDA_VERY_SLOW = (0.5, 6.0)
LAMBDA_SLOW = (6.0, 60.0)
LAMBDA_FAST = (360.0, 720.0)


def parse_regime(value):
    if isinstance(value, Regime):
        return value
    if isinstance(value, str):
        key = value.strip().lower().replace("-", "").replace("_", "")
        table = {"attack1": Regime.ATTACK1, "attack5": Regime.ATTACK5, "attack10": Regime.ATTACK10}
        if key in table:
            return table[key]
        if key.isdigit():
            value = int(key)
        else:
            raise ConfigError(f"unknown regime {value!r}")
    try:
        return Regime(int(value))
    except ValueError:
        raise ConfigError(f"unknown regime {value!r}") from None


@dataclass
class WindowSample:
    events: np.ndarray          # 240 codes as float: 0 empty, 1 Stop, 2 Start
    frequency: np.ndarray       # 240 normalised values in [0, 1]
    label: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.events) != N_TICKS or len(self.frequency) != N_TICKS:
            raise ConfigError("window vectors must have 240 entries")
        if self.label not in (0, 1):
            raise ConfigError("label must be 0 or 1")

    def matrix(self):
        return np.stack([self.events, self.frequency], axis=1)


def encode_events(series):
    """Slot codes -> float vector (empty 0, Stop 1, Start 2)."""
    codes = np.asarray(series)
    if codes.shape != (N_TICKS,):
        raise ConfigError(f"event series must have {N_TICKS} slots, got {codes.shape}")
    if codes.dtype.kind in "OU":
        lut = {None: 0.0, "": 0.0, fleet.Kind.STOP: 1.0, fleet.Kind.START: 2.0, "Stop": 1.0, "Start": 2.0}
        return np.array([lut[c] for c in codes])
    return codes.astype(float)


def normalize_frequency(raw, min_hz, max_hz):
    """Min-max scaling to [0, 1], clamped for values outside the fitted range."""
    if not min_hz < max_hz:
        raise ConfigError(f"degenerate bounds {min_hz} >= {max_hz}")
    x = (np.asarray(raw, dtype=float) - min_hz) / (max_hz - min_hz)
    return np.clip(x, 0.0, 1.0)


def label_window(scenario, station_id, t_end, regime, bus_id=None, horizon=None):
    """1 iff the station takes part in an attack on its own bus during the last K s."""
    K = float(parse_regime(regime))
    if t_end < fleet.WINDOW_S - 1e-9 or (horizon is not None and t_end > horizon + 1e-9):
        raise ConfigError(f"window ending at {t_end} is outside the scenario horizon")
    if scenario is None or not scenario.involves(station_id):
        return 0
    if bus_id is not None and scenario.target_bus != bus_id:
        return 0
    overlaps = scenario.start_time < t_end and scenario.end_time > t_end - K
    return int(overlaps)


def apply_requests(requests, initial_state=False):
    """Keep only the requests that change the station state (the executed events)."""
    on = initial_state
    out = []
    for t, k in sorted(requests, key=lambda e: e[0]):
        want = k == fleet.Kind.START
        if want != on:
            out.append((t, k))
            on = want
    return out


@dataclass
class DatasetConfig:
    n_normal: int = 1000
    n_attack: int = 1000
    grid: str = "wscc9"
    regime: int = 5
    seed: int = 0
    noise_cap: tuple = (0.005, 0.02)
    charge_rate_kW: float = 11.0
    heavy_fraction: float = 0.8
    chunk: int = 100
    attack_tail: float = None       # override the attack's age at window end (probe windows)

    def __post_init__(self):
        self.regime = int(parse_regime(self.regime))
        if self.n_normal < 0 or self.n_attack < 0:
            raise ConfigError("scenario counts must be >= 0")
        lo, hi = self.noise_cap
        if not (0 <= lo <= hi <= 0.1):
            raise ConfigError("noise_cap must satisfy 0 <= lo <= hi <= 0.1")
        self.noise_cap = (float(lo), float(hi))

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "noise_cap" in known:
            known["noise_cap"] = tuple(known["noise_cap"])
        return cls(**known)


@dataclass
class _Scenario:
    sid: int
    cls: ScenarioClass
    bus: int
    station_id: int
    events: list
    attack: object              # AttackScenario, DynamicFeedback or None (affects frequency)
    disturbance: tuple          # (t, bus, MW) benign step or None
    noise: np.ndarray
    label: int


OBS_STATION = 0      # id of the observed station inside its scenario


def _bus_load(model, bus):
    return model.bus(bus).nominal_load_MW


def _attack_params(rng):
    period = round(float(rng.uniform(*attacks.PERIOD_RANGE)), 2)
    duty = float(rng.choice(attacks.DUTY_CYCLES))
    frac = float(rng.uniform(*attacks.MAGNITUDE_RANGE))
    return period, duty, frac


def _make_attack(rng, model, bus, t_a, kind, include_station, charge_rate_kW):
    """Attack on ``bus`` starting at t_a; returns (scenario_or_controller, observed events)."""
    period, duty, frac = _attack_params(rng)
    mag = frac * _bus_load(model, bus)
    dur = HORIZON - t_a + 5.0
    n = attacks.fleet_size_for_attack(mag, charge_rate_kW)
    if kind == "dynamic":
        ctl = attacks.DynamicFeedback(model, bus, mag, start=t_a, charge_rate_kW=charge_rate_kW)
        return ctl, None
    if kind == "square":
        sc = attacks.square_wave(bus, period, duty, mag, t_a, dur, n + 1, charge_rate_kW)
    elif kind == "alternating":
        G = int(rng.choice([4, 5, 6, 8]))
        sc = attacks.alternating_portions(bus, 1.0 / G, period / G, mag, t_a, dur,
                                          G * n + 1, charge_rate_kW)
    elif kind == "stealthy":
        m = int(rng.choice([2, 3]))
        sc = attacks.distributed_stealthy(bus, 1.0 / period, m, mag, t_a, dur, m * n + 1,
                                          duty=duty, charge_rate_kW=charge_rate_kW)
    else:
        raise ConfigError(kind)
    # ids in the pool are shifted by one so the observed station (id 0) is excluded by default
    sc.group_members = [[i + 1 for i in ids] for ids in sc.group_members]
    if include_station:
        sizes = np.array([len(ids) for ids in sc.group_members], dtype=float)
        g = int(rng.choice(len(sizes), p=sizes / sizes.sum()))
        sc.group_members[g][0] = OBS_STATION
        return sc, list(sc.group_schedules[g])
    return sc, None


def _benign_station_events(rng, cls, heavy_fraction):
    heavy = rng.random() < heavy_fraction
    params = fleet.HEAVY_USE if heavy else fleet.LIGHT_SWITCHY
    if cls == ScenarioClass.FAST_NORMAL:
        params, lam = fleet.FAST_SWITCHING, rng.uniform(*LAMBDA_FAST)
        t0 = -600.0
    elif cls in (ScenarioClass.SLOW_NORMAL,):
        lam, t0 = rng.uniform(*LAMBDA_SLOW), -HISTORY
    else:
        lam, t0 = rng.uniform(*LAMBDA_VERY_SLOW), -HISTORY
    return fleet.benign_events(rng, params, HORIZON - t0, t0=t0, lam=lam)


def _draw_scenario(cfg, model, sid, cls, t_tail):
    rng = np.random.default_rng([cfg.seed, sid])
    buses = model.bus_ids
    bus = int(buses[rng.integers(len(buses))])
    cap = float(rng.uniform(*cfg.noise_cap))
    dist = "gaussian" if sid % 2 == 0 else "uniform"
    noise = grid.benign_load_noise(rng, model, HORIZON, DT, cap_fraction=cap, dist=dist)
    attack, disturbance = None, None
    if cls in ATTACK_CLASSES:
        pre_cls = ScenarioClass.SLOW_NORMAL if rng.random() < 0.5 else ScenarioClass.VERY_SLOW_NORMAL
        pre = _benign_station_events(rng, pre_cls, cfg.heavy_fraction)
        t_a = HORIZON - t_tail
        if cls == ScenarioClass.FAST_ATTACK:
            kind = ("square", "alternating", "dynamic")[int(rng.integers(3))]
        else:
            kind = "stealthy"
        attack, own = _make_attack(rng, model, bus, t_a, kind, True, cfg.charge_rate_kW)
        before = [(t, k) for t, k in pre if t < t_a]
        events = before, own
    else:
        events = (_benign_station_events(rng, cls, cfg.heavy_fraction), [])
        if cls == ScenarioClass.VERY_SLOW_ABNORMAL:
            onset = HORIZON - float(rng.uniform(1.0, 110.0))
            if rng.random() < 0.5:
                other = int(buses[rng.integers(len(buses))])
                kind = ("square", "alternating", "stealthy", "dynamic")[int(rng.integers(4))]
                attack, _ = _make_attack(rng, model, other, onset, kind, False, cfg.charge_rate_kW)
            else:
                other = int(buses[rng.integers(len(buses))])
                step = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.03, 0.10) * _bus_load(model, other))
                disturbance = (onset, other, step)
    return _Scenario(sid, cls, bus, OBS_STATION, events, attack, disturbance, noise, 0)


def _finish_events(sc):
    before, own = sc.events
    if own is None:
        return None     # dynamic attacker: filled in after simulation
    return apply_requests(list(before) + list(own))


def scenario_classes(n_normal, n_attack):
    """Class of every scenario id: normals first (round-robin), then attacks."""
    out = [NORMAL_CLASSES[i % 4] for i in range(n_normal)]
    out += [ATTACK_CLASSES[i % 2] for i in range(n_attack)]
    return out


def _simulate_chunk(model, scenarios):
    n_steps = int(round(HORIZON / DT))
    per = int(round(fleet.TICK_S / DT))
    times = np.arange(n_steps) * DT
    loads = np.stack([sc.noise for sc in scenarios])
    dynamic = []
    for i, sc in enumerate(scenarios):
        if isinstance(sc.attack, attacks.AttackScenario):
            loads[i] += attacks.attack_profile(model, sc.attack, HORIZON, DT)
        elif sc.attack is not None:
            dynamic.append(i)
        if sc.disturbance is not None:
            t0, b, mw = sc.disturbance
            loads[i, times >= t0 - 1e-9, model.bus_index(b)] += mw
    static = [i for i in range(len(scenarios)) if i not in dynamic]
    freqs = np.empty((len(scenarios), n_steps // per, len(model.buses)))
    if static:
        speeds, _ = grid.integrate(model, loads[static], DT, per)
        freqs[static] = grid.bus_frequencies(model, speeds)
    for i in dynamic:
        ctl = scenarios[i].attack
        speeds, _ = grid.integrate(model, loads[i:i + 1], DT, per, feedback=lambda k, t, f: ctl(k, t, f))
        freqs[i] = grid.bus_frequencies(model, speeds[0])
    return freqs


class Dataset:
    """Window samples as arrays; frequency kept in Hz, normalised on access."""

    def __init__(self, events, freq_hz, labels, meta, bounds=None, config=None):
        self.events = np.asarray(events, dtype=np.int8).reshape(-1, N_TICKS)
        self.freq_hz = np.asarray(freq_hz, dtype=np.float64).reshape(-1, N_TICKS)
        self.labels = np.asarray(labels, dtype=np.int8).reshape(-1)
        self.meta = np.asarray(meta, dtype=META_DTYPE).reshape(-1)
        n = len(self.labels)
        if not (len(self.events) == len(self.freq_hz) == len(self.meta) == n):
            raise DataFault("inconsistent dataset array lengths")
        self.bounds = fit_bounds(self.freq_hz) if bounds is None else (float(bounds[0]), float(bounds[1]))
        self.config = dict(config or {})

    def __len__(self):
        return len(self.labels)

    @property
    def class_counts(self):
        return {"normal": int((self.labels == 0).sum()), "attack": int((self.labels == 1).sum())}

    def scenario_class_counts(self):
        c = np.bincount(self.meta["scenario_class"], minlength=len(ScenarioClass))
        return {ScenarioClass(i).name: int(v) for i, v in enumerate(c)}

    def features(self, bounds=None):
        """(N, 240, 2) float array: encoded events and normalised frequency."""
        lo, hi = self.bounds if bounds is None else bounds
        return np.stack([self.events.astype(float), normalize_frequency(self.freq_hz, lo, hi)], axis=2)

    def subset(self, idx, bounds=None):
        idx = np.asarray(idx)
        return Dataset(self.events[idx], self.freq_hz[idx], self.labels[idx], self.meta[idx],
                       self.bounds if bounds is None else bounds, self.config)

    def sample(self, i):
        m = self.meta[i]
        meta = {name: m[name].item() for name in META_DTYPE.names}
        return WindowSample(self.events[i].astype(float), normalize_frequency(self.freq_hz[i], *self.bounds),
                            int(self.labels[i]), meta)

    @property
    def samples(self):
        return [self.sample(i) for i in range(len(self))]

    def keys(self):
        return set(zip(self.meta["scenario_id"].tolist(), self.meta["station_id"].tolist(),
                       self.meta["t_end"].tolist()))

    def save(self, path):
        save_dataset(self, path)


META_DTYPE = np.dtype([("scenario_id", "<u4"), ("station_id", "<u4"), ("bus_id", "<u2"),
                       ("regime", "u1"), ("scenario_class", "u1"), ("t_end", "<f8")])


def fit_bounds(freq_hz):
    freq_hz = np.asarray(freq_hz)
    if freq_hz.size == 0:
        return (59.5, 60.5)
    lo, hi = float(freq_hz.min()), float(freq_hz.max())
    if not lo < hi:
        lo, hi = lo - 1e-3, hi + 1e-3
    return (lo, hi)


def synthesize_dataset(config, rng=None):
    """Build the balanced dataset described by ``config`` (a DatasetConfig or dict).

    ``rng`` is accepted for interface symmetry; all randomness comes from
    per-scenario streams keyed by (config.seed, scenario_id).
    """
    cfg = config if isinstance(config, DatasetConfig) else DatasetConfig.from_dict(config)
    model = grid.build_grid(cfg.grid)
    regime = Regime(cfg.regime)
    t_tail = float(regime) if cfg.attack_tail is None else float(cfg.attack_tail)
    if not 0.0 < t_tail <= 100.0:
        raise ConfigError("attack tail must be in (0, 100] s")
    classes = scenario_classes(cfg.n_normal, cfg.n_attack)
    n = len(classes)
    events = np.zeros((n, N_TICKS), dtype=np.int8)
    freq = np.zeros((n, N_TICKS))
    labels = np.zeros(n, dtype=np.int8)
    meta = np.zeros(n, dtype=META_DTYPE)
    t_end = HORIZON
    for c0 in range(0, n, max(1, cfg.chunk)):
        chunk = [_draw_scenario(cfg, model, sid, classes[sid], t_tail)
                 for sid in range(c0, min(n, c0 + cfg.chunk))]
        f = _simulate_chunk(model, chunk)
        for sc, fi in zip(chunk, f):
            ev = _finish_events(sc)
            attack = sc.attack
            if isinstance(attack, attacks.DynamicFeedback):
                attack = attack.scenario()
                if sc.cls in ATTACK_CLASSES:
                    attack.group_members = [[OBS_STATION] + list(range(1, len(attack.group_members[0])))]
                    before, _ = sc.events
                    ev = apply_requests(list(before) + list(attack.group_schedules[0]))
                else:
                    attack.group_members = [[i + 1 for i in attack.group_members[0]]]
            i = sc.sid
            events[i] = fleet.window_events(ev, t_end)
            freq[i] = fi[-N_TICKS:, model.bus_index(sc.bus)]
            labels[i] = label_window(attack, sc.station_id, t_end, regime, bus_id=sc.bus, horizon=HORIZON)
            meta[i] = (sc.sid, sc.station_id, sc.bus, int(regime), int(sc.cls), t_end)
    if cfg.n_attack and labels[cfg.n_normal:].min() == 0:
        raise DataFault("an attack scenario produced a normal label")
    cfg_dict = asdict(cfg)
    cfg_dict["noise_cap"] = list(cfg.noise_cap)
    return Dataset(events, freq, labels, meta, config=cfg_dict)


def split(dataset, train_fraction=0.8, rng=None):
    """Stratified split; normalisation bounds are refitted on the training part."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(0) if rng is None else rng
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    train_idx, test_idx = [], []
    for lab in (0, 1):
        idx = np.flatnonzero(dataset.labels == lab)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            raise ConfigError(f"too few samples with label {lab} to stratify")
        idx = rng.permutation(idx)
        k = int(round(train_fraction * len(idx)))
        k = min(max(k, 1), len(idx) - 1)
        train_idx.append(idx[:k])
        test_idx.append(idx[k:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    bounds = fit_bounds(dataset.freq_hz[tr])
    return dataset.subset(tr, bounds), dataset.subset(te, bounds)


def concat(parts):
    parts = list(parts)
    return Dataset(np.concatenate([p.events for p in parts]), np.concatenate([p.freq_hz for p in parts]),
                   np.concatenate([p.labels for p in parts]), np.concatenate([p.meta for p in parts]),
                   parts[0].bounds, parts[0].config)


# ---- binary container -------------------------------------------------------

DS_MAGIC = b"OGDS1"
DS_VERSION = 1
RECORD_DTYPE = np.dtype([("scenario_id", "<u4"), ("station_id", "<u4"), ("bus_id", "<u2"),
                         ("regime", "u1"), ("scenario_class", "u1"), ("label", "u1"), ("t_end", "<f8"),
                         ("events", "i1", (N_TICKS,)), ("freq_hz", "<f8", (N_TICKS,))])


def dataset_bytes(ds):
    header = {
        "count": len(ds),
        "n_ticks": N_TICKS,
        "record_size": RECORD_DTYPE.itemsize,
        "bounds": list(ds.bounds),
        "class_counts": ds.class_counts,
        "config": ds.config,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    rec = np.zeros(len(ds), dtype=RECORD_DTYPE)
    for name in META_DTYPE.names:
        rec[name] = ds.meta[name]
    rec["label"] = ds.labels
    rec["events"] = ds.events
    rec["freq_hz"] = ds.freq_hz
    return DS_MAGIC + struct.pack("<HI", DS_VERSION, len(hb)) + hb + rec.tobytes()


def save_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def load_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return dataset_from_bytes(blob, str(path))


def dataset_from_bytes(blob, name="<bytes>"):
    if blob[:5] != DS_MAGIC:
        raise DataFault(f"bad magic in {name}: expected {DS_MAGIC!r}")
    if len(blob) < 11:
        raise DataFault(f"truncated header in {name}")
    version, hlen = struct.unpack("<HI", blob[5:11])
    if version != DS_VERSION:
        raise DataFault(f"unsupported dataset version {version} in {name}")
    try:
        header = json.loads(blob[11:11 + hlen])
    except ValueError as exc:
        raise DataFault(f"corrupt header in {name}: {exc}") from None
    body = blob[11 + hlen:]
    if header.get("record_size") != RECORD_DTYPE.itemsize or len(body) != header["count"] * RECORD_DTYPE.itemsize:
        raise DataFault(f"record block size mismatch in {name}")
    rec = np.frombuffer(body, dtype=RECORD_DTYPE)
    meta = np.zeros(len(rec), dtype=META_DTYPE)
    for nm in META_DTYPE.names:
        meta[nm] = rec[nm]
    ds = Dataset(rec["events"].copy(), rec["freq_hz"].copy(), rec["label"].astype(np.int8), meta,
                 header["bounds"], header.get("config"))
    if ds.class_counts != header["class_counts"]:
        raise DataFault(f"class counts in header do not match records in {name}")
    if not np.all(np.isin(ds.events, (0, 1, 2))):
        raise DataFault(f"event codes outside {{0,1,2}} in {name}")
    return ds


def export_csv(ds, path):
    """Long format: one row per (sample, slot)."""
    normed = normalize_frequency(ds.freq_hz, *ds.bounds)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario_id", "station_id", "bus_id", "t_end", "regime", "label", "slot",
                    "event", "freq_hz", "freq_norm"])
        for i in range(len(ds)):
            m = ds.meta[i]
            for s in range(N_TICKS):
                w.writerow([m["scenario_id"], m["station_id"], m["bus_id"], f"{m['t_end']:.1f}", m["regime"],
                            ds.labels[i], s, ds.events[i, s], repr(float(ds.freq_hz[i, s])),
                            f"{normed[i, s]:.6f}"])


def window_from_log(log, trace_samples, t_end, bounds):
    """Features (240, 2) for a live station: its log and the bus frequency history in Hz."""
    codes = fleet.window_events(log, t_end)
    f = np.asarray(trace_samples, dtype=float)
    if len(f) < N_TICKS:
        raise DataFault("frequency history shorter than the window")
    return np.stack([codes.astype(float), normalize_frequency(f[-N_TICKS:], *bounds)], axis=1)
