"""Discrete-event model of EV charging stations.

Each station is Idle or Charging.  Benign behaviour is a Poisson stream of
arrivals with truncated-Gaussian session lengths; an arrival that finds the
station busy is lost (no queue).  Every state change is logged as a Start or
Stop event, and a station's detector looks at its own log through a
120 s window of 240 half-second slots.
"""

import csv
import heapq
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np

from .errors import ConfigError

WINDOW_S = 120.0
TICK_S = 0.5
N_TICKS = 240


class Kind(IntEnum):
    # values double as the event-channel codes (0 = empty slot)
    STOP = 1
    START = 2


class StationState(Enum):
    IDLE = "idle"
    CHARGING = "charging"


class Profile(Enum):
    HEAVY_USE = "heavy"
    LIGHT_SWITCHY = "light"


# Hourly arrival-rate multipliers (mean 1) with morning and evening peaks,
# and seasonal scale factors.  Defaults only, not fitted to any dataset.
HOURLY_SHAPE = np.array([
    0.25, 0.15, 0.10, 0.10, 0.15, 0.35, 0.80, 1.40, 1.70, 1.40, 1.10, 1.10,
    1.20, 1.10, 1.05, 1.20, 1.50, 1.80, 1.70, 1.40, 1.10, 0.80, 0.55, 0.40,
])
HOURLY_SHAPE = HOURLY_SHAPE / HOURLY_SHAPE.mean()
SEASON_SCALE = {"winter": 0.85, "spring": 1.0, "summer": 1.15, "autumn": 1.0}


@dataclass(frozen=True)
class SessionParams:
    arrival_rate_lambda: float      # events / hour at the reference hour
    duration_mean: float            # s
    duration_std: float
    duration_min: float
    duration_max: float
    charge_rate_kW: float = 11.0
    hourly_shape: tuple = None      # optional 24 multipliers; None = flat
    burst_prob: float = 0.0         # chance a session opens with a short on/off burst

    def __post_init__(self):
        if not self.arrival_rate_lambda >= 0:
            raise ConfigError("arrival rate must be >= 0")
        if not self.duration_std > 0:
            raise ConfigError("duration_std must be > 0")
        if not (self.duration_min <= self.duration_mean <= self.duration_max):
            raise ConfigError("need duration_min <= duration_mean <= duration_max")
        if not self.charge_rate_kW > 0:
            raise ConfigError("charge_rate_kW must be > 0")
        if not 0.0 <= self.burst_prob <= 1.0:
            raise ConfigError("burst_prob must be in [0, 1]")

    def rate_at(self, hour=None, season=None):
        lam = self.arrival_rate_lambda
        if hour is not None and self.hourly_shape is not None:
            lam *= self.hourly_shape[int(hour) % 24]
        if season is not None:
            lam *= SEASON_SCALE[season]
        return lam

    def with_rate(self, lam):
        return SessionParams(lam, self.duration_mean, self.duration_std, self.duration_min,
                             self.duration_max, self.charge_rate_kW, self.hourly_shape, self.burst_prob)


HEAVY_USE = SessionParams(3.0, 1440.0, 900.0, 55.0, 4 * 3600.0, hourly_shape=tuple(HOURLY_SHAPE))
LIGHT_SWITCHY = SessionParams(3.0, 480.0, 360.0, 26.0, 3600.0, hourly_shape=tuple(HOURLY_SHAPE),
                              burst_prob=0.5)
# plug/unplug several times a minute on arrival
FAST_SWITCHING = SessionParams(480.0, 8.0, 4.0, 1.0, 30.0)
PROFILES = {Profile.HEAVY_USE: HEAVY_USE, Profile.LIGHT_SWITCHY: LIGHT_SWITCHY}


def sample_arrivals(rng, lam, horizon, t0=0.0):
    """Homogeneous Poisson arrivals (lam per hour) on [t0, t0 + horizon)."""
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    if lam == 0 or horizon <= 0:
        return np.empty(0)
    rate = lam / 3600.0
    # draw in chunks of roughly the expected count
    n_guess = int(rate * horizon + 4 * math.sqrt(rate * horizon) + 8)
    t = t0 + np.cumsum(rng.exponential(1.0 / rate, n_guess))
    while t[-1] < t0 + horizon:
        more = t[-1] + np.cumsum(rng.exponential(1.0 / rate, n_guess))
        t = np.concatenate([t, more])
    return t[t < t0 + horizon]


def sample_duration(rng, params, size=None):
    """Truncated Gaussian session length by rejection."""
    lo, hi = params.duration_min, params.duration_max
    if lo == hi:
        return lo if size is None else np.full(size, float(lo))
    n = 1 if size is None else int(np.prod(size))
    out = rng.normal(params.duration_mean, params.duration_std, n)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.normal(params.duration_mean, params.duration_std, int(bad.sum()))
        bad = (out < lo) | (out > hi)
    return float(out[0]) if size is None else out.reshape(size)


def _burst(rng, t):
    """2-3 quick start/stop cycles inside three minutes, ending in the real start."""
    n = int(rng.integers(2, 4))
    gaps = rng.uniform(15.0, 60.0, 2 * n)
    scale = min(1.0, 170.0 / gaps.sum())
    out, now = [], t
    for i in range(n):
        out.append((now, Kind.START))
        now += gaps[2 * i] * scale
        out.append((now, Kind.STOP))
        now += gaps[2 * i + 1] * scale
    return out, now


def benign_events(rng, params, horizon, t0=0.0, lam=None, initially_charging=False):
    """Event list [(time, Kind)] for one benign station over [t0, t0 + horizon).

    Arrivals landing while the station is busy are dropped.
    """
    lam = params.arrival_rate_lambda if lam is None else lam
    arrivals = sample_arrivals(rng, lam, horizon, t0)
    events = []
    busy_until = t0 - 1.0
    if initially_charging:
        busy_until = t0 + float(rng.uniform(0.0, 1.0)) * sample_duration(rng, params)
        if busy_until < t0 + horizon:
            events.append((busy_until, Kind.STOP))
    for a in arrivals:
        if a <= busy_until:
            continue
        start = a
        if params.burst_prob and rng.random() < params.burst_prob:
            cycle, start = _burst(rng, a)
            events.extend(cycle)
        stop = start + sample_duration(rng, params)
        events.append((start, Kind.START))
        events.append((stop, Kind.STOP))
        busy_until = stop
    return [(float(t), k) for t, k in events if t < t0 + horizon]


class StationLog:
    """Append-only, strictly time-ordered Start/Stop record of one station."""

    def __init__(self, station_id=None, times=(), kinds=()):
        self.station_id = station_id
        self.times = []
        self.kinds = []
        for t, k in zip(times, kinds):
            self.append(t, k)

    def __len__(self):
        return len(self.times)

    def __iter__(self):
        return iter(zip(self.times, self.kinds))

    def append(self, t, kind):
        kind = Kind(kind)
        if self.times and not t > self.times[-1]:
            raise ConfigError(f"log times must increase ({t} after {self.times[-1]})")
        if self.kinds and kind == self.kinds[-1]:
            raise ConfigError(f"{kind.name} cannot follow {kind.name}")
        self.times.append(float(t))
        self.kinds.append(kind)

    def state_at(self, t):
        i = np.searchsorted(self.times, t, side="right")
        if i == 0:
            return StationState.IDLE
        return StationState.CHARGING if self.kinds[i - 1] == Kind.START else StationState.IDLE

    def window(self, t_now):
        return window_events(self, t_now)


def slot_index(times, t_now):
    """Slot of each time in the window ending at t_now (may fall outside 0..239)."""
    rel = (np.asarray(times, dtype=float) - (t_now - WINDOW_S)) / TICK_S
    return np.floor(rel + 1e-9).astype(int)


def window_events(log, t_now):
    """240 slot codes (0 empty, 1 Stop, 2 Start) covering [t_now-120, t_now).

    Slot i spans [t_now-120+0.5i, t_now-120+0.5(i+1)); the last event in a slot wins.
    """
    if isinstance(log, StationLog):
        times, kinds = log.times, log.kinds
    else:
        times, kinds = zip(*log) if len(log) else ((), ())
    out = np.zeros(N_TICKS, dtype=np.int8)
    if not len(times):
        return out
    times = np.asarray(times, dtype=float)
    lo = np.searchsorted(times, t_now - WINDOW_S - 1e-9, side="left")
    hi = np.searchsorted(times, t_now - 1e-9, side="left")
    idx = slot_index(times[lo:hi], t_now)
    keep = (idx >= 0) & (idx < N_TICKS)
    # ascending order, so later events overwrite earlier ones in the same slot
    out[idx[keep]] = np.asarray(kinds[lo:hi], dtype=np.int8)[keep]
    return out


@dataclass
class Station:
    station_id: int
    bus_id: int
    charge_rate_kW: float = 11.0
    profile: Profile = Profile.HEAVY_USE
    state: StationState = StationState.IDLE
    log: StationLog = field(default_factory=StationLog)

    def __post_init__(self):
        if self.log.station_id is None:
            self.log.station_id = self.station_id

    @property
    def load_kW(self):
        return self.charge_rate_kW if self.state == StationState.CHARGING else 0.0

    def apply(self, t, kind):
        """Execute a state-change request; returns True if the state changed."""
        kind = Kind(kind)
        target = StationState.CHARGING if kind == Kind.START else StationState.IDLE
        if target == self.state:
            return False
        self.log.append(t, kind)
        self.state = target
        return True


class Fleet:
    """Stations plus a time-ordered queue of pending state-change requests."""

    def __init__(self, stations, bus_ids=None):
        self.stations = list(stations)
        self.by_id = {s.station_id: s for s in self.stations}
        if len(self.by_id) != len(self.stations):
            raise ConfigError("duplicate station ids")
        self.bus_ids = sorted({s.bus_id for s in self.stations}) if bus_ids is None else list(bus_ids)
        self._bus_pos = {b: i for i, b in enumerate(self.bus_ids)}
        self._queue = []
        self._seq = 0
        self.time = 0.0

    def __len__(self):
        return len(self.stations)

    def schedule(self, t, station_id, kind):
        heapq.heappush(self._queue, (float(t), self._seq, station_id, Kind(kind)))
        self._seq += 1

    def schedule_many(self, station_id, events):
        for t, k in events:
            self.schedule(t, station_id, k)

    def pending(self):
        return len(self._queue)

    def bus_load_MW(self):
        load = np.zeros(len(self.bus_ids))
        for s in self.stations:
            if s.state == StationState.CHARGING:
                load[self._bus_pos[s.bus_id]] += s.charge_rate_kW
        return load / 1000.0


def populate(rng, n, bus_ids, heavy_fraction=0.8, charge_rate_kW=11.0, first_id=0):
    """n stations spread round-robin over bus_ids, 80/20 HeavyUse/LightSwitchy."""
    profiles = np.where(rng.random(n) < heavy_fraction, 0, 1)
    return [Station(first_id + i, bus_ids[i % len(bus_ids)], charge_rate_kW,
                    Profile.HEAVY_USE if p == 0 else Profile.LIGHT_SWITCHY)
            for i, p in enumerate(profiles)]


def advance_fleet(fleet, t, dt):
    """Execute every queued request with time in [t, t + dt).

    Returns (events, load) where events is a list of (time, station_id, Kind)
    that actually changed a station's state and load is per-bus MW after the step.
    """
    if t < fleet.time - 1e-12:
        raise ConfigError("fleet time must not go backwards")
    fleet.time = t
    emitted = []
    q = fleet._queue
    while q and q[0][0] < t + dt:
        te, _, sid, kind = heapq.heappop(q)
        if fleet.by_id[sid].apply(te, kind):
            emitted.append((te, sid, kind))
    fleet.time = t + dt
    return emitted, fleet.bus_load_MW()


def export_logs_csv(stations, path):
    """Rows ``station_id,bus_id,time_s,event``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "bus_id", "time_s", "event"])
        for s in stations:
            for t, k in s.log:
                w.writerow([s.station_id, s.bus_id, f"{t:.3f}", k.name.capitalize()])
