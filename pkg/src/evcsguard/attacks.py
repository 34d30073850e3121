"""Oscillatory load attacks built from coordinated station switching.

Stations that switch together form a group; a scenario stores one schedule
per group plus the station -> group map, so a 7000-station attack costs no
more than a single group to evaluate.
"""

import csv
import json
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError
from .fleet import Kind

DUTY_CYCLES = (0.35, 0.50, 0.60)
PERIOD_RANGE = (1.0, 2.0)
MAGNITUDE_RANGE = (0.10, 0.30)
_EPS = 1e-9


class AttackClass(Enum):
    SQUARE_WAVE = "SquareWave"
    DISTRIBUTED_STEALTHY = "DistributedStealthy"
    ALTERNATING_PORTIONS = "AlternatingPortions"
    DYNAMIC_FEEDBACK = "DynamicFeedback"


def fleet_size_for_attack(magnitude_MW, charge_rate_kW):
    """Stations needed to switch magnitude_MW at charge_rate_kW each."""
    if not charge_rate_kW > 0:
        raise ConfigError("charge_rate_kW must be > 0")
    # tiny offset so 84 MW / 40 kW stays 2100 despite binary rounding
    return int(math.floor(magnitude_MW * 1000.0 / charge_rate_kW + 1e-9))


class _ScheduleView(Mapping):
    """station_id -> [(time, Kind)] resolved through the group table."""

    def __init__(self, scenario):
        self._sc = scenario
        self._group = {sid: g for g, ids in enumerate(scenario.group_members) for sid in ids}

    def __getitem__(self, sid):
        return self._sc.group_schedules[self._group[sid]]

    def __iter__(self):
        for ids in self._sc.group_members:
            yield from ids

    def __len__(self):
        return len(self._group)


@dataclass
class AttackScenario:
    attack_class: AttackClass
    target_bus: int
    start_time: float
    duration: float
    aggregate_period: float
    duty_cycle: float
    magnitude_MW: float
    group_count: int = 1
    charge_rate_kW: float = 11.0
    group_members: list = field(default_factory=list)     # list of station-id lists
    group_schedules: list = field(default_factory=list)   # list of [(t, Kind)]

    @property
    def end_time(self):
        return self.start_time + self.duration

    @property
    def per_station_schedules(self):
        return _ScheduleView(self)

    @property
    def station_ids(self):
        return [sid for ids in self.group_members for sid in ids]

    def magnitude_fraction(self, nominal_load_MW):
        return self.magnitude_MW / nominal_load_MW

    def involves(self, station_id):
        return any(station_id in ids for ids in self.group_members)

    def group_loads(self, times):
        """(n_groups, len(times)) MW with each group's state at every time."""
        times = np.asarray(times, dtype=float)
        out = np.zeros((len(self.group_members), times.size))
        for g, (ids, sched) in enumerate(zip(self.group_members, self.group_schedules)):
            if not sched or not ids:
                continue
            et = np.array([t for t, _ in sched])
            on = np.array([k == Kind.START for _, k in sched])
            i = np.searchsorted(et, times + _EPS, side="right")
            state = np.where(i > 0, on[np.maximum(i - 1, 0)], False)
            out[g] = state * len(ids) * self.charge_rate_kW / 1000.0
        return out

    def aggregate_load(self, times):
        """Total attack load (MW) implied by the schedules at the given times."""
        return self.group_loads(times).sum(axis=0)

    def events_between(self, station_id, t0, t1):
        return [(t, k) for t, k in self.per_station_schedules[station_id] if t0 <= t < t1]

    def to_dict(self):
        return {
            "attack_class": self.attack_class.value,
            "target_bus": self.target_bus,
            "start_time": self.start_time,
            "duration": self.duration,
            "aggregate_period": self.aggregate_period,
            "duty_cycle": self.duty_cycle,
            "magnitude_MW": self.magnitude_MW,
            "group_count": self.group_count,
            "charge_rate_kW": self.charge_rate_kW,
            "group_members": [list(map(int, ids)) for ids in self.group_members],
            "group_schedules": [[[t, int(k)] for t, k in s] for s in self.group_schedules],
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["attack_class"] = AttackClass(d["attack_class"])
        d["group_schedules"] = [[(float(t), Kind(k)) for t, k in s] for s in d["group_schedules"]]
        d["group_members"] = [list(ids) for ids in d["group_members"]]
        return cls(**d)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


def _pool_ids(station_pool):
    if isinstance(station_pool, (int, np.integer)):
        return list(range(int(station_pool)))
    return [getattr(s, "station_id", s) for s in station_pool]


def _cycles(start, duration, period, duty, phase=0, every=1):
    """Start/Stop edges of cycles k = phase, phase+every, ... inside [start, start+duration)."""
    if not (0.0 < duty < 1.0):
        raise ConfigError("duty cycle must be in (0, 1)")
    end = start + duration
    out = []
    k = phase
    while start + k * period < end - _EPS:
        on = start + k * period
        out.append((on, Kind.START))
        out.append((min(on + duty * period, end), Kind.STOP))
        k += every
    return out


def _check(period, duration, magnitude_MW):
    if not period > 0:
        raise ConfigError("period must be > 0")
    if not duration > 0:
        raise ConfigError("duration must be > 0")
    if magnitude_MW < 0:
        raise ConfigError("magnitude must be >= 0")


def square_wave(bus, period, duty, magnitude_MW, start, duration, station_pool, charge_rate_kW=11.0):
    """All selected stations switch together: on for duty*period of every period."""
    return distributed_stealthy(bus, 1.0 / period, 1, magnitude_MW, start, duration, station_pool,
                                duty=duty, charge_rate_kW=charge_rate_kW)


def distributed_stealthy(bus, aggregate_freq, groups, magnitude_MW, start, duration, station_pool,
                         duty=0.5, charge_rate_kW=11.0):
    """m groups of n stations; group g serves aggregate cycles g, g+m, g+2m, ...

    Each station therefore switches at f/m while the aggregate stays at f.
    """
    period = 1.0 / aggregate_freq
    _check(period, duration, magnitude_MW)
    m = int(groups)
    if m < 1:
        raise ConfigError("group count must be >= 1")
    n = fleet_size_for_attack(magnitude_MW, charge_rate_kW)
    pool = _pool_ids(station_pool)
    if n * m > len(pool):
        raise ConfigError(f"attack needs {n * m} stations, pool has {len(pool)}")
    members = [pool[g * n:(g + 1) * n] for g in range(m)]
    schedules = [_cycles(start, duration, period, duty, phase=g, every=m) for g in range(m)]
    cls = AttackClass.SQUARE_WAVE if m == 1 else AttackClass.DISTRIBUTED_STEALTHY
    return AttackScenario(cls, bus, float(start), float(duration), period, duty, float(magnitude_MW),
                          m, charge_rate_kW, members, schedules)


def alternating_portions(bus, portion_fraction, step_dt, magnitude_MW, start, duration, station_pool,
                         charge_rate_kW=11.0):
    """Rotate small groups on for one step each, giving a sine-like aggregate.

    G = round(1/portion) groups; group g holds M * (1 - cos(2 pi g / G)) / 2 of
    load and is on during step g of every G, so the aggregate period is G * step_dt.
    """
    if not (0.0 < portion_fraction <= 0.5):
        raise ConfigError("portion_fraction must be in (0, 0.5]")
    G = int(round(1.0 / portion_fraction))
    period = G * step_dt
    _check(period, duration, magnitude_MW)
    shape = (1.0 - np.cos(2 * np.pi * np.arange(G) / G)) / 2.0
    sizes = [fleet_size_for_attack(magnitude_MW * s, charge_rate_kW) for s in shape]
    pool = _pool_ids(station_pool)
    if sum(sizes) > len(pool):
        raise ConfigError(f"attack needs {sum(sizes)} stations, pool has {len(pool)}")
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    members = [pool[offsets[g]:offsets[g + 1]] for g in range(G)]
    duty = 1.0 / G
    schedules = [_cycles(start + g * step_dt, duration - g * step_dt, period, duty) if duration > g * step_dt
                 else [] for g in range(G)]
    return AttackScenario(AttackClass.ALTERNATING_PORTIONS, bus, float(start), float(duration), period, duty,
                          float(magnitude_MW), G, charge_rate_kW, members, schedules)


class DynamicFeedback:
    """Bang-bang attacker: load on while the bus reads above nominal, off below.

    The bus frequency is read every ``decision_every`` s and acted on after
    ``latency`` s; a +/- hysteresis band around nominal avoids chatter.
    Call it as the ``feedback`` hook of grid.simulate / grid.integrate.
    """

    def __init__(self, model, bus, magnitude_MW, start=0.0, duration=math.inf, hysteresis_hz=0.005,
                 decision_every=0.25, latency=0.5, charge_rate_kW=11.0, station_pool=None, dt=0.01):
        self.model = model
        self.bus = bus
        self.j = model.bus_index(bus)
        self.f0 = model.nominal_freq
        self.magnitude_MW = float(magnitude_MW)
        self.start = float(start)
        self.duration = float(duration)
        self.h = float(hysteresis_hz)
        self.every = max(1, int(round(decision_every / dt)))
        self.lag = int(round(latency / dt))
        self.charge_rate_kW = charge_rate_kW
        self.station_pool = station_pool
        self.on = False
        self._started = False
        self._pending = []       # (apply_at_step, state)
        self.toggles = []        # (time, Kind)

    def decide(self, freq_hz):
        if freq_hz > self.f0 + self.h:
            return True
        if freq_hz < self.f0 - self.h:
            return False
        return None

    def __call__(self, k, t, freq):
        freq = np.asarray(freq)
        active = self.start - _EPS <= t < self.start + self.duration - _EPS
        if active and not self._started:
            # the attacker opens with the load switched on
            self._started = True
            self._pending.append((k, True))
        elif active and (k % self.every == 0):
            want = self.decide(float(freq.reshape(-1, freq.shape[-1])[0, self.j]))
            if want is not None:
                self._pending.append((k + self.lag, want))
        while self._pending and self._pending[0][0] <= k:
            _, state = self._pending.pop(0)
            if state != self.on:
                self.on = state
                self.toggles.append((t, Kind.START if state else Kind.STOP))
        if not active and self.on and t >= self.start + self.duration - _EPS:
            self.on = False
            self.toggles.append((t, Kind.STOP))
        out = np.zeros(freq.shape)
        if self.on:
            out[..., self.j] = self.magnitude_MW
        return out

    def scenario(self):
        """Post-hoc AttackScenario with the logged toggles as one group schedule."""
        n = fleet_size_for_attack(self.magnitude_MW, self.charge_rate_kW)
        pool = list(range(n)) if self.station_pool is None else _pool_ids(self.station_pool)[:n]
        period = 0.0
        starts = [t for t, k in self.toggles if k == Kind.START]
        if len(starts) > 1:
            period = float(np.mean(np.diff(starts)))
        dur = self.duration if math.isfinite(self.duration) else (self.toggles[-1][0] - self.start if self.toggles else 0.0)
        # magnitude recorded as switched by whole stations
        mag = n * self.charge_rate_kW / 1000.0
        return AttackScenario(AttackClass.DYNAMIC_FEEDBACK, self.bus, self.start, dur, period, 0.5, mag,
                              1, self.charge_rate_kW, [pool], [list(self.toggles)])


def dynamic_feedback(bus, magnitude_MW, grid_feed, **kw):
    """Build the closed-loop attacker; ``grid_feed`` is the GridModel it reads."""
    return DynamicFeedback(grid_feed, bus, magnitude_MW, **kw)


def attack_profile(model, scenario, horizon, dt=0.01):
    """(n_steps, n_bus) MW profile with the scenario's aggregate on its target bus."""
    n = int(round(horizon / dt))
    prof = np.zeros((n, len(model.buses)))
    prof[:, model.bus_index(scenario.target_bus)] = scenario.aggregate_load(np.arange(n) * dt)
    return prof


def export_schedules_csv(scenario, path):
    """Same row layout as station logs: ``station_id,bus_id,time_s,event``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "bus_id", "time_s", "event"])
        for ids, sched in zip(scenario.group_members, scenario.group_schedules):
            for sid in ids:
                for t, k in sched:
                    w.writerow([sid, scenario.target_bus, f"{t:.3f}", Kind(k).name.capitalize()])
