"""Single-lane Intelligent-Driver-Model microsimulation with three demand regimes.

Vehicles enter at x=0 from a Poisson arrival process, follow the IDM
car-following law, and exit at the end of the road. Optional slow zones cap
the speed over a short stretch of road for a time interval, which is how the
presets trigger stop-and-go waves and standing queues.
"""

from __future__ import annotations

import csv
import enum
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

# spatial extent of a slow zone downstream of its x_pos (m)
SLOW_ZONE_LENGTH = 50.0


class CollisionError(RuntimeError):
    """A follower overlapped its leader; indicates a simulation bug."""


class ParseError(ValueError):
    """Trajectory CSV violated the schema; the message names the line."""


class Demand(enum.Enum):
    FREE_FLOW = "free-flow"
    SLOW_MOVING = "slow-moving"
    CONGESTED = "congested"


class SlowZone(NamedTuple):
    t_start: float
    t_end: float
    x_pos: float
    speed_cap: float


@dataclass(frozen=True)
class IdmParams:
    """IDM car-following parameters (SI units).

    The default desired speed sits below the default grid v_max (30 m/s) so
    that normalized free-flow speeds stay inside the responsive range of the
    model's sigmoid output rather than at its asymptote.
    """

    v0: float = 25.0        # desired speed (m/s)
    T_hw: float = 1.5       # desired time headway (s)
    s0: float = 2.0         # minimum gap (m)
    a_max: float = 1.5      # maximum acceleration (m/s^2)
    b_comf: float = 2.0     # comfortable deceleration (m/s^2)
    delta: float = 4.0      # acceleration exponent
    length: float = 5.0     # vehicle length (m)

    def __post_init__(self):
        for name in ("v0", "T_hw", "s0", "a_max", "b_comf", "length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")


@dataclass(frozen=True)
class ScenarioSpec:
    demand: Demand
    road_len: float = 800.0
    duration: float = 600.0
    inflow: float = 600.0          # veh/h
    sim_dt: float = 0.1
    seed: int = 0
    bottlenecks: tuple[SlowZone, ...] = ()

    def __post_init__(self):
        if self.duration <= 0 or self.road_len <= 0:
            raise ValueError("duration and road_len must be positive")
        if self.inflow < 0:
            raise ValueError("inflow must be >= 0")
        if self.sim_dt <= 0:
            raise ValueError("sim_dt must be positive")
        for z in self.bottlenecks:
            if not (0 <= z.t_start <= z.t_end <= self.duration):
                raise ValueError(f"slow zone {z} outside [0, {self.duration}]")
            if not 0 <= z.x_pos <= self.road_len:
                raise ValueError(f"slow zone {z} outside [0, {self.road_len}]")
            if z.speed_cap < 0:
                raise ValueError("speed_cap must be >= 0")


@dataclass
class TrajectorySet:
    """Per-vehicle time-stamped (t, x, v) samples, keyed by integer vehicle id."""

    vehicles: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicles)

    def ids(self) -> list[int]:
        return sorted(self.vehicles)

    def total_samples(self) -> int:
        return sum(len(a) for a in self.vehicles.values())


def idm_accel(gap: float, v: float, dv: float, p: IdmParams) -> float:
    """IDM acceleration for a follower.

    gap is the bumper-to-bumper distance to the leader (m), v the follower
    speed (m/s) and dv = v_follower - v_leader the approach rate (m/s).
    """
    if gap <= 0:
        raise CollisionError(f"non-positive gap {gap}")
    if v < 0:
        raise ValueError("speed must be >= 0")
    s_star = p.s0 + v * p.T_hw + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf))
    s_star = max(s_star, p.s0)
    return p.a_max * (1.0 - (v / p.v0) ** p.delta - (s_star / gap) ** 2)


def equilibrium_gap(v: float, p: IdmParams) -> float:
    """Closed-form steady-state gap at speed v (dv = 0, accel = 0)."""
    if not 0 <= v < p.v0:
        raise ValueError("equilibrium exists only for 0 <= v < v0")
    return (p.s0 + v * p.T_hw) / math.sqrt(1.0 - (v / p.v0) ** p.delta)


def demand_presets(demand: Demand, road_len: float, duration: float
                   ) -> tuple[float, tuple[SlowZone, ...]]:
    """Inflow (veh/h) and slow-zone schedule for a demand regime."""
    if demand is Demand.FREE_FLOW:
        return 600.0, ()
    if demand is Demand.SLOW_MOVING:
        # periodic moving slowdowns: every 110 s a capped region sweeps
        # upstream at the backward-wave speed, approximated by short zone
        # segments stepping upstream. The deterministic IDM is string-stable,
        # so fixed-position pulses shed waves that die within ~100 m; a
        # moving cap is the standard device for a disturbance that persists.
        wave_speed = 4.5          # upstream drift (m/s)
        cap = 10.0                # speed inside the slowdown (m/s)
        seg_dt = 5.0              # segment duration; 50 m zones overlap the drift
        zones = []
        t0 = 40.0
        while t0 + seg_dt <= duration:
            x = 0.85 * road_len
            t = t0
            while x > 0.1 * road_len and t + seg_dt <= duration:
                zones.append(SlowZone(t, t + seg_dt, x, cap))
                x -= wave_speed * seg_dt
                t += seg_dt
            t0 += 110.0
        return 1800.0, tuple(zones)
    if demand is Demand.CONGESTED:
        # near-standstill cap at the downstream end for the whole horizon
        x = max(0.0, road_len - SLOW_ZONE_LENGTH - 10.0)
        return 1800.0, (SlowZone(min(60.0, duration), duration, x, 1.0),)
    raise ValueError(f"unknown demand {demand!r}")


def scenario_for(demand: Demand, road_len: float = 800.0, duration: float = 600.0,
                 seed: int = 0, sim_dt: float = 0.1,
                 inflow: float | None = None) -> ScenarioSpec:
    """ScenarioSpec with the preset inflow/bottlenecks for a demand regime."""
    preset_inflow, zones = demand_presets(demand, road_len, duration)
    return ScenarioSpec(demand=demand, road_len=road_len, duration=duration,
                        inflow=preset_inflow if inflow is None else inflow,
                        sim_dt=sim_dt, seed=seed, bottlenecks=zones)


def simulate(spec: ScenarioSpec, p: IdmParams = IdmParams()) -> TrajectorySet:
    """Run the single-lane simulation and record every vehicle state each step.

    Semi-implicit Euler at spec.sim_dt with speeds floored at zero. Arrivals
    are Poisson at spec.inflow; an arrival is deferred while the back of the
    queue is within s0 + length of the entry point. Deterministic per seed.
    """
    rng = np.random.default_rng(spec.seed)
    dt = spec.sim_dt
    n_steps = int(round(spec.duration / dt))

    # state arrays ordered upstream-ward: index 0 is the front-most vehicle
    ids: list[int] = []
    x = np.empty(0)
    v = np.empty(0)
    next_id = 0
    rate = spec.inflow / 3600.0
    next_arrival = rng.exponential(1.0 / rate) if rate > 0 else math.inf
    pending = 0

    rec_id: list[np.ndarray] = []
    rec_t: list[np.ndarray] = []
    rec_x: list[np.ndarray] = []
    rec_v: list[np.ndarray] = []

    zones = spec.bottlenecks
    z_t0 = np.array([z.t_start for z in zones])
    z_t1 = np.array([z.t_end for z in zones])

    def record(t_now: float):
        if ids:
            rec_id.append(np.asarray(ids, dtype=np.int64))
            rec_t.append(np.full(len(ids), t_now))
            rec_x.append(x.copy())
            rec_v.append(v.copy())

    for step in range(n_steps):
        t = step * dt

        # admit Poisson arrivals (at most one per step; excess stays pending)
        while next_arrival <= t:
            pending += 1
            next_arrival += rng.exponential(1.0 / rate)
        if pending > 0:
            clear = len(ids) == 0 or x[-1] >= p.s0 + p.length
            if clear:
                entry_v = p.v0 if len(ids) == 0 else min(p.v0, v[-1])
                ids.append(next_id)
                next_id += 1
                x = np.append(x, 0.0)
                v = np.append(v, entry_v)
                pending -= 1

        if ids:
            # IDM accelerations; the front-most vehicle sees a free road
            gap = np.empty(len(ids))
            dv = np.empty(len(ids))
            gap[0] = math.inf
            dv[0] = 0.0
            if len(ids) > 1:
                gap[1:] = x[:-1] - p.length - x[1:]
                dv[1:] = v[1:] - v[:-1]
            if (gap <= 0).any():
                k = int(np.argmax(gap <= 0))
                raise CollisionError(
                    f"t={t:.1f}s: vehicle {ids[k]} gap {gap[k]:.3f} m")
            s_star = p.s0 + v * p.T_hw + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf))
            np.maximum(s_star, p.s0, out=s_star)
            accel = p.a_max * (1.0 - (v / p.v0) ** p.delta - (s_star / gap) ** 2)

            v = np.maximum(v + accel * dt, 0.0)
            # slow zones act as hard speed limits over their stretch of road
            if zones:
                for zi in np.flatnonzero((z_t0 <= t) & (t < z_t1)):
                    z = zones[zi]
                    inside = (x >= z.x_pos) & (x < z.x_pos + SLOW_ZONE_LENGTH)
                    v = np.where(inside, np.minimum(v, z.speed_cap), v)
            x = x + v * dt

            # drop vehicles that crossed the downstream boundary
            done = x >= spec.road_len
            if done.any():
                keep = ~done
                ids = [i for i, k in zip(ids, keep) if k]
                x = x[keep]
                v = v[keep]

        record(t + dt)

    return _collate(rec_id, rec_t, rec_x, rec_v)


def _collate(rec_id, rec_t, rec_x, rec_v) -> TrajectorySet:
    if not rec_id:
        return TrajectorySet({})
    all_id = np.concatenate(rec_id)
    all_t = np.concatenate(rec_t)
    all_x = np.concatenate(rec_x)
    all_v = np.concatenate(rec_v)
    order = np.argsort(all_id, kind="stable")  # stable keeps time order per vehicle
    all_id, all_t, all_x, all_v = all_id[order], all_t[order], all_x[order], all_v[order]
    vehicles = {}
    bounds = np.flatnonzero(np.diff(all_id)) + 1
    for chunk_id, chunk in zip(
            all_id[np.concatenate(([0], bounds))],
            np.split(np.column_stack([all_t, all_x, all_v]), bounds)):
        vehicles[int(chunk_id)] = chunk
    return TrajectorySet(vehicles)


# ---------------------------------------------------------------------------
# Trajectory CSV (schema: vehicle_id,t,x,v) -- also the import path for
# external single-lane trajectory extracts.
# ---------------------------------------------------------------------------

def write_trajectory_csv(trajs: TrajectorySet, path):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["vehicle_id", "t", "x", "v"])
            for vid in trajs.ids():
                for t, xx, vv in trajs.vehicles[vid]:
                    writer.writerow([vid, f"{t:.6f}", f"{xx:.6f}", f"{vv:.6f}"])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_trajectory_csv(path) -> TrajectorySet:
    """Parse a trajectory CSV, enforcing per-vehicle ordering invariants."""
    rows: dict[int, list[tuple[float, float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["vehicle_id", "t", "x", "v"]:
            raise ParseError(f"{path}:1: expected header vehicle_id,t,x,v, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            try:
                vid = int(row[0])
                t, xx, vv = (float(c) for c in row[1:])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if vv < 0:
                raise ParseError(f"{path}:{lineno}: negative speed {vv}")
            samples = rows.setdefault(vid, [])
            if samples:
                if t <= samples[-1][0]:
                    raise ParseError(
                        f"{path}:{lineno}: time {t} not increasing for vehicle {vid}")
                if xx < samples[-1][1]:
                    raise ParseError(
                        f"{path}:{lineno}: position {xx} decreasing for vehicle {vid}")
            samples.append((t, xx, vv))
    return TrajectorySet({vid: np.asarray(s, dtype=np.float64) for vid, s in rows.items()})
