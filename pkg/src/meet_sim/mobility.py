"""Synthetic road mobility, planar Poisson point processes and trace import."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import shapely
from shapely.geometry import Polygon

from .engine import RngStream


class Role(str, enum.Enum):
    INV = "INV"
    OPV = "OPV"
    UE = "UE"


@dataclass(frozen=True)
class TrafficFlowParams:
    """Macroscopic flow parameters; densities per meter, speeds in m/s."""

    rho_max: float = 0.2
    v_max: float = 35.0
    v: float = 15.0

    def __post_init__(self):
        if not self.rho_max > 0:
            raise ValueError(f"rho_max must be > 0, got {self.rho_max}")
        if not 0 <= self.v <= self.v_max:
            raise ValueError(f"need 0 <= v <= v_max, got v={self.v}, v_max={self.v_max}")


@dataclass(frozen=True)
class RoadSegment:
    length: float = 400.0
    lanes: int = 2
    v2v_range: float = 150.0
    bs_position: Optional[float] = None

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError(f"segment length must be > 0, got {self.length}")
        if not self.v2v_range > 0:
            raise ValueError(f"v2v_range must be > 0, got {self.v2v_range}")
        if self.bs_position is None:
            object.__setattr__(self, "bs_position", self.length / 2)


@dataclass(eq=False)
class Vehicle:
    id: int
    role: Role
    arrival_time: float
    velocity: float
    segment_length: float
    entry_position: float = 0.0
    service_rate: Optional[float] = None
    participates_fl: bool = False
    # Where the vehicle's sensed data comes from; defaults to entry_position.
    data_position: Optional[float] = None
    departure_time: float = field(init=False)

    def __post_init__(self):
        if self.velocity > 0:
            self.departure_time = self.arrival_time + (self.segment_length - self.entry_position) / self.velocity
        else:
            self.departure_time = math.inf
        if self.data_position is None:
            self.data_position = self.entry_position

    def present(self, t: float) -> bool:
        return self.arrival_time <= t < self.departure_time

    def position(self, t: float) -> float:
        x = self.entry_position + self.velocity * (t - self.arrival_time)
        return min(max(x, 0.0), self.segment_length)


def arrival_rate(p: TrafficFlowParams) -> float:
    """Vehicle arrival rate (veh/s) from the parabolic speed-flow relation."""
    return p.rho_max * p.v * (1.0 - p.v / p.v_max)


def expected_dwell(seg: RoadSegment, v: float) -> float:
    if not v > 0:
        raise ValueError(f"velocity must be > 0, got {v}")
    return seg.length / v


def velocity_bounds(p: TrafficFlowParams, spread: float) -> tuple[float, float]:
    return (1.0 - spread) * p.v, min((1.0 + spread) * p.v, p.v_max)


def _normalise_mix(mix: Mapping) -> tuple[list[Role], np.ndarray]:
    roles = [Role(k) if k in Role._value2member_map_ else k for k in mix]
    probs = np.array([float(mix[k]) for k in mix])
    if np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
        raise ValueError(f"role proportions must be non-negative and sum to 1, got {dict(mix)}")
    return roles, probs


_SPAWN_BLOCK = 256


def spawn_arrivals(
    p: TrafficFlowParams,
    mix: Mapping,
    horizon: float,
    stream: RngStream,
    segment: RoadSegment = RoadSegment(),
    velocity_spread: float = 0.2,
    service_rate: Optional[float] = None,
    start_id: int = 0,
    prefill: bool = False,
) -> list[Vehicle]:
    """Poisson vehicle arrivals at the upstream end of ``segment`` over ``[0, horizon)``.

    Roles are drawn i.i.d. from ``mix`` (keys are roles, or any label such as
    ``"other"``).  Per-vehicle speed is uniform on
    ``[(1-s)v, min((1+s)v, v_max)]``; ``velocity_spread=0`` gives constant speed.

    With ``prefill`` the road also starts in its stationary state: vehicles
    already on the segment at t=0, placed uniformly, with speeds drawn from the
    speed law reweighted by dwell time (slow vehicles stay longer).
    """
    roles, probs = _normalise_mix(mix)
    lam = arrival_rate(p)
    gen = stream.generator
    if horizon <= 0 or lam <= 0:
        return []
    lo, hi = velocity_bounds(p, velocity_spread)
    out = []
    if prefill:
        # density of speed u on the road is proportional to f(u)/u; for uniform f
        # the inverse CDF is lo * (hi/lo)**U
        mean_dwell = segment.length * (math.log(hi / lo) / (hi - lo) if hi > lo else 1.0 / p.v)
        m = gen.poisson(lam * mean_dwell)
        u = gen.random(m)
        speeds = lo * (hi / lo) ** u if hi > lo else np.full(m, p.v)
        xs = np.sort(gen.uniform(0.0, segment.length, m))[::-1]
        pre_roles = gen.choice(len(roles), size=m, p=probs)
        for i in range(m):
            role = roles[pre_roles[i]]
            out.append(
                Vehicle(
                    id=start_id + i,
                    role=role,
                    arrival_time=0.0,
                    velocity=float(speeds[i]),
                    segment_length=segment.length,
                    entry_position=float(xs[i]),
                    service_rate=service_rate if role == Role.OPV else None,
                )
            )
        start_id += m
    # Fixed-size blocks of (gap, role, speed) so that vehicle i is the same
    # whatever the horizon: a longer run only appends vehicles.
    t = 0.0
    i = 0
    while t < horizon:
        gaps = gen.exponential(1.0 / lam, _SPAWN_BLOCK)
        role_idx = gen.choice(len(roles), size=_SPAWN_BLOCK, p=probs)
        velocities = gen.uniform(lo, hi, _SPAWN_BLOCK) if hi > lo else np.full(_SPAWN_BLOCK, p.v)
        for k in range(_SPAWN_BLOCK):
            t += gaps[k]
            if t >= horizon:
                break
            role = roles[role_idx[k]]
            out.append(
                Vehicle(
                    id=start_id + i,
                    role=role,
                    arrival_time=float(t),
                    velocity=float(velocities[k]),
                    segment_length=segment.length,
                    service_rate=service_rate if role == Role.OPV else None,
                )
            )
            i += 1
    return out


def neighbors_within(v, t: float, range_m: float, vehicles: Iterable, role: Optional[Role] = Role.OPV) -> list:
    """Vehicles of ``role`` present at ``t`` within ``range_m`` of ``v`` (inclusive), excluding ``v``.

    Ordered by (arrival_time, id).
    """
    x0 = v.position(t)
    found = [
        u
        for u in vehicles
        if u is not v
        and (role is None or u.role == role)
        and u.arrival_time <= t < u.departure_time
        and abs(u.position(t) - x0) <= range_m
    ]
    found.sort(key=lambda u: (u.arrival_time, u.id))
    return found


class RoadPopulation:
    """Vehicles currently on the road with a vectorised neighbour query.

    Vehicles must be added in arrival order; query results keep that order.
    """

    def __init__(self):
        self._members: dict[int, Vehicle] = {}
        self._lanes: dict = {}

    def _lane(self, role):
        lane = self._lanes.get(role)
        if lane is None:
            lane = self._lanes[role] = ([], np.empty(0), np.empty(0))
        return lane

    def add(self, v: Vehicle) -> None:
        self._members[v.id] = v
        # position(t) = x0 + velocity * t while on the segment
        x0 = v.entry_position - v.velocity * v.arrival_time
        for key in (None, v.role):
            members, xs, vs = self._lane(key)
            members.append(v)
            self._lanes[key] = (members, np.append(xs, x0), np.append(vs, v.velocity))

    def remove(self, v: Vehicle) -> None:
        if self._members.pop(v.id, None) is None:
            return
        for key in (None, v.role):
            members, xs, vs = self._lanes[key]
            i = members.index(v)
            del members[i]
            self._lanes[key] = (members, np.delete(xs, i), np.delete(vs, i))

    def __len__(self) -> int:
        return len(self._members)

    def __contains__(self, v) -> bool:
        return getattr(v, "id", v) in self._members

    def __iter__(self):
        return iter(self._members.values())

    def count(self, role: Role) -> int:
        return len(self._lane(role)[0])

    def within(self, x: float, t: float, range_m: float, role: Optional[Role] = None, exclude=None) -> list[Vehicle]:
        members, x0, vel = self._lane(role)
        if not members:
            return []
        idx = np.flatnonzero(np.abs(x0 + vel * t - x) <= range_m)
        return [members[i] for i in idx if members[i] is not exclude]


# -- planar point processes -------------------------------------------------


@dataclass
class PlanarPointSet:
    points: np.ndarray  # (n, 2) meters
    cells: list  # shapely polygons
    cell_index: np.ndarray  # (n,) index of the containing cell

    def __len__(self) -> int:
        return self.points.shape[0]

    def counts(self) -> np.ndarray:
        return np.bincount(self.cell_index, minlength=len(self.cells))


def _as_polygon(region) -> Polygon:
    return region if isinstance(region, Polygon) else Polygon(region)


def sample_ppp(
    intensity: Union[float, Sequence[float]],
    region,
    stream: RngStream,
) -> PlanarPointSet:
    """Poisson point process with piecewise-constant intensity (points per m^2).

    ``region`` is one polygon (vertex list or shapely ``Polygon``) or a list of
    cells; ``intensity`` is a scalar or one value per cell.
    """
    if isinstance(region, Polygon) or (len(region) and np.ndim(region[0]) == 1):
        cells = [_as_polygon(region)]
    else:
        cells = [_as_polygon(c) for c in region]
    lam = np.broadcast_to(np.asarray(intensity, dtype=float), (len(cells),))
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValueError("intensity must be finite and non-negative")
    gen = stream.generator
    pts, idx = [], []
    for i, (cell, rate) in enumerate(zip(cells, lam)):
        n = gen.poisson(rate * cell.area)
        if n == 0:
            continue
        minx, miny, maxx, maxy = cell.bounds
        got = np.empty((0, 2))
        while got.shape[0] < n:
            cand = np.column_stack(
                (gen.uniform(minx, maxx, 2 * n), gen.uniform(miny, maxy, 2 * n))
            )
            inside = shapely.contains_xy(cell, cand[:, 0], cand[:, 1])
            got = np.vstack((got, cand[inside]))
        pts.append(got[:n])
        idx.append(np.full(n, i))
    points = np.vstack(pts) if pts else np.empty((0, 2))
    cell_index = np.concatenate(idx) if idx else np.empty(0, dtype=int)
    return PlanarPointSet(points, cells, cell_index.astype(int))


# -- trace import -----------------------------------------------------------

TRACE_HEADER = ["t", "id", "x", "y", "v"]


class TraceFormatError(ValueError):
    pass


class TracedVehicle:
    """Vehicle whose kinematics are tabulated samples, linearly interpolated."""

    def __init__(self, id, t, x, y, v, role: Role = Role.OPV):
        self.id = id
        self.role = role
        self.t = np.asarray(t, dtype=float)
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.v = np.asarray(v, dtype=float)
        self.arrival_time = float(self.t[0])
        # a single sample means the vehicle is parked there indefinitely
        self.departure_time = float(self.t[-1]) if self.t.size > 1 else math.inf

    def xy(self, t: float) -> tuple[float, float]:
        return float(np.interp(t, self.t, self.x)), float(np.interp(t, self.t, self.y))

    def position(self, t: float) -> float:
        return float(np.interp(t, self.t, self.x))

    def speed(self, t: float) -> float:
        return float(np.interp(t, self.t, self.v))


def import_trace(path, roles: Optional[Mapping] = None) -> list[TracedVehicle]:
    """Read a ``t,id,x,y,v`` CSV trace (SI units, rows sorted by t within id)."""
    roles = roles or {}
    rows: dict[str, list[tuple[float, float, float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRACE_HEADER:
            raise TraceFormatError(f"{path}: line 1: expected header {','.join(TRACE_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise TraceFormatError(f"{path}: line {lineno}: expected 5 fields, got {len(row)}")
            try:
                t, x, y, v = float(row[0]), float(row[2]), float(row[3]), float(row[4])
            except ValueError as exc:
                raise TraceFormatError(f"{path}: line {lineno}: {exc}") from None
            vid = row[1].strip()
            samples = rows.setdefault(vid, [])
            if samples and t <= samples[-1][0]:
                raise TraceFormatError(
                    f"{path}: line {lineno}: timestamp {t} for vehicle {vid!r} is not after {samples[-1][0]}"
                )
            samples.append((t, x, y, v))
    out = []
    for vid, samples in rows.items():
        arr = np.array(samples)
        out.append(TracedVehicle(vid, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], Role(roles.get(vid, Role.OPV))))
    out.sort(key=lambda u: (u.arrival_time, u.id))
    return out
