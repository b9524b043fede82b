"""Joint ES/INV density planning on a hexagonal BS lattice under a blocking target.

The loss model is slotted: in each slot every cell receives a Poisson number
of tasks and can serve ``30 n_ES + 10 n_INV + 1 n_OPV`` of them; the excess is
blocked.  All Poisson counts are drawn by inversion from one shared table of
uniforms, so scenarios evaluated against the same :class:`SlotDraws` use common
random numbers and the blocking estimate is exactly monotone in every density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator

from .engine import RngStream
from .mobility import sample_ppp


class InfeasibleScenario(RuntimeError):
    """The blocking target cannot be met inside the search range (CLI exit code 3)."""


# -- lattice ----------------------------------------------------------------


def hex_centers(rows: int, cols: int, radius: float) -> np.ndarray:
    """Centres of a pointy-top hexagonal lattice, row-major, ``(rows*cols, 2)``."""
    w = math.sqrt(3.0) * radius
    out = np.empty((rows * cols, 2))
    for i in range(rows):
        for j in range(cols):
            out[i * cols + j] = (w * (j + 0.5 * (i % 2)), 1.5 * radius * i)
    return out


def hex_cell(center, radius: float) -> np.ndarray:
    angles = np.deg2rad(30.0 + 60.0 * np.arange(6))
    return np.column_stack((center[0] + radius * np.cos(angles), center[1] + radius * np.sin(angles)))


def torus_distance(a: np.ndarray, b: np.ndarray, rows: int, cols: int, radius: float) -> np.ndarray:
    """Euclidean distance with wrap-around over the lattice period."""
    period = np.array([math.sqrt(3.0) * radius * cols, 1.5 * radius * rows])
    d = np.abs(np.asarray(a) - np.asarray(b))
    d = np.minimum(d, period - d)
    return np.hypot(d[..., 0], d[..., 1])


def hotspot_gamma(rows: int, cols: int, radius: float = 200.0, floor: float = 0.3) -> np.ndarray:
    """Default traffic map: two Gaussian hot spots over a flat floor, mean 1."""
    centers = hex_centers(rows, cols, radius)
    hot = [centers[(rows // 4) * cols + cols // 4], centers[((3 * rows) // 4) * cols + (3 * cols) // 4]]
    g = np.full(len(centers), floor)
    for peak, c in zip((2.5, 1.5), hot):
        d = torus_distance(centers, c, rows, cols, radius)
        g += peak * np.exp(-0.5 * (d / (1.6 * radius)) ** 2)
    return g / g.mean()


# -- scenario ---------------------------------------------------------------


@dataclass(frozen=True)
class DeploymentScenario:
    rows: int = 6
    cols: int = 6
    cell_radius: float = 200.0
    lambda_es: float = 1.0
    lambda_inv: float = 0.0
    lambda_opv: float = 0.0
    gamma: Optional[tuple] = None
    capacities: tuple = (30.0, 10.0, 1.0)  # ES, INV, OPV tasks per slot
    base_load: float = 30.0
    alpha: float = 0.5
    target_pb: float = 0.001
    inv_placement: str = "traffic"

    def __post_init__(self):
        if min(self.lambda_es, self.lambda_inv, self.lambda_opv) < 0:
            raise ValueError("densities must be >= 0")
        if not 0 < self.target_pb < 1:
            raise ValueError("target_pb must be in (0, 1)")
        g = self.gamma_map
        if g.shape != (self.n_cells,) or np.any(g < 0):
            raise ValueError(f"gamma must have {self.n_cells} non-negative entries")
        if self.inv_placement not in ("traffic", "uniform"):
            raise ValueError(f"unknown inv_placement {self.inv_placement!r}")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def gamma_map(self) -> np.ndarray:
        if self.gamma is None:
            return hotspot_gamma(self.rows, self.cols, self.cell_radius)
        return np.asarray(self.gamma, dtype=float)

    def with_(self, **changes) -> "DeploymentScenario":
        return replace(self, **changes)

    def inv_weights(self) -> np.ndarray:
        g = self.gamma_map
        if self.inv_placement == "uniform" or g.sum() == 0:
            return np.full(self.n_cells, 1.0 / self.n_cells)
        return g / g.sum()

    def cells(self) -> list:
        return [hex_cell(c, self.cell_radius) for c in hex_centers(self.rows, self.cols, self.cell_radius)]

    def sample_tasks(self, stream: RngStream, tasks_per_cell: Optional[float] = None):
        """One snapshot of task locations as a PPP with per-cell intensity."""
        area = 1.5 * math.sqrt(3.0) * self.cell_radius**2
        per_cell = self.base_load if tasks_per_cell is None else tasks_per_cell
        return sample_ppp(self.gamma_map * per_cell / area, self.cells(), stream)


@dataclass
class BlockingEstimate:
    p_hat: float
    ci_halfwidth: float
    slots_simulated: int
    offered: int = 0
    blocked: int = 0

    @property
    def upper(self) -> float:
        return self.p_hat + self.ci_halfwidth


class SlotDraws:
    """Shared uniforms for slot-level Poisson counts (common random numbers).

    ``es_order`` ranks cells for ES placement: a density of ``k + f`` puts
    ``k`` ESs in every cell and one more in the first ``round(f n)`` cells of
    that order, so raising the density only ever adds ESs.
    """

    def __init__(self, slots: int, n_cells: int, stream: RngStream):
        if slots < 1:
            raise ValueError("slots must be >= 1")
        gen = stream.generator
        self.slots = slots
        self.n_cells = n_cells
        self.u_tasks = gen.random((slots, n_cells))
        self.u_inv = gen.random((slots, n_cells))
        self.u_opv = gen.random((slots, n_cells))
        self.es_order = gen.permutation(n_cells)


def poisson_quantile(u: np.ndarray, mean: float) -> np.ndarray:
    """Inverse Poisson CDF: smallest ``k`` with ``P(X <= k) >= u``; monotone in ``mean``."""
    if mean <= 0:
        return np.zeros(u.shape, dtype=np.int64)
    kmax = int(stats.poisson.ppf(float(u.max()), mean)) + 1
    cdf = stats.poisson.cdf(np.arange(kmax + 1), mean)
    return np.searchsorted(cdf, u, side="left").astype(np.int64)


def es_allocation(lambda_es: float, order: np.ndarray) -> np.ndarray:
    n = len(order)
    total = int(round(lambda_es * n))
    base, extra = divmod(total, n)
    counts = np.full(n, base, dtype=np.int64)
    counts[order[:extra]] += 1
    return counts


def _cell_counts(u: np.ndarray, means: np.ndarray) -> np.ndarray:
    out = np.empty(u.shape, dtype=np.int64)
    for l, m in enumerate(means):
        out[:, l] = poisson_quantile(u[:, l], float(m))
    return out


def blocking_probability(s: DeploymentScenario, slots: int = 2000, stream: Optional[RngStream] = None,
                         draws: Optional[SlotDraws] = None) -> BlockingEstimate:
    """Monte-Carlo blocking probability ``sum(blocked) / sum(offered)``.

    The CI is a normal interval for the ratio estimator, using slot-level
    totals (delta method).  No offered tasks gives ``p_hat = 0``.
    """
    if draws is None:
        draws = SlotDraws(slots, s.n_cells, stream if stream is not None else RngStream(0, 0))
    n = draws.slots
    cap_es, cap_inv, cap_opv = s.capacities
    offered = _cell_counts(draws.u_tasks, s.gamma_map * s.base_load)
    inv = _cell_counts(draws.u_inv, s.lambda_inv * s.n_cells * s.inv_weights())
    opv = _cell_counts(draws.u_opv, np.full(s.n_cells, s.lambda_opv))
    es = es_allocation(s.lambda_es, draws.es_order)
    capacity = cap_es * es[None, :] + cap_inv * inv + cap_opv * opv
    blocked = np.maximum(offered - capacity, 0)
    a = offered.sum(axis=1).astype(float)
    b = blocked.sum(axis=1).astype(float)
    total_a = a.sum()
    if total_a == 0:
        return BlockingEstimate(0.0, 0.0, n, 0, 0)
    p = b.sum() / total_a
    if n > 1:
        resid = b - p * a
        se = math.sqrt(np.sum(resid**2) / (n * (n - 1))) / a.mean()
    else:
        se = 0.0
    return BlockingEstimate(float(p), 1.959963984540054 * se, n, int(total_a), int(b.sum()))


def min_inv_density(s: DeploymentScenario, search_max: float = 12.0, step: float = 0.05,
                    draws: Optional[SlotDraws] = None, slots: int = 2000,
                    stream: Optional[RngStream] = None) -> tuple[float, BlockingEstimate]:
    """Smallest grid value of ``lambda_inv`` whose blocking CI upper bound meets the target.

    Bisection over ``0, step, 2 step, ..., search_max``; assumes monotonicity,
    which holds exactly under common random numbers.
    """
    if draws is None:
        draws = SlotDraws(slots, s.n_cells, stream if stream is not None else RngStream(0, 0))
    grid = np.round(np.arange(0.0, search_max + step / 2, step), 12)

    def check(i):
        est = blocking_probability(s.with_(lambda_inv=float(grid[i])), draws=draws)
        return est.upper <= s.target_pb, est

    ok, est = check(len(grid) - 1)
    if not ok:
        raise InfeasibleScenario(
            f"blocking {est.p_hat:.4g} (+{est.ci_halfwidth:.2g}) exceeds target {s.target_pb} "
            f"at lambda_inv={grid[-1]} (lambda_es={s.lambda_es}, lambda_opv={s.lambda_opv})"
        )
    lo, hi, best = -1, len(grid) - 1, est
    while hi - lo > 1:
        mid = (lo + hi) // 2
        ok, e = check(mid)
        if ok:
            hi, best = mid, e
        else:
            lo = mid
    return float(grid[hi]), best


def optimize_cost(frontier: Sequence[tuple], alpha: float) -> tuple[float, float, float]:
    """Frontier point minimising ``lambda_es + alpha * lambda_inv``; ties go to fewer INVs."""
    if not frontier:
        raise ValueError("empty frontier")
    best = None
    for es, inv in frontier:
        cost = es + alpha * inv
        if best is None or cost < best[2] or (cost == best[2] and inv < best[1]):
            best = (es, inv, cost)
    return best


def energy_cost(n_bs: float, n_inv: float, p_bs_kw: float = 1.0, p_inv_kw: float = 0.5) -> float:
    """Network power draw in kW."""
    if n_bs < 0 or n_inv < 0:
        raise ValueError("counts must be >= 0")
    return n_bs * p_bs_kw + n_inv * p_inv_kw


@dataclass
class FrontierPoint:
    lambda_opv: float
    lambda_es: float
    lambda_inv: float
    pb_hat: float
    ci: float


class DeploymentPlanner(BaseEstimator):
    """Trace the (lambda_ES, lambda_INV) frontier for a scenario and pick the cheapest point.

    After :meth:`fit`: ``frontier_`` (feasible points), ``infeasible_``
    (lambda_ES values with no feasible INV density) and ``optimum_``
    (``(lambda_es, lambda_inv, cost)``).
    """

    def __init__(self, lambda_es_grid=(0.4, 0.6, 0.8, 1.0, 1.2), inv_grid_step=0.05, inv_search_max=12.0,
                 slots=2000, random_state=0):
        self.lambda_es_grid = lambda_es_grid
        self.inv_grid_step = inv_grid_step
        self.inv_search_max = inv_search_max
        self.slots = slots
        self.random_state = random_state

    def fit(self, scenario: DeploymentScenario, y=None, draws: Optional[SlotDraws] = None):
        if draws is None:
            draws = SlotDraws(self.slots, scenario.n_cells, RngStream(self.random_state, 0))
        self.draws_ = draws
        self.frontier_, self.infeasible_ = [], []
        for es in self.lambda_es_grid:
            s = scenario.with_(lambda_es=float(es))
            try:
                inv, est = min_inv_density(s, self.inv_search_max, self.inv_grid_step, draws=draws)
            except InfeasibleScenario:
                self.infeasible_.append(float(es))
                continue
            self.frontier_.append(FrontierPoint(s.lambda_opv, float(es), inv, est.p_hat, est.ci_halfwidth))
        if not self.frontier_:
            raise InfeasibleScenario(
                f"no lambda_es in {list(self.lambda_es_grid)} meets p_b <= {scenario.target_pb} "
                f"with lambda_inv <= {self.inv_search_max}"
            )
        self.optimum_ = optimize_cost([(p.lambda_es, p.lambda_inv) for p in self.frontier_], scenario.alpha)
        return self

    def predict(self, lambda_es) -> np.ndarray:
        """Required lambda_INV for each lambda_ES on the fitted grid (NaN if infeasible)."""
        table = {p.lambda_es: p.lambda_inv for p in self.frontier_}
        return np.array([table.get(float(x), np.nan) for x in np.atleast_1d(lambda_es)])
