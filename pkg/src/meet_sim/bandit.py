"""Redundancy optimisation from queueing statistics and UCB-based OPV selection."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Optional

import numpy as np
from sklearn.base import BaseEstimator

_MASK64 = (1 << 64) - 1


def _by_tie(s):
    return s.tie


def _first_two(p):
    return p[0], p[1]


@dataclass(frozen=True)
class RedundancyModel:
    mu: float  # service rate per OPV, tasks/s
    d: float  # deadline, s
    task_rate: float  # global task arrival rate, tasks/s
    opv_count: float
    r_max: int = 4

    def __post_init__(self):
        if not (self.mu > 0 and self.d > 0 and self.opv_count > 0 and self.task_rate >= 0):
            raise ValueError(f"invalid redundancy model {self}")
        if self.r_max < 1:
            raise ValueError("r_max must be >= 1")

    @property
    def load_per_opv(self) -> float:
        return self.task_rate / self.opv_count


@dataclass(frozen=True)
class RedundancyChoice:
    replicas: int
    success: float
    stable: bool
    exponents: tuple


def success_exponent(r: int, mu: float, load: float, d: float) -> float:
    """``r (mu - r load) d``; ``-inf`` when an OPV queue at load ``r load`` is unstable."""
    excess = mu - r * load
    if excess <= 0:
        return -math.inf
    return r * excess * d


def optimize_redundancy(m: RedundancyModel) -> RedundancyChoice:
    """Replica count maximising ``1 - exp(-r (mu - r Λ/N) d)`` over ``1..r_max``.

    Each replica joins an M/M/1 queue loaded with ``r Λ/N``; sojourn in that
    queue is exponential with rate ``mu - r Λ/N`` and ``r`` independent replicas
    multiply the miss probabilities.  Ties go to the smaller ``r``.
    """
    load = m.load_per_opv
    exps = tuple(success_exponent(r, m.mu, load, m.d) for r in range(1, m.r_max + 1))
    best = 0
    for i, e in enumerate(exps):
        if e > exps[best]:
            best = i
    e = exps[best]
    stable = e > -math.inf
    success = -math.expm1(-e) if stable else 0.0
    return RedundancyChoice(best + 1, success, stable, exps)


@dataclass(slots=True)
class ArmState:
    opv_id: Hashable
    n: int = 0
    mean_reward: float = 0.0
    last_seen: float = 0.0
    tie: object = None


class CombinatorialUCB(BaseEstimator):
    """UCB1-style combinatorial semi-bandit over a changing arm set.

    Each decision round picks up to ``r`` of the currently available arms:
    never-pulled arms first, then the highest ``mean + c sqrt(ln t / n)``.
    Every chosen arm's reward is fed back separately through :meth:`update`.
    Ties go to the smaller ``opv_id``.  A non-zero ``tie_salt`` replaces that
    order with a fixed pseudo-random permutation of ids, so that co-located
    policies do not all break ties toward the same arm.
    """

    def __init__(self, c: float = math.sqrt(2.0), tie_salt: int = 0):
        self.c = c
        self.tie_salt = tie_salt

    def _tie_key(self, opv_id):
        if not self.tie_salt:
            return opv_id
        # splitmix64 finaliser over (id, salt); integer ids only
        z = (int(opv_id) * 0x9E3779B97F4A7C15 + self.tie_salt) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return (z ^ (z >> 31), opv_id)

    def _state(self):
        if not hasattr(self, "arms_"):
            self.arms_: dict = {}
            self.t_ = 0
        return self.arms_

    def index(self, arm: ArmState, t: Optional[int] = None) -> float:
        t = self.t_ if t is None else t
        if arm.n == 0:
            return math.inf
        return arm.mean_reward + self.c * math.sqrt(math.log(max(t, 1)) / arm.n)

    def select_arms(self, available: Iterable[Hashable], r: int, now: float = 0.0) -> list:
        """Choose up to ``r`` of ``available`` (the current neighbours); one decision round."""
        arms = self._state()
        available = list(available)
        if not available:
            raise ValueError("select_arms needs at least one available arm")
        if r < 1:
            raise ValueError(f"r must be >= 1, got {r}")
        self.t_ += 1
        states = []
        get = arms.get
        for a in available:
            st = get(a)
            if st is None:
                st = arms[a] = ArmState(a, tie=self._tie_key(a))
            st.last_seen = now
            states.append(st)
        fresh = [s for s in states if s.n == 0]
        if len(fresh) <= 1:
            chosen = fresh[:r]
        elif r == 1:
            chosen = [min(fresh, key=_by_tie)]
        else:
            chosen = heapq.nsmallest(r, fresh, key=_by_tie)
        if len(chosen) < r:
            log_t = math.log(self.t_)
            c = self.c
            # highest index first, then tie order
            pulled = [(-(s.mean_reward + c * math.sqrt(log_t / s.n)), s.tie, s) for s in states if s.n > 0]
            chosen.extend(p[2] for p in heapq.nsmallest(r - len(chosen), pulled, key=_first_two))
        return [s.opv_id for s in chosen]

    def update(self, opv_id: Hashable, reward: float) -> None:
        arms = self._state()
        st = arms.get(opv_id)
        if st is None:
            raise KeyError(f"unknown arm {opv_id!r}")
        st.n += 1
        st.mean_reward += (reward - st.mean_reward) / st.n

    def evict_stale(self, horizon: float, now: float) -> int:
        """Forget arms not seen as neighbours within ``horizon`` seconds."""
        arms = self._state()
        stale = [a for a, st in arms.items() if st.last_seen < now - horizon]
        for a in stale:
            del arms[a]
        return len(stale)


def run_stationary(
    means: np.ndarray,
    rounds: int,
    r: int = 1,
    c: float = math.sqrt(2.0),
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Play ``rounds`` rounds against Bernoulli arms ``0..K-1``.

    Returns the chosen-arm matrix ``(rounds, r)`` and per-round pseudo-regret
    (expected reward of the best ``r`` arms minus that of the chosen ones).
    """
    means = np.asarray(means, dtype=float)
    gen = np.random.default_rng(seed)
    policy = CombinatorialUCB(c=c)
    arms = list(range(len(means)))
    best = np.sort(means)[::-1][:r].sum()
    chosen = np.empty((rounds, r), dtype=int)
    regret = np.empty(rounds)
    draws = gen.random((rounds, len(means)))
    for k in range(rounds):
        picks = policy.select_arms(arms, r, now=float(k))
        for a in picks:
            policy.update(a, float(draws[k, a] < means[a]))
        chosen[k, : len(picks)] = picks
        regret[k] = best - means[picks].sum()
    return chosen, regret
