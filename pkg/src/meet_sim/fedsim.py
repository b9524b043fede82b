"""Federated-learning timeline over vehicles passing a base station.

Each participating vehicle downloads the current global model on arrival,
runs a few mini-batch SGD steps on its own non-i.i.d. data, and uploads after
a random round delay unless it has left coverage by then.  The server either
mixes every received model into the global one or averages a buffer of
received models on a fixed period.  The learner is multinomial logistic
regression on a Gaussian toy task, cheap enough for 13000 s timelines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from .config import FedsimParams
from .engine import EventKind, RngStream, Simulator, make_distribution
from .mobility import Role, RoadSegment, TrafficFlowParams, Vehicle, spawn_arrivals

MOBILITY_STREAM = 1
TASK_STREAM = 2
INIT_STREAM = 3
CLIENT_DATA_BASE = 1_000_000
CLIENT_SGD_BASE = 2_000_000
CLIENT_DELAY_BASE = 3_000_000


# -- toy task -------------------------------------------------------------------


@dataclass
class SyntheticTask:
    """Gaussian class-conditional data: ``x ~ N(means[y], I)``."""

    means: np.ndarray  # (K, D)
    eval_X: np.ndarray
    eval_y: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def n_features(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, gen: np.random.Generator, class_probs: Optional[np.ndarray] = None):
        K = self.n_classes
        y = gen.choice(K, size=n, p=class_probs)
        X = self.means[y] + gen.standard_normal((n, self.n_features))
        return X, y


def _generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def make_synthetic_task(D: int, K: int, sep: float, rng, eval_size: int = 5000) -> SyntheticTask:
    """Class means are ``sep`` times random unit vectors; balanced held-out set of ``eval_size``."""
    if D < 2 or K < 2:
        raise ValueError("need D >= 2 and K >= 2")
    if sep < 0:
        raise ValueError("sep must be >= 0")
    gen = _generator(rng)
    dirs = gen.standard_normal((K, D))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    task = SyntheticTask(sep * dirs, np.empty((0, D)), np.empty(0, dtype=int))
    task.eval_X, task.eval_y = task.sample(eval_size, gen)
    return task


def class_mixture(position: float, length: float, K: int, strength: float) -> np.ndarray:
    """Class proportions for data sensed at ``position`` along a road of ``length``.

    Weights decay exponentially with circular class distance from
    ``floor(position / length * K)``; ``strength=0`` gives i.i.d. data.
    """
    centre = min(int(math.floor(position / length * K)), K - 1) if length > 0 else 0
    k = np.arange(K)
    dist = np.minimum(np.abs(k - centre), K - np.abs(k - centre))
    w = np.exp(-strength * dist / (K / 2.0))
    return w / w.sum()


# -- learner ---------------------------------------------------------------------


def _augment(X: np.ndarray) -> np.ndarray:
    return np.hstack((X, np.ones((X.shape[0], 1))))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(W: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient for ``W`` of shape ``(K, D+1)``."""
    return _loss_and_grad_aug(W, _augment(X), y)


def _loss_and_grad_aug(W: np.ndarray, Xa: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    z = Xa @ W.T
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = Xa.shape[0]
    loss = float(np.mean(logsum - z[np.arange(n), y]))
    P = np.exp(z - logsum[:, None])
    P[np.arange(n), y] -= 1.0
    return loss, P.T @ Xa / n


def batch_indices(n: int, batch_size: int, gen: np.random.Generator) -> np.ndarray:
    """A mini-batch without replacement, or the whole (shuffled) set when ``n <= batch_size``."""
    if n <= batch_size:
        return gen.permutation(n)
    return gen.choice(n, size=batch_size, replace=False)


def sgd(W: np.ndarray, X: np.ndarray, y: np.ndarray, iters: int, batch_size: int, lr: float,
        gen: np.random.Generator, losses: Optional[list] = None) -> np.ndarray:
    W = np.array(W, dtype=float, copy=True)
    Xa = _augment(X)
    for _ in range(iters):
        idx = batch_indices(len(y), batch_size, gen)
        loss, g = _loss_and_grad_aug(W, Xa[idx], y[idx])
        if losses is not None:
            losses.append(loss)
        W -= lr * g
    return W


def local_train(W: np.ndarray, data: tuple, params, gen: np.random.Generator) -> np.ndarray:
    """``local_iters`` SGD steps from ``W`` on ``data=(X, y)``; returns new weights."""
    X, y = data
    if len(y) == 0:
        raise ValueError("local_train needs non-empty data")
    return sgd(W, X, y, params.local_iters, params.batch_size, params.learning_rate, gen)


def topk_accuracy(W: np.ndarray, X: np.ndarray, y: np.ndarray, k: int) -> float:
    """Fraction of samples whose label is among the ``k`` best scores; ties rank the lower class first."""
    K = W.shape[0]
    if not 1 <= k <= K:
        raise ValueError(f"k must be in [1, {K}], got {k}")
    return float(np.mean(rank_of_true(W, _augment(X), y) < k))


def rank_of_true(W: np.ndarray, Xa: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Number of classes ranked above the true one (augmented inputs)."""
    K = W.shape[0]
    scores = Xa @ W.T
    true = scores[np.arange(len(y)), y][:, None]
    ahead = (scores > true) | ((scores == true) & (np.arange(K)[None, :] < y[:, None]))
    return ahead.sum(axis=1)


class SoftmaxRegression(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression trained by plain mini-batch SGD."""

    def __init__(self, learning_rate=0.1, n_iter=200, batch_size=128, random_state=None):
        self.learning_rate = learning_rate
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, yi = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        gen = np.random.default_rng(self.random_state)
        W0 = np.zeros((len(self.classes_), X.shape[1] + 1))
        self.loss_curve_ = []
        self.coef_ = sgd(W0, X, yi, self.n_iter, self.batch_size, self.learning_rate, gen, self.loss_curve_)
        return self

    def _scores(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.coef_.shape[1] - 1:
            raise ValueError(f"expected {self.coef_.shape[1] - 1} features, got {X.shape[1]}")
        return _augment(X) @ self.coef_.T

    def decision_function(self, X):
        z = self._scores(X)
        # binary case follows the sklearn convention of one margin per sample
        return z[:, 1] - z[:, 0] if z.shape[1] == 2 else z

    def predict_proba(self, X):
        return softmax(self._scores(X))

    def predict(self, X):
        return self.classes_[np.argmax(self._scores(X), axis=1)]


# -- aggregation -----------------------------------------------------------------


def mix(global_w: np.ndarray, local_w: np.ndarray, beta: float) -> np.ndarray:
    """``(1 - beta) global + beta local``."""
    if global_w.shape != local_w.shape:
        raise ValueError(f"shape mismatch {global_w.shape} vs {local_w.shape}")
    if not 0 < beta <= 1:
        raise ValueError("beta must be in (0, 1]")
    if beta == 1:
        return np.array(local_w, dtype=float, copy=True)
    return (1.0 - beta) * global_w + beta * local_w


def average(locals_: Sequence[np.ndarray]) -> np.ndarray:
    if not locals_:
        raise ValueError("nothing to average")
    shape = locals_[0].shape
    if any(w.shape != shape for w in locals_):
        raise ValueError("shape mismatch among buffered models")
    return np.mean(np.stack(locals_), axis=0)


def aggregate(global_w: np.ndarray, incoming: Sequence[np.ndarray], policy: str = "mixing",
              beta: float = 0.1) -> np.ndarray:
    """One global update: sequential mixing of each incoming model, or their plain average."""
    if policy == "mixing":
        out = global_w
        for w in incoming:
            out = mix(out, w, beta)
        return out
    if policy == "periodic":
        if any(w.shape != global_w.shape for w in incoming):
            raise ValueError("shape mismatch")
        return average(incoming)
    raise ValueError(f"unknown aggregation policy {policy!r}")


# -- timeline --------------------------------------------------------------------


@dataclass
class ClientRound:
    client: int
    download_t: float
    download_version: int
    upload_t: float
    upload_version: int = -1
    dropped: bool = False

    @property
    def staleness(self) -> int:
        return self.upload_version - self.download_version


@dataclass
class FLTimeline:
    t: list = field(default_factory=list)
    version: list = field(default_factory=list)
    top1: list = field(default_factory=list)
    topk: list = field(default_factory=list)
    clients_active: list = field(default_factory=list)
    uploads_dropped: list = field(default_factory=list)
    rounds: list = field(default_factory=list)
    weights: Optional[np.ndarray] = None
    history: Optional[list] = None  # global weights after each aggregation, if recorded

    COLUMNS = ("t", "version", "top1", "topk", "clients_active", "uploads_dropped")

    def rows(self):
        return zip(*(getattr(self, c) for c in self.COLUMNS))

    def time_to_threshold(self, threshold: float, metric: str = "topk") -> float:
        """First sample time at which ``metric`` reaches ``threshold``; ``inf`` if never."""
        for t, a in zip(self.t, getattr(self, metric)):
            if a >= threshold:
                return t
        return math.inf


def client_dataset(task: SyntheticTask, vehicle: Vehicle, params: FedsimParams, seed: int):
    """Local samples of one client; its sensing position is uniform along the road."""
    gen = RngStream(seed, CLIENT_DATA_BASE + vehicle.id).generator
    length = params.road.length
    position = gen.uniform(0.0, length)
    probs = class_mixture(position, length, task.n_classes, params.noniid_strength)
    return task.sample(params.samples_per_client, gen, probs)


def fl_vehicles(params: FedsimParams, seed: int) -> list[Vehicle]:
    """Road arrivals; the participating fraction are tagged as FL clients."""
    flow = TrafficFlowParams(params.traffic.rho_max, params.traffic.v_max, params.traffic.velocity)
    seg = RoadSegment(params.road.length, params.road.lanes, params.road.v2v_range)
    p = params.participation
    mix_ = {Role.OPV: p, "other": 1.0 - p}
    out = spawn_arrivals(flow, mix_, params.horizon, RngStream(seed, MOBILITY_STREAM), seg,
                         params.traffic.velocity_spread)
    for v in out:
        v.participates_fl = v.role == Role.OPV
    return out


def initial_weights(task: SyntheticTask, seed: int) -> np.ndarray:
    gen = RngStream(seed, INIT_STREAM).generator
    return 0.01 * gen.standard_normal((task.n_classes, task.n_features + 1))


class FLSimulation:
    def __init__(self, vehicles: Sequence[Vehicle], params: FedsimParams, task: SyntheticTask, seed: int,
                 record_weights: bool = False, trace=None):
        self.vehicles = [v for v in vehicles if v.participates_fl]
        self.p = params
        self.task = task
        self.seed = seed
        self.sim = Simulator(trace)
        self.delay = make_distribution(params.round_delay.params())
        self.global_w = initial_weights(task, seed)
        self.version = 0
        self.buffer: list = []
        self.active = 0
        self.dropped = 0
        self.timeline = FLTimeline(history=[] if record_weights else None)
        self._data: dict = {}
        self._eval_Xa = _augment(task.eval_X)
        self._sgd: dict = {}
        self._delay_streams: dict = {}

    def _client(self, v: Vehicle):
        if v.id not in self._data:
            self._data[v.id] = client_dataset(self.task, v, self.p, self.seed)
            self._sgd[v.id] = RngStream(self.seed, CLIENT_SGD_BASE + v.id).generator
            self._delay_streams[v.id] = RngStream(self.seed, CLIENT_DELAY_BASE + v.id).generator
        return self._data[v.id]

    def on_arrival(self, v: Vehicle):
        self.active += 1
        if v.departure_time <= self.p.horizon:
            self.sim.schedule(v.departure_time, EventKind.VEHICLE_DEPARTURE, lambda e: self._depart(), v.id)
        self._start_round(v)

    def _depart(self):
        self.active -= 1

    def _start_round(self, v: Vehicle):
        self._client(v)
        now = self.sim.now
        snapshot = self.global_w.copy()
        upload_t = now + float(self.delay.draw(self._delay_streams[v.id]))
        rec = ClientRound(v.id, now, self.version, upload_t)
        self.timeline.rounds.append(rec)
        if upload_t > self.p.horizon:
            return
        self.sim.schedule(upload_t, EventKind.MODEL_UPLOAD_COMPLETE,
                          lambda e: self._upload(v, rec, snapshot), v.id)

    def _upload(self, v: Vehicle, rec: ClientRound, snapshot: np.ndarray):
        if v.departure_time < rec.upload_t:
            rec.dropped = True
            self.dropped += 1
            return
        local = local_train(snapshot, self._data[v.id], self.p, self._sgd[v.id])
        rec.upload_version = self.version
        if self.p.aggregation == "mixing":
            self._set_global(mix(self.global_w, local, self.p.beta))
        else:
            self.buffer.append(local)
        if self.p.repeat_rounds:
            self._start_round(v)

    def _set_global(self, w: np.ndarray):
        self.global_w = w
        self.version += 1
        if self.timeline.history is not None:
            self.timeline.history.append(w.copy())

    def _periodic(self, e):
        if self.buffer:
            self._set_global(average(self.buffer))
            self.buffer = []
        nxt = self.sim.now + self.p.period
        if nxt <= self.p.horizon:
            self.sim.schedule(nxt, EventKind.GLOBAL_AGGREGATE, self._periodic)

    def _sample(self, e):
        tl = self.timeline
        rank = rank_of_true(self.global_w, self._eval_Xa, self.task.eval_y)
        tl.t.append(self.sim.now)
        tl.version.append(self.version)
        tl.top1.append(float(np.mean(rank < 1)))
        tl.topk.append(float(np.mean(rank < self.p.top_k)))
        tl.clients_active.append(self.active)
        tl.uploads_dropped.append(self.dropped)
        nxt = self.sim.now + self.p.eval_interval
        if nxt <= self.p.horizon + 1e-9:
            self.sim.schedule(nxt, EventKind.METRIC_SAMPLE, self._sample)

    def run(self) -> FLTimeline:
        self.sim.schedule(0.0, EventKind.METRIC_SAMPLE, self._sample)
        if self.p.aggregation == "periodic":
            self.sim.schedule(self.p.period, EventKind.GLOBAL_AGGREGATE, self._periodic)
        for v in self.vehicles:
            if v.arrival_time <= self.p.horizon:
                self.sim.schedule(v.arrival_time, EventKind.VEHICLE_ARRIVAL, lambda e, v=v: self.on_arrival(v), v.id)
        self.sim.run_until(self.p.horizon)
        self.timeline.weights = self.global_w
        return self.timeline


def run_fl(vehicles: Sequence[Vehicle], params: FedsimParams, task: SyntheticTask, seed: int,
           record_weights: bool = False, trace=None) -> FLTimeline:
    return FLSimulation(vehicles, params, task, seed, record_weights, trace).run()


def simulate(params: FedsimParams, seed: int, task: Optional[SyntheticTask] = None, trace=None) -> FLTimeline:
    """Full timeline: synthetic task (unless given), road arrivals and training."""
    if task is None:
        task = make_synthetic_task(params.features, params.classes, params.separation,
                                   RngStream(seed, TASK_STREAM), params.eval_size)
    return run_fl(fl_vehicles(params, seed), params, task, seed, trace=trace)
