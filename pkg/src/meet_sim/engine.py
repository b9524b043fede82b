"""Discrete-event kernel: clock, ordered event queue and seeded random streams.

Random streams are numpy ``Generator`` objects on ``PCG64`` seeded through
``SeedSequence(seed, spawn_key=(stream_id,))``.  PCG64 output and the
SeedSequence hash are specified bit-for-bit by numpy, so a (seed, stream_id)
pair yields the same draws on every platform.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, TextIO, Union

import numpy as np


class SimulationError(RuntimeError):
    """Raised on kernel misuse, e.g. scheduling into the past."""


class EventKind(str, enum.Enum):
    VEHICLE_ARRIVAL = "vehicle-arrival"
    VEHICLE_DEPARTURE = "vehicle-departure"
    TASK_ARRIVAL = "task-arrival"
    TASK_EXPIRY = "task-expiry"
    REPLICA_DISPATCH = "replica-dispatch"
    REPLICA_COMPLETE = "replica-complete"
    REDUNDANCY_BROADCAST = "redundancy-broadcast"
    MODEL_DOWNLOAD_COMPLETE = "model-download-complete"
    MODEL_UPLOAD_COMPLETE = "model-upload-complete"
    GLOBAL_AGGREGATE = "global-aggregate"
    METRIC_SAMPLE = "metric-sample"


@dataclass(eq=False, slots=True)
class Event:
    time: float
    seq: int
    kind: EventKind
    action: Optional[Callable[["Event"], Any]] = None
    payload: Any = None
    cancelled: bool = False


class Simulator:
    """Single-threaded event loop.

    Events are ordered by ``(time, seq)``; ``seq`` is the insertion counter, so
    simultaneous events run in the order they were scheduled.  An event runs
    its own ``action`` if it has one, otherwise the handler registered for its
    kind with :meth:`on`.
    """

    def __init__(self, trace: Optional[TextIO] = None):
        self.now = 0.0
        self._queue: list[tuple[float, int, Event]] = []
        self._seq = 0
        self._handlers: dict[EventKind, Callable[[Event], Any]] = {}
        self.trace = trace
        self.dispatched = 0

    def on(self, kind: EventKind, handler: Callable[[Event], Any]) -> None:
        self._handlers[EventKind(kind)] = handler

    def schedule(self, time: float, kind: EventKind, action=None, payload=None) -> Event:
        if not time >= self.now:
            raise SimulationError(
                f"cannot schedule {EventKind(kind).value} at t={time!r} before now={self.now!r}"
            )
        if kind.__class__ is not EventKind:
            kind = EventKind(kind)
        event = Event(float(time), self._seq, kind, action, payload)
        self._seq += 1
        heapq.heappush(self._queue, (event.time, event.seq, event))
        return event

    def schedule_in(self, delay: float, kind: EventKind, action=None, payload=None) -> Event:
        return self.schedule(self.now + delay, kind, action, payload)

    @staticmethod
    def cancel(event: Optional[Event]) -> None:
        if event is not None:
            event.cancelled = True

    def peek(self) -> Optional[float]:
        while self._queue and self._queue[0][2].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0][0] if self._queue else None

    def __len__(self) -> int:
        return sum(not e.cancelled for _, _, e in self._queue)

    def run_until(self, t_end: float) -> int:
        """Dispatch every event with ``time <= t_end`` and advance the clock to ``t_end``.

        Returns the number of events dispatched (cancelled events are skipped
        and not counted).
        """
        if t_end < self.now:
            raise SimulationError(f"t_end={t_end!r} is before now={self.now!r}")
        count = 0
        queue = self._queue
        while queue and queue[0][0] <= t_end:
            event = heapq.heappop(queue)[2]
            if event.cancelled:
                continue
            self.now = event.time
            if self.trace is not None:
                self.trace.write(format_event(event) + "\n")
            handler = event.action or self._handlers.get(event.kind)
            if handler is not None:
                handler(event)
            count += 1
        self.now = float(t_end)
        self.dispatched += count
        return count


def format_event(event: Event) -> str:
    payload = "" if event.payload is None else event.payload
    return f"{event.time!r} {event.seq} {event.kind.value} {payload}"


# -- random streams ---------------------------------------------------------


class RngStream:
    """Independent reproducible random stream identified by ``(seed, stream_id)``."""

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def child(self, stream_id: int) -> "RngStream":
        """Stream for a sub-entity; depends only on (seed, stream_id)."""
        return RngStream(self.seed, stream_id)


@dataclass(frozen=True)
class Exponential:
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"exponential rate must be > 0, got {self.rate}")

    def draw(self, gen: np.random.Generator, size=None):
        return gen.exponential(1.0 / self.rate, size)

    @property
    def mean(self) -> float:
        return 1.0 / self.rate


@dataclass(frozen=True)
class ShiftedExponential:
    rate: float
    shift: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"shifted-exponential rate must be > 0, got {self.rate}")
        if not self.shift >= 0:
            raise ValueError(f"shifted-exponential shift must be >= 0, got {self.shift}")

    def draw(self, gen: np.random.Generator, size=None):
        return self.shift + gen.exponential(1.0 / self.rate, size)

    @property
    def mean(self) -> float:
        return self.shift + 1.0 / self.rate


@dataclass(frozen=True)
class Poisson:
    mean: float

    def __post_init__(self):
        if not (self.mean >= 0 and math.isfinite(self.mean)):
            raise ValueError(f"poisson mean must be finite and >= 0, got {self.mean}")

    def draw(self, gen: np.random.Generator, size=None):
        return gen.poisson(self.mean, size)


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self):
        if not self.high >= self.low:
            raise ValueError(f"uniform needs high >= low, got [{self.low}, {self.high}]")

    def draw(self, gen: np.random.Generator, size=None):
        return gen.uniform(self.low, self.high, size)

    @property
    def mean(self) -> float:
        return 0.5 * (self.low + self.high)


@dataclass(frozen=True)
class Normal:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std >= 0:
            raise ValueError(f"normal std must be >= 0, got {self.std}")

    def draw(self, gen: np.random.Generator, size=None):
        return gen.normal(self.mean, self.std, size)


@dataclass(frozen=True)
class Constant:
    value: float

    def draw(self, gen: np.random.Generator, size=None):
        if size is None:
            return float(self.value)
        return np.full(size, float(self.value))

    @property
    def mean(self) -> float:
        return self.value


Distribution = Union[Exponential, ShiftedExponential, Poisson, Uniform, Normal, Constant]

_FAMILIES = {
    "exponential": Exponential,
    "shifted-exponential": ShiftedExponential,
    "shifted_exponential": ShiftedExponential,
    "poisson": Poisson,
    "uniform": Uniform,
    "normal": Normal,
    "constant": Constant,
}


def make_distribution(spec) -> Distribution:
    """Build a distribution from ``{"family": ..., **params}`` or pass one through."""
    if isinstance(spec, tuple(_FAMILIES.values())):
        return spec
    if isinstance(spec, (int, float)):
        return Constant(float(spec))
    params = dict(spec)
    family = params.pop("family", None)
    if family not in _FAMILIES:
        raise ValueError(f"unknown distribution family {family!r}; expected one of {sorted(_FAMILIES)}")
    return _FAMILIES[family](**params)


def sample(stream: RngStream, dist, size=None):
    """Draw from ``dist`` using (and advancing) only ``stream``."""
    return make_distribution(dist).draw(stream.generator, size)
