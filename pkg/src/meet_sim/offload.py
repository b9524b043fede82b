"""Opportunistic task offloading to OPVs: V2V with replication, I2V with EDF dispatch."""

from __future__ import annotations

import enum
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, TextIO

import numpy as np

from .bandit import CombinatorialUCB, RedundancyModel, optimize_redundancy
from .config import OffloadParams
from .engine import EventKind, RngStream, Simulator, make_distribution
from .mobility import Role, RoadPopulation, RoadSegment, TrafficFlowParams, Vehicle, spawn_arrivals

# stream-id layout; per-entity streams keep draws independent of event order
MOBILITY_STREAM = 1
TRANSFER_STREAM = 2
BS_TASK_STREAM = 3
UE_STREAM_BASE = 1_000_000
OPV_STREAM_BASE = 2_000_000


class Outcome(str, enum.Enum):
    SUCCESS = "success"
    LATE = "late"
    ABORTED = "aborted-by-departure"
    CANCELLED = "cancelled"


class TaskStatus(str, enum.Enum):
    PENDING = "pending"
    COMPLETED = "completed"
    EXPIRED = "expired"


@dataclass(eq=False, slots=True)
class Replica:
    task: "Task"
    opv_id: int
    dispatch_time: float
    start_service: Optional[float] = None
    finish_time: Optional[float] = None
    outcome: Optional[Outcome] = None
    # reward already fed back to the origin's bandit
    reported: bool = False
    event: object = None

    @property
    def task_id(self) -> int:
        return self.task.id


@dataclass(eq=False, slots=True)
class Task:
    id: int
    origin: int
    arrival_time: float
    deadline: float
    workload: float = 1.0
    replicas: list = field(default_factory=list)
    status: TaskStatus = TaskStatus.PENDING
    completion_time: Optional[float] = None
    accuracy: Optional[float] = None
    offloadable: bool = True
    measured: bool = True
    policy: Optional[CombinatorialUCB] = None

    @property
    def expires_at(self) -> float:
        return self.arrival_time + self.deadline

    @property
    def in_flight(self) -> int:
        return sum(1 for r in self.replicas if r.outcome is None)


@dataclass(frozen=True)
class DnnConfig:
    name: str
    workload: float
    accuracy: float


def choose_dnn_config(configs: Sequence[DnnConfig], predicted_sojourn_per_unit: float, deadline: float) -> DnnConfig:
    """Most accurate config expected to finish in time, else the lightest one."""
    if not configs:
        raise ValueError("no DNN configurations given")
    feasible = [c for c in configs if c.workload * predicted_sojourn_per_unit <= deadline]
    if feasible:
        # highest accuracy; among equals the lighter config
        return max(feasible, key=lambda c: (c.accuracy, -c.workload))
    return min(configs, key=lambda c: (c.workload, -c.accuracy))


@dataclass
class QosMetrics:
    deadline: float
    tasks_total: int = 0
    tasks_completed: int = 0
    tasks_expired: int = 0
    not_offloadable: int = 0
    replica_outcomes: Counter = field(default_factory=Counter)
    delays: list = field(default_factory=list)
    accuracy_sum: float = 0.0
    count_unoffloadable: bool = True

    @property
    def denominator(self) -> int:
        return self.tasks_total if self.count_unoffloadable else self.tasks_total - self.not_offloadable

    @property
    def completion_ratio(self) -> float:
        return self.tasks_completed / self.denominator if self.denominator else 0.0

    def delay_histogram(self, bins: int = 20):
        return np.histogram(self.delays, bins=bins, range=(0.0, self.deadline))

    @property
    def mean_accuracy(self) -> float:
        return self.accuracy_sum / self.tasks_completed if self.tasks_completed else 0.0


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n <= 0:
        raise ValueError("Wilson interval needs n > 0")
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def completion_ratio(metrics: QosMetrics) -> tuple[float, float, float]:
    """``(ratio, ci_lo, ci_hi)`` with a 95% Wilson interval."""
    n = metrics.denominator
    if n <= 0:
        raise ValueError("completion ratio is undefined with zero tasks")
    lo, hi = wilson_interval(metrics.tasks_completed, n)
    return metrics.tasks_completed / n, lo, hi


def i2v_dispatch(pending: Sequence[Task], allow_duplicates: bool = True) -> Optional[Task]:
    """Task the BS hands to an OPV that has just become available.

    Earliest deadline first among tasks without an in-flight replica.  If every
    pending task is already in flight, duplicate the one with the fewest live
    replicas, earliest deadline first.  ``pending`` order breaks remaining ties.
    """
    live = [t for t in pending if t.status == TaskStatus.PENDING]
    if not live:
        return None
    uncovered = [t for t in live if t.in_flight == 0]
    if uncovered:
        return min(uncovered, key=lambda t: t.expires_at)
    if not allow_duplicates:
        return None
    return min(live, key=lambda t: (t.in_flight, t.expires_at))


class OpvQueue:
    """FIFO single-server queue at one OPV."""

    def __init__(self, opv_id: int, service_rate: float, stream: RngStream):
        self.opv_id = opv_id
        self.service_rate = service_rate
        self.gen = stream.generator
        self.backlog: deque = deque()
        self.current: Optional[Replica] = None
        self.started: list = []

    @property
    def idle(self) -> bool:
        return self.current is None and not self.backlog

    def __len__(self) -> int:
        return len(self.backlog) + (self.current is not None)


class OffloadSimulation:
    """Shared OPV service machinery; subclasses generate and route tasks."""

    def __init__(self, params: OffloadParams, seed: int, trace: Optional[TextIO] = None, record_fifo: bool = False,
                 policy_trace: Optional[TextIO] = None):
        self.p = params
        self.policy_trace = policy_trace
        self.seed = int(seed)
        self.sim = Simulator(trace=trace)
        self.population = RoadPopulation()
        self.queues: dict[int, OpvQueue] = {}
        self.metrics = QosMetrics(deadline=params.deadline, count_unoffloadable=params.count_unoffloadable)
        self.segment = RoadSegment(params.road.length, params.road.lanes, params.road.v2v_range, params.road.bs_position)
        self.flow = TrafficFlowParams(params.traffic.rho_max, params.traffic.v_max, params.traffic.velocity)
        self.warmup = 20.0 if params.warmup is None else params.warmup
        self.tasks: list[Task] = []
        self._task_seq = 0
        self.record_fifo = record_fifo
        td = params.transfer_delay
        self.transfer = make_distribution(td.params() if hasattr(td, "params") else td)
        self.transfer_gen = RngStream(self.seed, TRANSFER_STREAM).generator
        self._no_transfer = getattr(self.transfer, "value", None) == 0
        self.dnn_configs = (
            [DnnConfig(c.name, c.workload, c.accuracy) for c in params.dnn_configs] if params.dnn_configs else None
        )

    # -- mobility -----------------------------------------------------------

    def role_mix(self) -> dict:
        raise NotImplementedError

    def spawn(self) -> list[Vehicle]:
        vehicles = spawn_arrivals(
            self.flow,
            self.role_mix(),
            self.p.horizon,
            RngStream(self.seed, MOBILITY_STREAM),
            segment=self.segment,
            velocity_spread=self.p.traffic.velocity_spread,
            service_rate=self.p.service_rate,
            prefill=True,
        )
        for v in vehicles:
            self.sim.schedule(v.arrival_time, EventKind.VEHICLE_ARRIVAL, self._arrive, payload=(v.id, v.role.value))
        return vehicles

    def _arrive(self, ev) -> None:
        raise NotImplementedError

    def _vehicle(self, ev) -> Vehicle:
        return self._by_id[ev.payload[0]]

    def on_arrival(self, v: Vehicle) -> None:
        self.population.add(v)
        if v.role == Role.OPV:
            self.queues[v.id] = OpvQueue(v.id, v.service_rate, RngStream(self.seed, OPV_STREAM_BASE + v.id))
        self.sim.schedule(v.departure_time, EventKind.VEHICLE_DEPARTURE, self._depart, payload=(v.id, v.role.value))

    def _depart(self, ev) -> None:
        v = self._vehicle(ev)
        self.population.remove(v)
        if v.role == Role.OPV:
            self.on_departure(self.queues.pop(v.id))

    def on_departure(self, q: OpvQueue) -> None:
        """Abort everything queued or in service at a departing OPV."""
        if q.current is not None:
            self.sim.cancel(q.current.event)
            self._close(q.current, Outcome.ABORTED)
            q.current = None
        while q.backlog:
            self._close(q.backlog.popleft(), Outcome.ABORTED)

    # -- service ------------------------------------------------------------

    def new_task(self, origin: int, deadline: float, workload: float) -> Task:
        """Register a pending task arriving now and schedule its expiry."""
        if not deadline > 0:
            raise ValueError(f"deadline must be > 0, got {deadline}")
        now = self.sim.now
        task = Task(self._task_seq, origin, now, deadline, workload, measured=now >= self.warmup)
        self._task_seq += 1
        self.tasks.append(task)
        self.sim.schedule(task.expires_at, EventKind.TASK_EXPIRY, self._expire, payload=task.id)
        return task

    def dispatch(self, task: Task, opv_id: int) -> Replica:
        rep = Replica(task, opv_id, self.sim.now)
        task.replicas.append(rep)
        delay = 0.0 if self._no_transfer else float(self.transfer.draw(self.transfer_gen))
        if delay > 0:
            self.sim.schedule_in(delay, EventKind.REPLICA_DISPATCH, lambda ev: self._enqueue(rep), payload=(task.id, opv_id))
        else:
            self._enqueue(rep)
        return rep

    def _enqueue(self, rep: Replica) -> None:
        q = self.queues.get(rep.opv_id)
        if q is None:  # OPV left while the replica was in transit
            self._close(rep, Outcome.ABORTED)
            return
        if rep.outcome is not None:
            return
        q.backlog.append(rep)
        if q.current is None:
            self._start_next(q)

    def _start_next(self, q: OpvQueue) -> None:
        while q.backlog and q.current is None:
            rep = q.backlog.popleft()
            if rep.outcome is not None:
                continue
            rep.start_service = self.sim.now
            if self.record_fifo:
                q.started.append(rep)
            rate = q.service_rate / rep.task.workload
            q.current = rep
            rep.event = self.sim.schedule_in(
                q.gen.exponential(1.0 / rate), EventKind.REPLICA_COMPLETE, self._finish, payload=(rep.task.id, q.opv_id)
            )

    def _finish(self, ev) -> None:
        q = self.queues[ev.payload[1]]
        rep = q.current
        q.current = None
        now = self.sim.now
        rep.finish_time = now
        task = rep.task
        if now <= task.expires_at:
            self._close(rep, Outcome.SUCCESS)
            if task.status == TaskStatus.PENDING:
                self._complete(task)
        else:
            self._close(rep, Outcome.LATE)
        self.after_service(q)

    def after_service(self, q: OpvQueue) -> None:
        self._start_next(q)

    def _complete(self, task: Task) -> None:
        task.status = TaskStatus.COMPLETED
        task.completion_time = self.sim.now
        if self.p.cancel_on_success:
            for other in task.replicas:
                if other.outcome is None:
                    self._cancel_replica(other)

    def _cancel_replica(self, rep: Replica) -> None:
        q = self.queues.get(rep.opv_id)
        rep.reported = True  # no observation for a cancelled copy
        if q is not None and q.current is rep:
            self.sim.cancel(rep.event)
            q.current = None
            self._close(rep, Outcome.CANCELLED)
            self.after_service(q)
        else:
            self._close(rep, Outcome.CANCELLED)  # lazily skipped in the backlog

    def _close(self, rep: Replica, outcome: Outcome) -> None:
        rep.outcome = outcome
        if not rep.reported:
            rep.reported = True
            self.report(rep, 1.0 if outcome == Outcome.SUCCESS else 0.0)

    def report(self, rep: Replica, reward: float) -> None:
        pass

    def _expire(self, ev) -> None:
        task = self.tasks[ev.payload]
        if task.status == TaskStatus.PENDING:
            task.status = TaskStatus.EXPIRED
        # copies still running are already late: give the feedback now
        for rep in task.replicas:
            if not rep.reported:
                rep.reported = True
                self.report(rep, 0.0)
        self.on_expiry(task)

    def on_expiry(self, task: Task) -> None:
        pass

    # -- driver -------------------------------------------------------------

    def run(self) -> QosMetrics:
        self.vehicles = self.spawn()
        self._by_id = {v.id: v for v in self.vehicles}
        self.start()
        self.sim.run_until(self.p.horizon + self.p.deadline)
        self._finalize()
        return self.metrics

    def start(self) -> None:
        pass

    def _finalize(self) -> None:
        # anything unfinished is past its deadline by now
        for q in self.queues.values():
            if q.current is not None:
                self.sim.cancel(q.current.event)
                q.current.outcome = Outcome.LATE
                q.current = None
            for rep in q.backlog:
                if rep.outcome is None:
                    rep.outcome = Outcome.LATE
            q.backlog.clear()
        m = self.metrics
        for task in self.tasks:
            for rep in task.replicas:
                if rep.outcome is None:  # in transit to a queue at the end
                    rep.outcome = Outcome.LATE
            if not task.measured:
                continue
            m.tasks_total += 1
            if not task.offloadable:
                m.not_offloadable += 1
            if task.status == TaskStatus.COMPLETED:
                m.tasks_completed += 1
                m.delays.append(task.completion_time - task.arrival_time)
                if task.accuracy is not None:
                    m.accuracy_sum += task.accuracy
            else:
                m.tasks_expired += 1
            for rep in task.replicas:
                m.replica_outcomes[rep.outcome.value] += 1


class V2VOffloadSimulation(OffloadSimulation):
    """UEs replicate each task to neighbouring OPVs chosen by a per-UE bandit.

    The BS periodically broadcasts the replica count from the queueing model
    (``replicas="auto"``) using the current UE/OPV counts on the segment.
    """

    def role_mix(self) -> dict:
        k = self.p.ue_opv_ratio
        return {Role.UE: k / (1 + k), Role.OPV: 1 / (1 + k)}

    def start(self) -> None:
        self.policies: dict[int, CombinatorialUCB] = {}
        self._next_task: dict[int, object] = {}
        self._ue_gens: dict[int, np.random.Generator] = {}
        self.replicas_now = 1 if self.p.replicas == "auto" else int(self.p.replicas)
        self.redundancy_log: list = []
        self.sim.schedule(0.0, EventKind.REDUNDANCY_BROADCAST, self._broadcast)

    def _arrive(self, ev) -> None:
        v = self._vehicle(ev)
        self.on_arrival(v)
        if v.role == Role.UE:
            self.policies[v.id] = CombinatorialUCB(c=self.p.exploration, tie_salt=v.id + 1)
            self._ue_gens[v.id] = RngStream(self.seed, UE_STREAM_BASE + v.id).generator
            self._schedule_task(v)

    def _schedule_task(self, v: Vehicle) -> None:
        t = self.sim.now + self._ue_gens[v.id].exponential(1.0 / self.p.arrival_rate)
        if t < self.p.horizon and t < v.departure_time:
            self._next_task[v.id] = self.sim.schedule(t, EventKind.TASK_ARRIVAL, self._task_arrival, payload=v.id)

    def _depart(self, ev) -> None:
        v = self._vehicle(ev)
        super()._depart(ev)
        if v.role == Role.UE:
            self.sim.cancel(self._next_task.pop(v.id, None))
            # in-flight tasks keep their own reference to the policy
            del self.policies[v.id]
            del self._ue_gens[v.id]

    def _broadcast(self, ev) -> None:
        now = self.sim.now
        if self.p.replicas == "auto":
            n_ue = self.population.count(Role.UE)
            n_opv = self.population.count(Role.OPV)
            if n_opv > 0:
                model = RedundancyModel(self.p.service_rate, self.p.deadline, n_ue * self.p.arrival_rate, n_opv, self.p.r_max)
                self.replicas_now = optimize_redundancy(model).replicas
            self.redundancy_log.append((now, self.replicas_now))
        for policy in self.policies.values():
            policy.evict_stale(self.p.arm_stale_horizon, now)
        nxt = now + self.p.broadcast_interval
        if nxt < self.p.horizon:
            self.sim.schedule(nxt, EventKind.REDUNDANCY_BROADCAST, self._broadcast)

    def predicted_sojourn_per_unit(self) -> float:
        n_opv = self.population.count(Role.OPV)
        if n_opv == 0:
            return math.inf
        load = self.replicas_now * self.population.count(Role.UE) * self.p.arrival_rate / n_opv
        excess = self.p.service_rate - load
        return 1.0 / excess if excess > 0 else math.inf

    def _task_arrival(self, ev) -> None:
        ue = self._by_id[ev.payload]
        now = self.sim.now
        self._schedule_task(ue)
        workload, accuracy = self.p.workload, None
        if self.dnn_configs:
            cfg = choose_dnn_config(self.dnn_configs, self.predicted_sojourn_per_unit(), self.p.deadline)
            workload, accuracy = cfg.workload, cfg.accuracy
        task = self.new_task(ue.id, self.p.deadline, workload)
        task.accuracy = accuracy
        self.v2v_offload(task, ue, self.replicas_now)

    def v2v_offload(self, task: Task, ue: Vehicle, r: int) -> list[Replica]:
        now = self.sim.now
        neighbors = self.population.within(ue.position(now), now, self.segment.v2v_range, Role.OPV, exclude=ue)
        if not neighbors:
            task.offloadable = False
            return []
        policy = self.policies[ue.id]
        task.policy = policy
        chosen = policy.select_arms([o.id for o in neighbors], r, now)
        if self.policy_trace is not None:
            arms = ";".join(str(a) for a in chosen)
            self.policy_trace.write(f"{now!r},{ue.id},{task.id},{policy.t_},select,{arms},\n")
        return [self.dispatch(task, opv_id) for opv_id in chosen]

    def report(self, rep: Replica, reward: float) -> None:
        policy = rep.task.policy
        if policy is not None and rep.opv_id in policy.arms_:
            policy.update(rep.opv_id, reward)
        if self.policy_trace is not None and policy is not None:
            t = rep.task
            self.policy_trace.write(f"{self.sim.now!r},{t.origin},{t.id},{policy.t_},reward,{rep.opv_id},{reward}\n")


class I2VOffloadSimulation(OffloadSimulation):
    """BS-generated tasks handed to OPVs in coverage, one at a time per OPV."""

    def role_mix(self) -> dict:
        return {Role.OPV: 1.0}

    def start(self) -> None:
        self.pending: list[Task] = []
        self.idle: dict[int, OpvQueue] = {}
        self.bs_gen = RngStream(self.seed, BS_TASK_STREAM).generator
        self._schedule_bs_task()

    def _schedule_bs_task(self) -> None:
        t = self.sim.now + self.bs_gen.exponential(1.0 / self.p.i2v.bs_task_rate)
        if t < self.p.horizon:
            self.sim.schedule(t, EventKind.TASK_ARRIVAL, self._bs_task)

    def _bs_task(self, ev) -> None:
        self._schedule_bs_task()
        task = self.new_task(-1, self.p.deadline, self.p.workload)
        self.pending.append(task)
        if self.idle:
            # longest-idle OPV takes it; duplicates are only made for OPVs entering coverage
            self._offer(next(iter(self.idle.values())), duplicates=False)

    def _arrive(self, ev) -> None:
        v = self._vehicle(ev)
        self.on_arrival(v)
        self._offer(self.queues[v.id], duplicates=self.p.i2v.allow_duplicates)

    def _offer(self, q: OpvQueue, duplicates: bool) -> None:
        task = i2v_dispatch(self.pending, duplicates)
        if task is None:
            self.idle[q.opv_id] = q
            return
        self.idle.pop(q.opv_id, None)
        self.dispatch(task, q.opv_id)

    def after_service(self, q: OpvQueue) -> None:
        self._start_next(q)
        if q.idle:
            self._offer(q, duplicates=False)

    def _depart(self, ev) -> None:
        self.idle.pop(ev.payload[0], None)
        super()._depart(ev)

    def _complete(self, task: Task) -> None:
        super()._complete(task)
        self.pending.remove(task)

    def on_expiry(self, task: Task) -> None:
        if task in self.pending:
            self.pending.remove(task)


POLICY_TRACE_HEADER = "t,ue,task,round,event,arms,reward"


def simulate(params: OffloadParams, seed: int, trace: Optional[TextIO] = None,
             policy_trace: Optional[TextIO] = None) -> QosMetrics:
    cls = V2VOffloadSimulation if params.scheme == "v2v" else I2VOffloadSimulation
    return cls(params, seed, trace=trace, policy_trace=policy_trace).run()
