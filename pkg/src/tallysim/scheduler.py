"""Priority-aware block-level scheduling policy plus baselines.

Policies:

* Tally: high-priority kernels are submitted unmodified the moment they are
  ready, and every in-flight best-effort persistent-worker launch gets a
  preempt signal; best-effort work runs only while the high-priority tasks
  are inactive (empty queue, nothing in flight), shaped by profiler-chosen
  launch configurations (whole, one slice at a time, or persistent workers
  resuming from the persisted task counter).
* Eager: every kernel is submitted on arrival in one priority class
  (space-sharing with no isolation).
* KernelPriority: high priority jumps the dispatch queue, but in-flight
  best-effort kernels run whole and are never preempted.
* TimeSliced: tasks take turns holding the GPU for a fixed quantum.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

from .profiler import (
    DEFAULT_THRESHOLD_NS,
    ORIGINAL,
    PTB,
    SLICED,
    ConfigCandidate,
    ProfileKey,
    Profiler,
)
from .sim import (
    BEST_EFFORT,
    HIGH,
    GpuSim,
    GpuSpec,
    KernelCostModel,
    OriginalShape,
    PtbShape,
    SimEvent,
    SimLaunch,
    ms_to_ns,
)
from .transforms import slice_extents

TALLY = "Tally"
EAGER = "Eager"
KERNEL_PRIORITY = "KernelPriority"
TIME_SLICED = "TimeSliced"
POLICIES = (TALLY, EAGER, KERNEL_PRIORITY, TIME_SLICED)

DEFAULT_QUANTUM_NS = ms_to_ns(2.0)

INFERENCE = "inference"
TRAINING = "training"


@dataclass(frozen=True)
class SchedulerConfig:
    policy: str = TALLY
    turnaround_threshold_ns: int = DEFAULT_THRESHOLD_NS
    quantum_ns: int = DEFAULT_QUANTUM_NS

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.turnaround_threshold_ns <= 0:
            raise ValueError("turnaround threshold must be > 0")
        if self.quantum_ns <= 0:
            raise ValueError("time-slice quantum must be > 0")


@dataclass(frozen=True)
class KernelWork:
    """One kernel of a request/iteration pipeline."""

    kernel_id: str
    cost: KernelCostModel
    exempt: bool = False  # inter-block-dependent: always scheduled whole

    def profile_key(self) -> ProfileKey:
        return ProfileKey(
            self.kernel_id,
            (self.cost.total_blocks, 1, 1),
            (self.cost.threads_per_block, 1, 1),
        )


@dataclass(frozen=True)
class TaskScript:
    """A task as the scheduler sees it: a kernel pipeline plus traffic.

    Inference tasks serve one pipeline instance per arrival timestamp;
    training tasks repeat the pipeline back to back until the horizon.
    """

    task_id: str
    priority: str
    kernels: tuple[KernelWork, ...]
    arrivals: tuple[int, ...] = ()  # empty = training loop

    def __post_init__(self):
        if self.priority not in (HIGH, BEST_EFFORT):
            raise ValueError(f"unknown priority {self.priority!r}")
        if not self.kernels:
            raise ValueError(f"{self.task_id}: empty kernel pipeline")
        if any(b < a for a, b in zip(self.arrivals, self.arrivals[1:])):
            raise ValueError(f"{self.task_id}: arrivals must be non-decreasing")

    @property
    def kind(self) -> str:
        return INFERENCE if self.arrivals else TRAINING


class _Request:
    """One in-service request of a concurrently-served inference task."""

    def __init__(self, arrival: int):
        self.arrival = arrival
        self.kernel_idx = 0
        self.inflight = None


class _TaskState:
    def __init__(self, script: TaskScript):
        self.script = script
        self.pending: deque[int] = deque()  # queued inference arrival times
        self.reqs: list[_Request] = []      # concurrent mode in-service set
        self.concurrent = False             # set by the runner per policy
        self.arrival: int | None = None     # arrival of the unit in service
        self.kernel_idx = 0
        self.inflight = None                # KernelHandle
        self.inflight_is_slice = False
        # per-kernel launch-config progress, reset at every kernel boundary
        self.config: ConfigCandidate | None = None
        self.tiling: tuple[int, ...] = ()
        self.slice_idx = 0
        self.ptb_counter = 0
        # outputs
        self.requests: list[tuple[int, int]] = []    # (arrival, completion)
        self.iterations: list[int] = []              # completion times

    def in_service(self) -> bool:
        return self.arrival is not None or bool(self.reqs)

    def has_queued_work(self) -> bool:
        return bool(self.pending) or self.in_service()

    def reset_kernel_progress(self):
        self.config = None
        self.tiling = ()
        self.slice_idx = 0
        self.ptb_counter = 0


@dataclass
class RunResult:
    events: list[SimEvent]
    requests: dict[str, list[tuple[int, int]]]
    iterations: dict[str, list[int]]
    horizon_ns: int


class PolicyRunner:
    """Drives one simulator instance with one policy over a task set."""

    def __init__(
        self,
        gpu: GpuSpec,
        tasks: list[TaskScript],
        config: SchedulerConfig,
        horizon_ns: int,
        profiler: Profiler | None = None,
        placement_seed: int = 0,
        record_events: bool = True,
    ):
        if len({t.task_id for t in tasks}) != len(tasks):
            raise ValueError("duplicate task ids")
        self.gpu = gpu
        self.config = config
        self.horizon_ns = horizon_ns
        self.profiler = profiler if profiler is not None else Profiler(gpu)
        self.sim = GpuSim(gpu, placement_seed=placement_seed,
                          record_events=record_events)
        self.states = [_TaskState(t) for t in tasks]
        for st in self.states:
            # inference requests are served concurrently unless the task is
            # best-effort under a priority-aware policy (one launch at a time)
            st.concurrent = (
                st.script.kind == INFERENCE
                and (st.script.priority == HIGH
                     or config.policy in (EAGER, TIME_SLICED))
            )
        self._hp_states = [s for s in self.states
                           if s.script.priority == HIGH]
        self._be_states = [s for s in self.states
                           if s.script.priority == BEST_EFFORT]
        self._rr = 0
        self._in_tick = False
        # time-sliced rotation state
        self._ts_active = 0
        self._ts_running = False
        if config.policy == TIME_SLICED:
            self.sim.dispatch_filter = self._ts_filter
        elif config.policy == KERNEL_PRIORITY:
            self.sim.dispatch_filter = self._kp_filter

    # -- public ------------------------------------------------------------

    def run(self) -> RunResult:
        for st in self.states:
            for t in st.script.arrivals:
                self.sim.call_at(t, lambda st=st, t=t: self._on_arrival(st, t))
        self.sim.observer = self._on_event
        self.sim.call_at(0, self._tick)
        self.sim.run_to_completion()
        return RunResult(
            events=self.sim.events,
            requests={s.script.task_id: s.requests for s in self.states},
            iterations={s.script.task_id: s.iterations for s in self.states},
            horizon_ns=self.horizon_ns,
        )

    # -- arrivals and the per-event control loop ---------------------------

    def _on_event(self, ev: SimEvent):
        # only kernel boundaries and worker parkings change scheduler state
        if ev.kind in ("KernelFinished", "WorkerParked"):
            self._tick()

    def _on_arrival(self, st: _TaskState, t: int):
        st.pending.append(t)
        self._tick()
        if self.config.policy == TIME_SLICED:
            self._ts_ensure_rotation()

    def _tick(self):
        if self._in_tick:
            return  # submissions inside a tick re-enter via their own events
        self._in_tick = True
        try:
            self._reconcile()
            if self.config.policy in (TALLY, KERNEL_PRIORITY):
                for st in self._hp_states:
                    self._advance(st, HIGH)
                if not self._hp_active():
                    for st in self._rr_order():
                        self._advance(st, BEST_EFFORT)
            else:  # Eager / TimeSliced: one class, no gating
                for st in self.states:
                    self._advance(st, HIGH)
        finally:
            self._in_tick = False

    def _reconcile(self):
        """Absorb finished or parked launches into task state."""
        for st in self.states:
            if st.concurrent:
                finished = []
                for rq in st.reqs:
                    h = rq.inflight
                    if h is None or not h.done:
                        continue
                    rq.inflight = None
                    rq.kernel_idx += 1
                    if rq.kernel_idx == len(st.script.kernels):
                        st.requests.append((rq.arrival, self.sim.now))
                        finished.append(rq)
                for rq in finished:
                    st.reqs.remove(rq)
                continue
            h = st.inflight
            if h is None:
                continue
            if h.parked:
                st.ptb_counter = h.task_counter
                st.inflight = None
            elif h.done:
                was_slice = st.inflight_is_slice
                st.inflight = None
                st.inflight_is_slice = False
                if was_slice:
                    st.slice_idx += 1
                    if st.slice_idx < len(st.tiling):
                        continue  # more slices of the same kernel remain
                self._kernel_completed(st)

    def _kernel_completed(self, st: _TaskState):
        st.reset_kernel_progress()
        st.kernel_idx += 1
        if st.kernel_idx < len(st.script.kernels):
            return
        # pipeline instance complete
        st.kernel_idx = 0
        st.requests.append((st.arrival, self.sim.now))
        if st.script.kind == TRAINING:
            st.iterations.append(self.sim.now)
        st.arrival = None

    # -- work selection ----------------------------------------------------

    def _hp_active(self) -> bool:
        return any(
            s.has_queued_work() or s.inflight is not None
            for s in self._hp_states
        )

    def _rr_order(self):
        n = len(self._be_states)
        return [self._be_states[(self._rr + i) % n] for i in range(n)] \
            if n else []

    def _next_work(self, st: _TaskState) -> KernelWork | None:
        if not st.in_service():
            if st.script.kind == INFERENCE:
                if not st.pending:
                    return None
                st.arrival = st.pending.popleft()
            else:
                if self.sim.now >= self.horizon_ns:
                    return None
                st.arrival = self.sim.now  # iteration start
        return st.script.kernels[st.kernel_idx]

    def _advance(self, st: _TaskState, priority_class: str):
        if st.concurrent:
            while st.pending:
                st.reqs.append(_Request(st.pending.popleft()))
            for rq in st.reqs:
                if rq.inflight is None:
                    work = st.script.kernels[rq.kernel_idx]
                    rq.inflight = self.sim.submit(
                        SimLaunch(st.script.task_id, work.kernel_id,
                                  priority_class, OriginalShape(), work.cost)
                    )
                    if priority_class == HIGH \
                            and self.config.policy == TALLY:
                        self._preempt_best_effort()
            return
        if st.inflight is not None:
            return
        work = self._next_work(st)
        if work is None:
            return
        if priority_class == BEST_EFFORT and self.config.policy == TALLY \
                and not work.exempt:
            self._submit_best_effort(st, work)
        else:
            self._submit_whole(st, work, priority_class)
        if st in self._be_states:
            self._rr = (self._be_states.index(st) + 1) % len(self._be_states)

    # -- submission paths --------------------------------------------------

    def _submit_whole(self, st: _TaskState, work: KernelWork, priority: str):
        st.inflight = self.sim.submit(
            SimLaunch(st.script.task_id, work.kernel_id, priority,
                      OriginalShape(), work.cost)
        )
        st.inflight_is_slice = False
        if priority == HIGH and self.config.policy == TALLY:
            self._preempt_best_effort()

    def _preempt_best_effort(self):
        for st in self._be_states:
            h = st.inflight
            if h is not None and h.is_ptb and not h.done and not h.preempted:
                self.sim.signal_preempt(h)

    def _submit_best_effort(self, st: _TaskState, work: KernelWork):
        if st.config is None:
            st.config = self.profiler.select(
                work.profile_key(), work.cost,
                self.config.turnaround_threshold_ns,
            )
            if st.config.variant == SLICED:
                st.tiling = tuple(
                    slice_extents(work.cost.total_blocks, st.config.fraction)
                )
                st.slice_idx = 0
        cfg = st.config
        if cfg.variant == PTB:
            shape = PtbShape(cfg.worker_count, start_count=st.ptb_counter)
            cost = work.cost
            slice_flag = False
        elif cfg.variant == SLICED:
            shape = OriginalShape()
            cost = replace(work.cost,
                           total_blocks=st.tiling[st.slice_idx])
            slice_flag = True
        else:
            shape = OriginalShape()
            cost = work.cost
            slice_flag = False
        st.inflight = self.sim.submit(
            SimLaunch(st.script.task_id, work.kernel_id, BEST_EFFORT,
                      shape, cost)
        )
        st.inflight_is_slice = slice_flag

    def _kp_filter(self, handle) -> bool:
        """Kernel-granularity priority: high priority jumps the queue, but an
        in-flight best-effort kernel keeps the GPU until it completes."""
        if handle.launch.priority != HIGH:
            return True
        return not any(
            st.inflight is not None and not st.inflight.done
            for st in self._be_states
        )

    # -- time slicing ------------------------------------------------------

    def _ts_filter(self, handle) -> bool:
        active = self.states[self._ts_active]
        return handle.launch.task_id == active.script.task_id

    def _ts_has_work(self, st: _TaskState) -> bool:
        return st.inflight is not None or st.has_queued_work() \
            or (st.script.kind == TRAINING and self.sim.now < self.horizon_ns)

    def _ts_ensure_rotation(self):
        if not self._ts_running:
            self._ts_running = True
            self.sim.call_at(self.sim.now + self.config.quantum_ns,
                             self._ts_rotate)

    def _ts_rotate(self):
        self._ts_running = False
        busy = [i for i, s in enumerate(self.states) if self._ts_has_work(s)]
        if not busy:
            return
        later = [i for i in busy if i > self._ts_active]
        self._ts_active = later[0] if later else busy[0]
        self.sim.kick()
        self._tick()
        self._ts_ensure_rotation()

    # overridden run entry for TimeSliced rotation start
    def _start_policy_clock(self):
        if self.config.policy == TIME_SLICED:
            self._ts_ensure_rotation()


def run_policy(
    gpu: GpuSpec,
    tasks: list[TaskScript],
    config: SchedulerConfig,
    horizon_ns: int,
    profiler: Profiler | None = None,
    placement_seed: int = 0,
    record_events: bool = True,
) -> RunResult:
    runner = PolicyRunner(gpu, tasks, config, horizon_ns,
                          profiler=profiler, placement_seed=placement_seed,
                          record_events=record_events)
    runner._start_policy_clock()
    return runner.run()
