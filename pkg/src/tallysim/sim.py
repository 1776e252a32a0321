"""Deterministic discrete-event model of one GPU.

SMs expose block slots; launches on two priority streams place blocks into
free slots at every dispatch instant, high priority strictly first.  Time is
integer nanoseconds; event order is total via (time, sequence number), so
identical inputs produce bit-identical event logs.

Three launch shapes are modeled:

* Original: all blocks of the grid, placed as slots allow.
* Sliced: sub-kernels issued strictly one at a time, each paying the launch
  overhead.
* Ptb: a fixed set of persistent workers serially claiming task indices from
  a counter that survives preemption; a preempt signal makes each worker
  finish its current block and park.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


def ms_to_ns(ms: float) -> int:
    return round(ms * NS_PER_MS)


def ns_to_ms(ns: int) -> float:
    return ns / NS_PER_MS


HIGH = "High"
BEST_EFFORT = "BestEffort"

LAUNCH_ISSUED = "LaunchIssued"
BLOCK_STARTED = "BlockStarted"
BLOCK_FINISHED = "BlockFinished"
KERNEL_FINISHED = "KernelFinished"
PREEMPT_SIGNALED = "PreemptSignaled"
WORKER_PARKED = "WorkerParked"

# non-physical calibration knobs; both are config parameters
DEFAULT_LAUNCH_OVERHEAD_NS = 5 * NS_PER_US


def default_ptb_iteration_overhead_ns(block_duration_ns: int) -> int:
    return block_duration_ns // 50 + NS_PER_US


@dataclass(frozen=True)
class GpuSpec:
    num_sms: int
    max_threads_per_sm: int
    max_blocks_per_sm: int

    def __post_init__(self):
        if min(self.num_sms, self.max_threads_per_sm, self.max_blocks_per_sm) < 1:
            raise ValueError(f"all GpuSpec fields must be >= 1: {self}")

    def occupancy_limit(self, threads_per_block: int) -> int:
        """Resident blocks per SM for a kernel with the given block size."""
        if threads_per_block < 1:
            raise ValueError("threads_per_block must be >= 1")
        return min(self.max_blocks_per_sm,
                   self.max_threads_per_sm // threads_per_block)

    @property
    def total_slots(self) -> int:
        return self.num_sms * self.max_blocks_per_sm


@dataclass(frozen=True)
class KernelCostModel:
    block_duration_ns: int
    launch_overhead_ns: int
    ptb_iteration_overhead_ns: int
    threads_per_block: int
    total_blocks: int

    def __post_init__(self):
        if self.block_duration_ns < 0 or self.launch_overhead_ns < 0 \
                or self.ptb_iteration_overhead_ns < 0:
            raise ValueError("durations must be non-negative")
        if self.total_blocks < 1 or self.threads_per_block < 1:
            raise ValueError("block counts must be >= 1")


def cost_model(
    block_duration_ms: float,
    total_blocks: int,
    threads_per_block: int = 32,
    launch_overhead_ms: float | None = None,
    ptb_iteration_overhead_ms: float | None = None,
) -> KernelCostModel:
    """Convenience constructor taking milliseconds and default overheads."""
    d = ms_to_ns(block_duration_ms)
    return KernelCostModel(
        block_duration_ns=d,
        launch_overhead_ns=DEFAULT_LAUNCH_OVERHEAD_NS
        if launch_overhead_ms is None else ms_to_ns(launch_overhead_ms),
        ptb_iteration_overhead_ns=default_ptb_iteration_overhead_ns(d)
        if ptb_iteration_overhead_ms is None
        else ms_to_ns(ptb_iteration_overhead_ms),
        threads_per_block=threads_per_block,
        total_blocks=total_blocks,
    )


@dataclass(frozen=True)
class OriginalShape:
    pass


@dataclass(frozen=True)
class SlicedShape:
    sub_blocks: tuple[int, ...]

    def __post_init__(self):
        if not self.sub_blocks or min(self.sub_blocks) < 1:
            raise ValueError("sub-launch block counts must be >= 1")


@dataclass(frozen=True)
class PtbShape:
    worker_count: int
    start_count: int = 0  # persisted task counter from a preempted launch

    def __post_init__(self):
        if self.worker_count < 1:
            raise ValueError("worker count must be >= 1")
        if self.start_count < 0:
            raise ValueError("persisted counter must be >= 0")


@dataclass(frozen=True)
class SimLaunch:
    task_id: str
    kernel_id: str
    priority: str
    shape: object
    cost: KernelCostModel

    def __post_init__(self):
        if self.priority not in (HIGH, BEST_EFFORT):
            raise ValueError(f"unknown priority {self.priority!r}")
        if isinstance(self.shape, SlicedShape) \
                and sum(self.shape.sub_blocks) != self.cost.total_blocks:
            raise ValueError("sliced sub-launch blocks must sum to total_blocks")


@dataclass(frozen=True)
class SimEvent:
    time: int
    seq: int
    kind: str
    task: str
    kernel: str
    block: int  # block/task/worker index, -1 where not applicable

    def csv_row(self) -> str:
        return f"{self.time},{self.kind},{self.task},{self.kernel},{self.block}"


def events_to_csv(events) -> str:
    lines = ["time_ns,kind,task,kernel,block"]
    lines.extend(e.csv_row() for e in events)
    return "\n".join(lines) + "\n"


class KernelHandle:
    """In-flight (or finished) launch state tracked by the simulator."""

    def __init__(self, launch: SimLaunch, submit_time: int, uid: int):
        self.launch = launch
        self.uid = uid
        self.submit_time = submit_time
        self.cost = launch.cost
        self.shape = launch.shape
        self.ready = False           # past launch overhead of current (sub)kernel
        self.done = False
        self.finish_time: int | None = None
        self.blocks_finished = 0
        self.sub_completions: list[int] = []   # sliced: completion time per sub
        # original / sliced placement cursor
        self.next_block = 0
        self.current_sub = 0
        self.sub_placed = 0
        self.sub_finished = 0
        # ptb state
        self.task_counter = launch.shape.start_count \
            if isinstance(launch.shape, PtbShape) else 0
        self.workers_placed = 0
        self.workers_active = 0
        self.preempted = False
        self.preempt_time: int | None = None
        self.parked = False
        self.park_times: list[int] = []

    @property
    def is_ptb(self):
        return isinstance(self.shape, PtbShape)

    @property
    def is_sliced(self):
        return isinstance(self.shape, SlicedShape)

    def unplaced_blocks(self) -> int:
        """Blocks (or workers) submitted but not yet started; drives the
        priority-dominance rule."""
        if self.done or self.parked:
            return 0
        if self.is_ptb:
            if self.preempted:
                return 0
            return self.shape.worker_count - self.workers_placed
        if self.is_sliced:
            remaining_current = self.shape.sub_blocks[self.current_sub] \
                - self.sub_placed
            later = sum(self.shape.sub_blocks[self.current_sub + 1:])
            return remaining_current + later
        return self.cost.total_blocks - self.next_block


class GpuSim:
    def __init__(self, gpu: GpuSpec, placement_seed: int = 0,
                 record_events: bool = True):
        self.gpu = gpu
        self.now = 0
        self._seq = 0
        self._heap: list = []
        self.record_events = record_events
        self.events: list[SimEvent] = []
        self._event_count = 0
        self.observer = None
        self._uid = 0
        self.handles: list[KernelHandle] = []
        self._hp: list[KernelHandle] = []
        self._be: list[KernelHandle] = []
        # per-SM resident blocks and the tightest occupancy limit among them
        self._sm_used = [0] * gpu.num_sms
        self._sm_limits: list[list[int]] = [[] for _ in range(gpu.num_sms)]
        order = list(range(gpu.num_sms))
        random.Random(placement_seed).shuffle(order)
        self._sm_order = order
        self.dispatch_filter = None  # optional handle predicate (policies)

    # -- event plumbing ----------------------------------------------------

    def _schedule(self, time: int, fn) -> None:
        heapq.heappush(self._heap, (time, self._seq, fn))
        self._seq += 1

    def call_at(self, time: int, fn) -> None:
        """Register an external callback (arrivals, policy timers)."""
        if time < self.now:
            raise ValueError(f"cannot schedule at {time} < now {self.now}")
        self._schedule(time, fn)

    def _log(self, kind: str, handle: KernelHandle | None, block: int = -1,
             task: str = "", kernel: str = "") -> None:
        if not self.record_events and self.observer is None:
            self._event_count += 1
            return
        if handle is not None:
            task, kernel = handle.launch.task_id, handle.launch.kernel_id
        ev = SimEvent(self.now, self._event_count, kind, task, kernel, block)
        self._event_count += 1
        if self.record_events:
            self.events.append(ev)
        if self.observer is not None:
            self.observer(ev)

    def run_until(self, t: int) -> list[SimEvent]:
        """Advance through every event at time <= t; returns new events."""
        if t < self.now:
            raise ValueError(f"cannot run backwards to {t} < now {self.now}")
        mark = len(self.events)
        while self._heap and self._heap[0][0] <= t:
            time, _, fn = heapq.heappop(self._heap)
            self.now = time
            fn()
        self.now = t
        return self.events[mark:]

    def run_to_completion(self) -> list[SimEvent]:
        mark = len(self.events)
        while self._heap:
            time, _, fn = heapq.heappop(self._heap)
            self.now = time
            fn()
        return self.events[mark:]

    def kick(self) -> None:
        """Re-run dispatch, e.g. after a policy changed dispatch_filter."""
        self._dispatch()

    # -- submission --------------------------------------------------------

    def submit(self, launch: SimLaunch, at: int | None = None) -> KernelHandle:
        at = self.now if at is None else at
        if at < self.now:
            raise ValueError(f"cannot submit at {at} < now {self.now}")
        if self.gpu.occupancy_limit(launch.cost.threads_per_block) < 1:
            raise ValueError(
                f"{launch.kernel_id}: {launch.cost.threads_per_block} threads "
                "per block exceeds the GPU limit"
            )
        handle = KernelHandle(launch, at, self._uid)
        self._uid += 1
        self.handles.append(handle)
        (self._hp if launch.priority == HIGH else self._be).append(handle)
        self._schedule(at, lambda: self._issue(handle))
        return handle

    def _issue(self, handle: KernelHandle) -> None:
        self._log(LAUNCH_ISSUED, handle)
        self._schedule(self.now + handle.cost.launch_overhead_ns,
                       lambda: self._mark_ready(handle))

    def _mark_ready(self, handle: KernelHandle) -> None:
        handle.ready = True
        self._dispatch()

    def signal_preempt(self, handle: KernelHandle, at: int | None = None) -> None:
        """Raise the preemption flag of an in-flight Ptb launch."""
        if not handle.is_ptb:
            raise ValueError(f"{handle.launch.kernel_id}: not a Ptb launch")
        if handle.done:
            raise ValueError(f"{handle.launch.kernel_id}: not in flight")
        at = self.now if at is None else at
        self._schedule(at, lambda: self._do_preempt(handle))

    def _do_preempt(self, handle: KernelHandle) -> None:
        if handle.done or handle.preempted:
            return
        handle.preempted = True
        handle.preempt_time = self.now
        self._log(PREEMPT_SIGNALED, handle)
        if handle.workers_active == 0:
            self._finish_parking(handle)
        self._dispatch()

    def _finish_parking(self, handle: KernelHandle) -> None:
        handle.parked = True
        if not handle.park_times:
            handle.park_times.append(self.now)

    # -- dispatch ----------------------------------------------------------

    def _find_sm(self, limit: int) -> int | None:
        for sm in self._sm_order:
            cap = min([limit] + self._sm_limits[sm])
            if self._sm_used[sm] < cap:
                return sm
        return None

    def _occupy(self, sm: int, limit: int) -> None:
        self._sm_used[sm] += 1
        self._sm_limits[sm].append(limit)

    def _release(self, sm: int, limit: int) -> None:
        self._sm_used[sm] -= 1
        self._sm_limits[sm].remove(limit)

    def _hp_starved(self) -> bool:
        # a submitted HP launch still inside its launch-overhead window also
        # counts as having unplaced blocks; launches currently excluded by
        # the dispatch filter exert no pressure
        return any(
            h.unplaced_blocks() > 0
            for h in self._hp
            if not h.done and (self.dispatch_filter is None
                               or self.dispatch_filter(h))
        )

    def _dispatch(self) -> None:
        for queue, is_hp in ((self._hp, True), (self._be, False)):
            if not is_hp and self._hp_starved():
                return
            for handle in queue:
                if handle.done or not handle.ready:
                    continue
                if self.dispatch_filter is not None \
                        and not self.dispatch_filter(handle):
                    continue
                self._place_blocks(handle)
        self._hp = [h for h in self._hp if not h.done]
        self._be = [h for h in self._be if not h.done]

    def _place_blocks(self, handle: KernelHandle) -> None:
        limit = self.gpu.occupancy_limit(handle.cost.threads_per_block)
        if handle.is_ptb:
            while not handle.preempted \
                    and handle.workers_placed < handle.shape.worker_count \
                    and handle.task_counter < handle.cost.total_blocks:
                sm = self._find_sm(limit)
                if sm is None:
                    return
                handle.workers_placed += 1
                handle.workers_active += 1
                self._occupy(sm, limit)
                self._worker_claim(handle, sm, limit)
            if handle.workers_placed == 0:
                if handle.preempted:
                    self._finish_parking(handle)
                elif handle.task_counter >= handle.cost.total_blocks:
                    # resumed with no work left (counter already at total)
                    self._kernel_finished(handle)
            return
        if handle.is_sliced:
            sub_total = handle.shape.sub_blocks[handle.current_sub]
            while handle.sub_placed < sub_total:
                sm = self._find_sm(limit)
                if sm is None:
                    return
                block = handle.next_block
                handle.next_block += 1
                handle.sub_placed += 1
                self._start_block(handle, sm, limit, block, sliced=True)
            return
        while handle.next_block < handle.cost.total_blocks:
            sm = self._find_sm(limit)
            if sm is None:
                return
            block = handle.next_block
            handle.next_block += 1
            self._start_block(handle, sm, limit, block)

    # -- original / sliced blocks ------------------------------------------

    def _start_block(self, handle, sm, limit, block, sliced=False):
        self._occupy(sm, limit)
        self._log(BLOCK_STARTED, handle, block)
        end = self.now + handle.cost.block_duration_ns
        self._schedule(end, lambda: self._finish_block(handle, sm, limit, block,
                                                       sliced))

    def _finish_block(self, handle, sm, limit, block, sliced):
        self._release(sm, limit)
        handle.blocks_finished += 1
        self._log(BLOCK_FINISHED, handle, block)
        if sliced:
            handle.sub_finished += 1
            if handle.sub_finished == handle.shape.sub_blocks[handle.current_sub]:
                handle.sub_completions.append(self.now)
                if handle.current_sub + 1 < len(handle.shape.sub_blocks):
                    handle.current_sub += 1
                    handle.sub_placed = 0
                    handle.sub_finished = 0
                    handle.ready = False
                    self._issue_sub(handle)
                else:
                    self._kernel_finished(handle)
        elif handle.blocks_finished == handle.cost.total_blocks:
            self._kernel_finished(handle)
        self._dispatch()

    def _issue_sub(self, handle):
        self._log(LAUNCH_ISSUED, handle, handle.current_sub)
        self._schedule(self.now + handle.cost.launch_overhead_ns,
                       lambda: self._mark_ready(handle))

    def _kernel_finished(self, handle):
        handle.done = True
        handle.finish_time = self.now
        self._log(KERNEL_FINISHED, handle)

    # -- ptb workers -------------------------------------------------------

    def _worker_claim(self, handle, sm, limit):
        if handle.preempted or handle.task_counter >= handle.cost.total_blocks:
            self._worker_stop(handle, sm, limit)
            return
        task = handle.task_counter
        handle.task_counter += 1
        self._log(BLOCK_STARTED, handle, task)
        end = self.now + handle.cost.block_duration_ns \
            + handle.cost.ptb_iteration_overhead_ns
        self._schedule(end, lambda: self._worker_block_done(handle, sm, limit,
                                                            task))

    def _worker_block_done(self, handle, sm, limit, task):
        handle.blocks_finished += 1
        self._log(BLOCK_FINISHED, handle, task)
        self._worker_claim(handle, sm, limit)

    def _worker_stop(self, handle, sm, limit):
        self._release(sm, limit)
        handle.workers_active -= 1
        # a preempt raised after the last task index was claimed does not
        # prevent completion: no work remains to hand back
        work_remains = handle.task_counter < handle.cost.total_blocks
        if handle.preempted and work_remains:
            handle.park_times.append(self.now)
            self._log(WORKER_PARKED, handle)
            if handle.workers_active == 0:
                handle.parked = True
        elif handle.workers_active == 0 and not handle.done:
            self._kernel_finished(handle)
        self._dispatch()

    # -- measurements ------------------------------------------------------

    def measured_turnaround(self, handle: KernelHandle, signal_time: int) -> int:
        """Time from the preempt signal until the launch released its slots."""
        if handle.is_ptb:
            if handle.park_times:
                return max(handle.park_times) - signal_time
            if handle.finish_time is not None:
                # preempt landed after the last task claim; the launch
                # released its slots by completing
                return handle.finish_time - signal_time
            raise ValueError("no preemption recorded for this launch")
        if handle.is_sliced:
            later = [t for t in handle.sub_completions if t >= signal_time]
            if not later:
                raise ValueError("no sub-kernel completion after signal time")
            return min(later) - signal_time
        if handle.finish_time is None:
            raise ValueError("kernel has not finished")
        return handle.finish_time - signal_time
