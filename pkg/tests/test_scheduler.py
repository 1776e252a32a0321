"""Policy runner: Tally semantics plus the three baseline policies."""

import pytest

from tallysim.profiler import Profiler
from tallysim.scheduler import (
    EAGER,
    KERNEL_PRIORITY,
    POLICIES,
    TALLY,
    TIME_SLICED,
    KernelWork,
    SchedulerConfig,
    TaskScript,
    run_policy,
)
from tallysim.sim import (
    BEST_EFFORT,
    HIGH,
    GpuSpec,
    cost_model,
    events_to_csv,
    ms_to_ns,
)

GPU4 = GpuSpec(num_sms=4, max_threads_per_sm=128, max_blocks_per_sm=1)

HP_COST = cost_model(1.0, 1, threads_per_block=128)
BE_COST = cost_model(0.15, 108, threads_per_block=128)


def hp_task(arrivals, task_id="hp", cost=HP_COST):
    return TaskScript(task_id, HIGH, (KernelWork("hp_k", cost),),
                      tuple(arrivals))


def be_task(task_id="be", cost=BE_COST, exempt=False):
    return TaskScript(task_id, BEST_EFFORT,
                      (KernelWork(task_id + "_k", cost, exempt=exempt),))


def run(tasks, policy=TALLY, horizon_ms=20.0, **kw):
    return run_policy(GPU4, tasks, SchedulerConfig(policy=policy),
                      ms_to_ns(horizon_ms), **kw)


def events_of(result, kind, task=None):
    return [e for e in result.events
            if e.kind == kind and (task is None or e.task == task)]


class TestScripts:
    def test_arrivals_must_be_sorted(self):
        with pytest.raises(ValueError):
            hp_task([ms_to_ns(2), ms_to_ns(1)])

    def test_empty_pipeline_rejected(self):
        with pytest.raises(ValueError):
            TaskScript("t", HIGH, ())

    def test_unknown_policy_rejected(self):
        with pytest.raises(ValueError):
            SchedulerConfig(policy="Fifo")

    def test_duplicate_task_ids_rejected(self):
        with pytest.raises(ValueError):
            run([be_task("x"), be_task("x")])


class TestTally:
    def test_hp_launch_issued_at_arrival(self):
        arrival = ms_to_ns(5.0)
        res = run([hp_task([arrival]), be_task()])
        issued = events_of(res, "LaunchIssued", "hp")
        assert issued[0].time == arrival

    def test_hp_arrival_preempts_inflight_worker_launch(self):
        arrival = ms_to_ns(5.0)
        res = run([hp_task([arrival]), be_task()])
        signals = events_of(res, "PreemptSignaled", "be")
        assert signals and signals[0].time == arrival
        assert events_of(res, "WorkerParked", "be")

    def test_no_be_launch_while_hp_active(self):
        arrival = ms_to_ns(5.0)
        res = run([hp_task([arrival]), be_task()])
        hp_done = events_of(res, "KernelFinished", "hp")[0].time
        during = [e for e in events_of(res, "LaunchIssued", "be")
                  if arrival <= e.time < hp_done]
        assert during == []

    def test_hp_request_latency_bounded_by_drain(self):
        arrivals = [ms_to_ns(3.0 * i + 2.0) for i in range(5)]
        res = run([hp_task(arrivals), be_task()])
        drain = BE_COST.block_duration_ns + BE_COST.ptb_iteration_overhead_ns
        bound = HP_COST.launch_overhead_ns + HP_COST.block_duration_ns + drain
        for arr, done in res.requests["hp"]:
            assert done - arr <= bound

    def test_preempted_iterations_conserve_blocks(self):
        res = run([hp_task([ms_to_ns(3.0), ms_to_ns(9.0)]), be_task()],
                  horizon_ms=25.0)
        finished = len(events_of(res, "BlockFinished", "be"))
        assert res.iterations["be"]  # progress despite preemptions
        assert finished == BE_COST.total_blocks * len(res.iterations["be"])

    def test_round_robin_between_best_effort_tasks(self):
        cost = cost_model(0.5, 8, threads_per_block=128)
        res = run([be_task("a", cost), be_task("b", cost)], horizon_ms=15.0)
        order = [e.task for e in events_of(res, "LaunchIssued")]
        # launches strictly alternate between the two tasks
        changes = sum(1 for x, y in zip(order, order[1:]) if x != y)
        assert changes == len(order) - 1
        assert res.iterations["a"] and res.iterations["b"]

    def test_exempt_kernel_runs_whole(self):
        res = run([hp_task([ms_to_ns(5.0)]), be_task(exempt=True)])
        assert events_of(res, "WorkerParked") == []
        assert events_of(res, "PreemptSignaled") == []
        assert res.iterations["be"]


class TestBaselines:
    def test_eager_never_preempts(self):
        res = run([hp_task([ms_to_ns(5.0)]), be_task()], policy=EAGER)
        assert events_of(res, "PreemptSignaled") == []
        assert res.requests["hp"] and res.iterations["be"]

    def test_kernel_priority_waits_for_inflight_kernel(self):
        be = be_task("be", cost_model(1.0, 8, threads_per_block=128))
        res = run([hp_task([ms_to_ns(0.5)]), be], policy=KERNEL_PRIORITY,
                  horizon_ms=6.0)
        be_finish = events_of(res, "KernelFinished", "be")[0].time
        hp_start = events_of(res, "BlockStarted", "hp")[0].time
        assert hp_start >= be_finish

    def test_kernel_priority_worse_than_tally_on_long_kernels(self):
        arrivals = [ms_to_ns(4.0 * i + 2.0) for i in range(4)]
        be = be_task("be", cost_model(2.0, 16, threads_per_block=128))

        def p_worst(policy):
            res = run([hp_task(arrivals), be], policy=policy,
                      horizon_ms=30.0, record_events=False)
            return max(done - arr for arr, done in res.requests["hp"])

        assert p_worst(KERNEL_PRIORITY) > 2 * p_worst(TALLY)

    def test_time_sliced_alternates_and_both_progress(self):
        cost = cost_model(0.2, 4, threads_per_block=128)
        res = run([be_task("a", cost), be_task("b", cost)],
                  policy=TIME_SLICED, horizon_ms=20.0)
        assert res.iterations["a"] and res.iterations["b"]
        quantum = SchedulerConfig().quantum_ns
        first_quantum = {e.task for e in events_of(res, "BlockStarted")
                         if e.time < quantum}
        assert first_quantum == {"a"}


class TestDeterminism:
    @pytest.mark.parametrize("policy", POLICIES)
    def test_event_log_reproducible(self, policy):
        def one():
            prof = Profiler(GPU4, runs=2)
            res = run([hp_task([ms_to_ns(3.0), ms_to_ns(7.0)]), be_task()],
                      policy=policy, profiler=prof, horizon_ms=12.0)
            return events_to_csv(res.events)

        assert one() == one()
