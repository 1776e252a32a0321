"""Traffic generation, metric definitions, and end-to-end experiments."""

import statistics

import pytest

from tallysim.scheduler import EAGER, TALLY, KernelWork
from tallysim.sim import BEST_EFFORT, HIGH, GpuSpec, cost_model, ms_to_ns
from tallysim.workloads import (
    MetricsError,
    RunResult,
    TraceSpec,
    WorkloadSpec,
    compute_metrics,
    compute_task_metrics,
    generate_arrivals,
    load_trace,
    p99_nearest_rank,
    report_csv_rows,
    run_experiment,
)

GPU4 = GpuSpec(num_sms=4, max_threads_per_sm=128, max_blocks_per_sm=1)


def serve_workload(load=0.5):
    return WorkloadSpec(
        "serve", "inference", HIGH,
        (KernelWork("serve_k", cost_model(1.0, 1, threads_per_block=128)),),
        TraceSpec(load=load),
    )


def train_workload(name="train"):
    return WorkloadSpec(
        name, "training", BEST_EFFORT,
        (KernelWork(name + "_k",
                    cost_model(0.15, 108, threads_per_block=128)),),
    )


class TestTraces:
    def test_trace_spec_exclusive_source(self):
        with pytest.raises(ValueError):
            TraceSpec()
        with pytest.raises(ValueError):
            TraceSpec(load=0.5, path="x.csv")
        with pytest.raises(ValueError):
            TraceSpec(load=1.5)

    def test_poisson_mean_interarrival(self):
        latency = ms_to_ns(3.93)
        arrivals = generate_arrivals(0.5, latency, ms_to_ns(60_000), seed=1)
        gaps = [b - a for a, b in zip(arrivals, arrivals[1:])]
        mean = statistics.fmean(gaps)
        # rate = load / latency, so mean gap = latency / load = 7.86 ms
        assert mean == pytest.approx(latency / 0.5, rel=0.05)

    def test_poisson_deterministic_per_seed(self):
        a = generate_arrivals(0.3, ms_to_ns(1.0), ms_to_ns(500), seed=7)
        b = generate_arrivals(0.3, ms_to_ns(1.0), ms_to_ns(500), seed=7)
        c = generate_arrivals(0.3, ms_to_ns(1.0), ms_to_ns(500), seed=8)
        assert a == b
        assert a != c
        assert all(t < ms_to_ns(500) for t in a)

    def test_load_trace_parses_and_rescales(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("0.5\n\n1.5\n4.0\n")
        assert load_trace(str(p)) == (500_000, 1_500_000, 4_000_000)
        assert load_trace(str(p), rescale=2.0) == \
            (1_000_000, 3_000_000, 8_000_000)

    def test_load_trace_rejects_bad_lines(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("1.0\nnope\n")
        with pytest.raises(ValueError, match="malformed"):
            load_trace(str(bad))
        bad.write_text("2.0\n1.0\n")
        with pytest.raises(ValueError, match="decreasing"):
            load_trace(str(bad))


class TestMetrics:
    def test_p99_nearest_rank(self):
        assert p99_nearest_rank(list(range(1, 101))) == 99
        assert p99_nearest_rank([5]) == 5
        assert p99_nearest_rank([3, 1, 2]) == 3
        with pytest.raises(MetricsError):
            p99_nearest_rank([])

    def test_warmup_discard_and_throughput(self):
        horizon = ms_to_ns(100)
        # one early request (discarded from p99) and ten steady ones
        reqs = [(0, ms_to_ns(50))] + [
            (ms_to_ns(10 + 5 * i), ms_to_ns(11 + 5 * i)) for i in range(10)
        ]
        result = RunResult(events=[], requests={"t": reqs},
                           iterations={"t": []}, horizon_ns=horizon)
        tm = compute_task_metrics(result)["t"]
        assert tm.p99_latency_ns == ms_to_ns(1)
        assert tm.completed == 11  # the early request completes in-window
        assert tm.throughput_per_s == pytest.approx(11 / 0.090)

    def test_no_samples_raises(self):
        result = RunResult(events=[], requests={"t": []},
                           iterations={"t": []}, horizon_ns=ms_to_ns(10))
        with pytest.raises(MetricsError):
            compute_task_metrics(result)

    def test_normalization_against_calibration(self):
        horizon = ms_to_ns(100)
        reqs = [(ms_to_ns(10 + i), ms_to_ns(11 + i)) for i in range(50)]
        result = RunResult(events=[], requests={"t": reqs},
                           iterations={"t": []}, horizon_ns=horizon)
        calibration = compute_task_metrics(result)
        m = compute_metrics(result, calibration)
        assert m.normalized["t"] == pytest.approx(1.0)
        assert m.system_throughput == pytest.approx(1.0)


class TestExperiments:
    HORIZON = ms_to_ns(3_000)

    def run_pair(self, policy):
        return run_experiment(GPU4, [serve_workload(), train_workload()],
                              [policy], self.HORIZON, seed=0)[0]

    def test_single_task_alone_is_ideal(self):
        reports = run_experiment(GPU4, [serve_workload()], [TALLY],
                                 self.HORIZON)
        m = reports[0].metrics
        assert m.normalized["serve"] == pytest.approx(1.0, abs=0.02)
        assert m.system_throughput == pytest.approx(1.0, abs=0.02)

    def test_colocated_normalized_bounded(self):
        report = self.run_pair(TALLY)
        for task, norm in report.metrics.normalized.items():
            assert 0 < norm <= 1.02, (task, norm)

    def test_tally_beats_eager_on_hp_latency(self):
        tally = self.run_pair(TALLY)
        eager = self.run_pair(EAGER)
        assert tally.metrics.per_task["serve"].p99_latency_ns <= \
            eager.metrics.per_task["serve"].p99_latency_ns

    def test_csv_rows_deterministic(self):
        rows_a = report_csv_rows(self.run_pair(TALLY))
        rows_b = report_csv_rows(self.run_pair(TALLY))
        assert rows_a == rows_b
        assert all(r.startswith("Tally,") for r in rows_a)
        assert len(rows_a) == 2

    def test_duplicate_workload_names_rejected(self):
        with pytest.raises(ValueError):
            run_experiment(GPU4, [train_workload(), train_workload()],
                           [TALLY], self.HORIZON)

    def test_workload_spec_validation(self):
        with pytest.raises(ValueError):
            WorkloadSpec("w", "inference", HIGH,
                         (KernelWork("k", cost_model(1.0, 1)),))  # no trace
        with pytest.raises(ValueError):
            WorkloadSpec("w", "training", BEST_EFFORT,
                         (KernelWork("k", cost_model(1.0, 1)),),
                         TraceSpec(load=0.5))
