"""Workload construction, traffic generation, and metric computation.

Inference tasks serve request pipelines at Poisson or trace-replay arrival
times; training tasks iterate their kernel pipeline continuously.  Load is
the fraction of time the inference service is busy when served in
isolation, so synthetic arrivals use rate = load / request_latency.
Metrics: nearest-rank p99 request latency, per-task throughput normalized
against an isolated calibration run, and system throughput as the sum of
normalized throughputs.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

from .profiler import ORIGINAL, ConfigCandidate, Profiler
from .scheduler import (
    INFERENCE,
    TRAINING,
    KernelWork,
    PolicyRunner,
    RunResult,
    SchedulerConfig,
    TaskScript,
    run_policy,
)
from .sim import BEST_EFFORT, HIGH, GpuSpec, NS_PER_S, ns_to_ms


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class TraceSpec:
    """Arrival source: synthetic Poisson at a target load, or a CSV file of
    non-decreasing millisecond timestamps (optionally time-rescaled)."""

    load: float | None = None
    seed: int = 0
    path: str | None = None
    rescale: float = 1.0

    def __post_init__(self):
        if (self.load is None) == (self.path is None):
            raise ValueError("exactly one of load (synthetic) or path (file)")
        if self.load is not None and not 0 < self.load < 1:
            raise ValueError(f"load must be in (0, 1), got {self.load}")
        if self.rescale <= 0:
            raise ValueError("rescale must be > 0")


@dataclass(frozen=True)
class WorkloadSpec:
    name: str
    kind: str                       # inference | training
    priority: str                   # High | BestEffort
    kernels: tuple[KernelWork, ...]
    trace: TraceSpec | None = None  # inference only

    def __post_init__(self):
        if self.kind not in (INFERENCE, TRAINING):
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.priority not in (HIGH, BEST_EFFORT):
            raise ValueError(f"unknown priority {self.priority!r}")
        if not self.kernels:
            raise ValueError(f"{self.name}: empty kernel pipeline")
        if self.kind == INFERENCE and self.trace is None:
            raise ValueError(f"{self.name}: inference workload needs a trace")
        if self.kind == TRAINING and self.trace is not None:
            raise ValueError(f"{self.name}: training workload takes no trace")


def generate_arrivals(
    load: float, request_latency_ns: int, duration_ns: int, seed: int
) -> tuple[int, ...]:
    """Seeded Poisson arrival process with rate = load / request_latency."""
    if not 0 < load < 1:
        raise ValueError(f"load must be in (0, 1), got {load}")
    if request_latency_ns <= 0:
        raise ValueError("request latency must be > 0")
    rng = random.Random(seed)
    rate = load / request_latency_ns  # arrivals per ns
    out = []
    t = 0.0
    while True:
        t += rng.expovariate(rate)
        if t >= duration_ns:
            break
        out.append(round(t))
    return tuple(out)


def load_trace(path: str, rescale: float = 1.0) -> tuple[int, ...]:
    """Parse a CSV of non-decreasing millisecond timestamps, one per line."""
    stamps_ms = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                value = float(line)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed timestamp "
                                 f"{line!r}") from None
            if value < 0:
                raise ValueError(f"{path}:{lineno}: negative timestamp")
            if stamps_ms and value < stamps_ms[-1]:
                raise ValueError(f"{path}:{lineno}: decreasing timestamp")
            stamps_ms.append(value)
    return tuple(round(ms * rescale * 1_000_000) for ms in stamps_ms)


def p99_nearest_rank(latencies) -> int:
    """99th percentile by the nearest-rank method on the sorted sample."""
    if not latencies:
        raise MetricsError("no samples for percentile computation")
    ordered = sorted(latencies)
    rank = math.ceil(0.99 * len(ordered))
    return ordered[rank - 1]


@dataclass(frozen=True)
class TaskMetrics:
    p99_latency_ns: int
    throughput_per_s: float
    completed: int


@dataclass(frozen=True)
class Metrics:
    per_task: dict[str, TaskMetrics]
    normalized: dict[str, float]
    system_throughput: float


def compute_task_metrics(
    result: RunResult, warmup_frac: float = 0.1
) -> dict[str, TaskMetrics]:
    """Per-task p99 and throughput over the window after warm-up discard."""
    horizon = result.horizon_ns
    warmup = round(horizon * warmup_frac)
    span_s = (horizon - warmup) / NS_PER_S
    out = {}
    for task, records in result.requests.items():
        sample = [(a, c) for a, c in records if warmup <= a]
        if not sample:
            raise MetricsError(f"{task}: no completed requests in window")
        latencies = [c - a for a, c in sample]
        completed = sum(1 for a, c in records if warmup <= c <= horizon)
        out[task] = TaskMetrics(
            p99_latency_ns=p99_nearest_rank(latencies),
            throughput_per_s=completed / span_s,
            completed=completed,
        )
    return out


def compute_metrics(
    result: RunResult,
    calibration: dict[str, TaskMetrics],
    warmup_frac: float = 0.1,
) -> Metrics:
    per_task = compute_task_metrics(result, warmup_frac)
    normalized = {}
    for task, tm in per_task.items():
        base = calibration[task].throughput_per_s
        if base <= 0:
            raise MetricsError(f"{task}: zero calibration throughput")
        normalized[task] = tm.throughput_per_s / base
    return Metrics(
        per_task=per_task,
        normalized=normalized,
        system_throughput=sum(normalized.values()),
    )


@dataclass(frozen=True)
class ExperimentReport:
    policy: str
    metrics: Metrics
    calibration: dict[str, TaskMetrics]
    result: RunResult


CSV_HEADER = "policy,task,p99_ms,norm_throughput,system_throughput"


def report_csv_rows(report: ExperimentReport) -> list[str]:
    rows = []
    for task in sorted(report.metrics.per_task):
        tm = report.metrics.per_task[task]
        rows.append(
            f"{report.policy},{task},{ns_to_ms(tm.p99_latency_ns):.6f},"
            f"{report.metrics.normalized[task]:.6f},"
            f"{report.metrics.system_throughput:.6f}"
        )
    return rows


def isolated_request_latency_ns(
    profiler: Profiler, kernels: tuple[KernelWork, ...]
) -> int:
    """Sum of isolated untransformed completion latencies of the pipeline."""
    total = 0
    for work in kernels:
        records = profiler.profile(work.profile_key(), work.cost)
        original = [r for r in records if r.candidate.variant == ORIGINAL]
        total += original[0].kernel_latency_ns
    return total


def build_task_scripts(
    workloads: list[WorkloadSpec],
    profiler: Profiler,
    horizon_ns: int,
    seed: int,
) -> list[TaskScript]:
    scripts = []
    for idx, spec in enumerate(workloads):
        arrivals: tuple[int, ...] = ()
        if spec.kind == INFERENCE:
            trace = spec.trace
            if trace.path is not None:
                arrivals = load_trace(trace.path, trace.rescale)
            else:
                latency = isolated_request_latency_ns(profiler, spec.kernels)
                arrivals = generate_arrivals(
                    trace.load, latency, horizon_ns,
                    seed=seed * 1000 + trace.seed + idx,
                )
            arrivals = tuple(t for t in arrivals if t < horizon_ns)
        scripts.append(
            TaskScript(spec.name, spec.priority, spec.kernels, arrivals)
        )
    return scripts


def run_experiment(
    gpu: GpuSpec,
    workloads: list[WorkloadSpec],
    policies: list[str],
    horizon_ns: int,
    seed: int = 0,
    turnaround_threshold_ns: int | None = None,
    quantum_ns: int | None = None,
    warmup_frac: float = 0.1,
    record_events: bool = False,
) -> list[ExperimentReport]:
    """Calibrate each task in isolation, run the co-located scenario per
    policy, and compute normalized metrics."""
    if len({w.name for w in workloads}) != len(workloads):
        raise ValueError("duplicate workload names")
    profiler = Profiler(gpu)
    scripts = build_task_scripts(workloads, profiler, horizon_ns, seed)

    reports = []
    for policy in policies:
        kwargs = {"policy": policy}
        if turnaround_threshold_ns is not None:
            kwargs["turnaround_threshold_ns"] = turnaround_threshold_ns
        if quantum_ns is not None:
            kwargs["quantum_ns"] = quantum_ns
        config = SchedulerConfig(**kwargs)

        calibration = {}
        for script in scripts:
            solo = run_policy(gpu, [script], config, horizon_ns,
                              profiler=profiler, placement_seed=seed,
                              record_events=False)
            calibration[script.task_id] = \
                compute_task_metrics(solo, warmup_frac)[script.task_id]

        result = run_policy(gpu, list(scripts), config, horizon_ns,
                            profiler=profiler, placement_seed=seed,
                            record_events=record_events)
        metrics = compute_metrics(result, calibration, warmup_frac)
        reports.append(ExperimentReport(policy, metrics, calibration, result))
    return reports
