"""Command-line entry point: kernel transformation and interpretation tools
plus the experiment runner and sweep driver.

Exit codes: 0 success, 1 runtime failure, 2 validation failure (bad config,
malformed kernel, bad flags), 3 transformation refused.  Output files are
written via a temporary file and an atomic rename, so failures never leave
partial outputs behind.  Set TALLYSIM_LOG=debug|info|warning|error for
logging verbosity.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from fractions import Fraction

from .ir.core import Dim3, KernelValidationError, LaunchSpec, COMPLETED
from .ir.interp import interpret
from .ir.text import ParseError, emit_kernel, parse_kernel
from .profiler import DEFAULT_THRESHOLD_NS, Profiler
from .scheduler import (
    EAGER,
    KERNEL_PRIORITY,
    POLICIES,
    TALLY,
    TIME_SLICED,
    KernelWork,
)
from .sim import (
    BEST_EFFORT,
    HIGH,
    GpuSpec,
    cost_model,
    events_to_csv,
    ms_to_ns,
)
from .transforms import TransformError, make_preemptible, slice_kernel, \
    unify_synchronization
from .workloads import (
    CSV_HEADER,
    TraceSpec,
    WorkloadSpec,
    report_csv_rows,
    run_experiment,
)

log = logging.getLogger("tallysim.cli")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2
EXIT_REFUSED = 3

CONFIG_SCHEMA_VERSION = 1

THRESHOLD_SWEEP_MS = (0.01, 0.0316, 0.1, 0.316, 1.0, 3.16, 10.0)


class ConfigError(ValueError):
    pass


def _setup_logging() -> None:
    level = os.environ.get("TALLYSIM_LOG", "warning").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        level = "WARNING"
    logging.basicConfig(
        level=getattr(logging, level),
        format="%(levelname)s %(name)s: %(message)s",
    )


def write_atomic(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


# -- experiment config -----------------------------------------------------


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return doc[key]


def parse_gpu(doc: dict) -> GpuSpec:
    try:
        return GpuSpec(
            num_sms=int(_require(doc, "num_sms", "gpu")),
            max_threads_per_sm=int(_require(doc, "max_threads_per_sm", "gpu")),
            max_blocks_per_sm=int(_require(doc, "max_blocks_per_sm", "gpu")),
        )
    except ValueError as e:
        raise ConfigError(f"gpu: {e}") from None


def parse_kernel_work(doc: dict, where: str) -> KernelWork:
    try:
        cost = cost_model(
            block_duration_ms=float(_require(doc, "block_duration_ms", where)),
            total_blocks=int(_require(doc, "total_blocks", where)),
            threads_per_block=int(doc.get("threads_per_block", 32)),
            launch_overhead_ms=doc.get("launch_overhead_ms"),
            ptb_iteration_overhead_ms=doc.get("ptb_iteration_overhead_ms"),
        )
        return KernelWork(
            kernel_id=str(_require(doc, "kernel_id", where)),
            cost=cost,
            exempt=bool(doc.get("exempt", False)),
        )
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None


def parse_workload(doc: dict) -> WorkloadSpec:
    name = str(_require(doc, "name", "workload"))
    where = f"workload {name!r}"
    kind = str(_require(doc, "kind", where))
    priority = {"high": HIGH, "best_effort": BEST_EFFORT}.get(
        str(_require(doc, "priority", where)).lower()
    )
    if priority is None:
        raise ConfigError(f"{where}: priority must be high or best_effort")
    kernels = tuple(
        parse_kernel_work(k, f"{where} kernel {i}")
        for i, k in enumerate(_require(doc, "kernels", where))
    )
    trace = None
    if "trace" in doc and doc["trace"] is not None:
        t = doc["trace"]
        try:
            trace = TraceSpec(
                load=t.get("load"),
                seed=int(t.get("seed", 0)),
                path=t.get("path"),
                rescale=float(t.get("rescale", 1.0)),
            )
        except ValueError as e:
            raise ConfigError(f"{where}: trace: {e}") from None
    try:
        return WorkloadSpec(name, kind, priority, kernels, trace)
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    version = doc.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"{path}: unsupported schema_version {version!r} "
            f"(expected {CONFIG_SCHEMA_VERSION})"
        )
    return doc


def config_hash(doc: dict) -> str:
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def apply_overrides(doc: dict, args) -> dict:
    doc = json.loads(json.dumps(doc))  # deep copy
    if getattr(args, "policy", None):
        doc["policies"] = [args.policy]
    if getattr(args, "threshold_ms", None) is not None:
        doc.setdefault("scheduler", {})["threshold_ms"] = args.threshold_ms
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "duration_s", None) is not None:
        doc["duration_s"] = args.duration_s
    if getattr(args, "load", None) is not None:
        _override_traces(doc, load=args.load)
    if getattr(args, "trace", None):
        _override_traces(doc, path=args.trace)
    return doc


def _override_traces(doc: dict, load: float | None = None,
                     path: str | None = None):
    touched = False
    for wl in doc.get("workloads", []):
        if wl.get("kind") == "inference":
            trace = wl.setdefault("trace", {})
            if load is not None:
                trace["load"] = load
                trace.pop("path", None)
            if path is not None:
                trace["path"] = path
                trace.pop("load", None)
            touched = True
    if not touched:
        raise ConfigError("no inference workload to apply trace override to")


def run_from_config(doc: dict, record_events: bool = False):
    gpu = parse_gpu(_require(doc, "gpu", "config"))
    workloads = [parse_workload(w) for w in _require(doc, "workloads",
                                                     "config")]
    policies = list(doc.get("policies", [TALLY]))
    for p in policies:
        if p not in POLICIES:
            raise ConfigError(
                f"unknown policy {p!r} (choose from {', '.join(POLICIES)})"
            )
    duration_s = float(doc.get("duration_s", 10.0))
    if duration_s <= 0:
        raise ConfigError("duration_s must be > 0")
    sched = doc.get("scheduler", {})
    threshold_ms = sched.get("threshold_ms")
    quantum_ms = sched.get("quantum_ms")
    return run_experiment(
        gpu=gpu,
        workloads=workloads,
        policies=policies,
        horizon_ns=ms_to_ns(duration_s * 1000.0),
        seed=int(doc.get("seed", 0)),
        turnaround_threshold_ns=None if threshold_ms is None
        else ms_to_ns(float(threshold_ms)),
        quantum_ns=None if quantum_ms is None else ms_to_ns(float(quantum_ms)),
        record_events=record_events,
    )


def write_manifest(out_dir: str, command: str, doc: dict, outputs: list[str],
                   extra: dict | None = None) -> None:
    manifest = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "command": command,
        "config_sha256": config_hash(doc),
        "seed": int(doc.get("seed", 0)),
        "outputs": sorted(outputs),
    }
    if extra:
        manifest.update(extra)
    write_atomic(
        os.path.join(out_dir, "manifest.json"),
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
    )


# -- subcommands -----------------------------------------------------------


def cmd_transform(args) -> int:
    with open(args.input) as fh:
        kernel = parse_kernel(fh.read())
    summary: dict = {"pass": args.transform_pass, "kernel": kernel.name}
    if args.transform_pass == "slice":
        plan = slice_kernel(kernel, Fraction(args.fraction))
        out_kernel = plan.base_kernel
        summary["sub_launches"] = [
            {"offset": list(off), "grid": list(grid)}
            for off, grid in plan.sub_launches
        ]
    elif args.transform_pass == "unify":
        out_kernel = unify_synchronization(kernel)
    else:  # ptb
        unified = kernel
        from .transforms import has_unified_sync_shape
        if not has_unified_sync_shape(unified):
            unified = unify_synchronization(unified)
        ptb = make_preemptible(unified, Dim3(args.workers, 1, 1))
        out_kernel = ptb.kernel
        summary["worker_grid"] = list(ptb.worker_grid)
        summary["appended_params"] = list(
            out_kernel.params[len(kernel.params):]
        )
    if args.out:
        write_atomic(args.out, emit_kernel(out_kernel))
        summary["out"] = args.out
    else:
        sys.stdout.write(emit_kernel(out_kernel))
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return EXIT_OK


def cmd_interpret(args) -> int:
    with open(args.input) as fh:
        kernel = parse_kernel(fh.read())
    arg_values = _parse_int_list(args.args)
    if args.memory_file:
        with open(args.memory_file) as fh:
            memory = tuple(int(v) for v in json.load(fh))
    else:
        memory = _parse_int_list(args.memory)
    try:
        launch = LaunchSpec(kernel, arg_values, memory)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    result = interpret(launch, schedule_seed=args.seed,
                       step_limit=args.step_limit)
    doc = {
        "status": result.status,
        "steps_executed": result.steps_executed,
        "final_memory": None if result.final_memory is None
        else list(result.final_memory),
    }
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK if result.status == COMPLETED else EXIT_RUNTIME


def cmd_profile(args) -> int:
    doc = apply_overrides(load_config(args.config), args)
    gpu = parse_gpu(_require(doc, "gpu", "config"))
    workloads = [parse_workload(w) for w in _require(doc, "workloads",
                                                     "config")]
    threshold_ns = DEFAULT_THRESHOLD_NS
    if args.threshold_ms is not None:
        threshold_ns = ms_to_ns(args.threshold_ms)
    profiler = Profiler(gpu)
    lines = ["kernel,candidate,kernel_latency_ns,turnaround_estimate_ns,"
             "selected"]
    for wl in workloads:
        for work in wl.kernels:
            records = profiler.profile(work.profile_key(), work.cost)
            chosen = profiler.select(work.profile_key(), work.cost,
                                     threshold_ns)
            for rec in records:
                sel = "1" if rec.candidate == chosen else "0"
                lines.append(
                    f"{work.kernel_id},{rec.candidate.describe()},"
                    f"{rec.kernel_latency_ns},{rec.turnaround_estimate_ns},"
                    f"{sel}"
                )
    csv_text = "\n".join(lines) + "\n"
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        write_atomic(os.path.join(args.out_dir, "profile.csv"), csv_text)
        write_atomic(os.path.join(args.out_dir, "profile_cache.json"),
                     profiler.dump_cache() + "\n")
        write_manifest(args.out_dir, "profile", doc,
                       ["profile.csv", "profile_cache.json"])
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_run(args) -> int:
    doc = apply_overrides(load_config(args.config), args)
    reports = run_from_config(doc, record_events=args.events)
    lines = [CSV_HEADER]
    for report in reports:
        lines.extend(report_csv_rows(report))
    csv_text = "\n".join(lines) + "\n"
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        outputs = ["metrics.csv"]
        write_atomic(os.path.join(args.out_dir, "metrics.csv"), csv_text)
        if args.events:
            for report in reports:
                name = f"events_{report.policy}.csv"
                write_atomic(os.path.join(args.out_dir, name),
                             events_to_csv(report.result.events))
                outputs.append(name)
        write_manifest(args.out_dir, "run", doc, outputs)
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


SWEEP_AXES = ("threshold", "load", "be-count")


def _sweep_config(doc: dict, axis: str, value: float) -> dict:
    doc = json.loads(json.dumps(doc))
    if axis == "threshold":
        doc.setdefault("scheduler", {})["threshold_ms"] = value
    elif axis == "load":
        _override_traces(doc, load=value)
    else:  # be-count
        count = int(value)
        if count != value or count < 1:
            raise ConfigError(f"be-count values must be positive integers, "
                              f"got {value}")
        workloads = doc.get("workloads", [])
        be = [w for w in workloads if w.get("priority") == "best_effort"]
        if not be:
            raise ConfigError("be-count sweep needs a best_effort workload "
                              "to replicate")
        keep = [w for w in workloads if w.get("priority") != "best_effort"]
        clones = []
        for i in range(count):
            template = json.loads(json.dumps(be[i % len(be)]))
            template["name"] = f"{template['name']}-{i}"
            clones.append(template)
        doc["workloads"] = keep + clones
    return doc


def cmd_sweep(args) -> int:
    base = apply_overrides(load_config(args.config), args)
    if args.values:
        try:
            values = [float(v) for v in args.values.split(",")]
        except ValueError:
            raise ConfigError(f"bad sweep values {args.values!r}") from None
    elif args.axis == "threshold":
        values = list(THRESHOLD_SWEEP_MS)
    elif args.axis == "be-count":
        values = [float(v) for v in range(1, 11)]
    else:
        raise ConfigError("load sweep needs explicit --values")
    lines = [f"axis,value,{CSV_HEADER}"]
    for value in values:
        doc = _sweep_config(base, args.axis, value)
        for report in run_from_config(doc):
            for row in report_csv_rows(report):
                lines.append(f"{args.axis},{value:g},{row}")
    csv_text = "\n".join(lines) + "\n"
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        write_atomic(os.path.join(args.out_dir, "sweep.csv"), csv_text)
        write_manifest(args.out_dir, "sweep", base, ["sweep.csv"],
                       extra={"axis": args.axis,
                              "values": [f"{v:g}" for v in values]})
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


# -- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tallysim",
        description="Block-level GPU-sharing simulator and kernel tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transform", help="apply a kernel transformation")
    p.add_argument("input", help="kernel IR file")
    p.add_argument("--pass", dest="transform_pass", required=True,
                   choices=("slice", "unify", "ptb"))
    p.add_argument("--fraction", default="1/4",
                   help="slice fraction, e.g. 1/4 (slice pass)")
    p.add_argument("--workers", type=int, default=4,
                   help="worker block count (ptb pass)")
    p.add_argument("--out", help="output kernel file (default stdout)")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("interpret", help="run a kernel in the interpreter")
    p.add_argument("input", help="kernel IR file")
    p.add_argument("--args", default="", help="comma-separated launch args")
    p.add_argument("--memory", default="",
                   help="comma-separated initial global memory words")
    p.add_argument("--memory-file",
                   help="JSON file with the initial global memory list")
    p.add_argument("--seed", type=int, default=0, help="schedule seed")
    p.add_argument("--step-limit", type=int, default=10_000_000)
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("profile", help="profile kernel launch configurations")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--threshold-ms", type=float,
                   help="turnaround threshold override")
    p.add_argument("--out-dir", help="output directory (default stdout)")
    p.set_defaults(func=cmd_profile)

    def _run_flags(p):
        p.add_argument("--config", required=True,
                       help="experiment config JSON")
        p.add_argument("--policy", choices=POLICIES,
                       help="run only this policy")
        p.add_argument("--threshold-ms", type=float,
                       help="turnaround threshold override")
        p.add_argument("--seed", type=int, help="experiment seed override")
        p.add_argument("--duration-s", type=float,
                       help="measurement window override")
        p.add_argument("--load", type=float,
                       help="inference load override")
        p.add_argument("--trace",
                       help="arrival trace CSV override (ms timestamps)")
        p.add_argument("--out-dir", help="output directory (default stdout)")

    p = sub.add_parser("run", help="run one experiment")
    _run_flags(p)
    p.add_argument("--events", action="store_true",
                   help="also write raw event logs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep one experiment axis")
    _run_flags(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values",
                   help="comma-separated axis values (defaults per axis)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_VALIDATION if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except TransformError as e:
        print(f"error: transformation refused: {e}", file=sys.stderr)
        return EXIT_REFUSED
    except (ConfigError, ParseError, KernelValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # pragma: no cover - unexpected runtime failure
        log.exception("unhandled failure")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
