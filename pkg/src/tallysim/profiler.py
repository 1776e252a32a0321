"""Transparent profiler: candidate launch configurations, isolated
measurement, turnaround estimation, and threshold-based selection.

For a preemptible launch the turnaround estimate divides the measured kernel
latency by the number of blocks each worker processes:

    turnaround = kernel_latency * worker_blocks / total_blocks

For a sliced launch it is the measured completion time of a single slice;
for an untransformed launch, the whole kernel latency.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from fractions import Fraction

from .sim import (
    BEST_EFFORT,
    GpuSim,
    GpuSpec,
    KernelCostModel,
    OriginalShape,
    PtbShape,
    SimLaunch,
    SlicedShape,
    ms_to_ns,
)
from .transforms import slice_extents

log = logging.getLogger("tallysim.profiler")

DEFAULT_THRESHOLD_NS = ms_to_ns(0.0316)
DEFAULT_RUNS = 10

ORIGINAL = "Original"
SLICED = "Sliced"
PTB = "Ptb"

_VARIANT_RANK = {PTB: 0, SLICED: 1, ORIGINAL: 2}

SLICE_FRACTION_MENU = (
    Fraction(1, 2),
    Fraction(1, 4),
    Fraction(1, 8),
    Fraction(1, 16),
    Fraction(1, 32),
)


@dataclass(frozen=True)
class ConfigCandidate:
    variant: str
    fraction: Fraction | None = None   # Sliced
    worker_count: int | None = None    # Ptb

    def __post_init__(self):
        if self.variant not in _VARIANT_RANK:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == SLICED and not (self.fraction and
                                           0 < self.fraction <= 1):
            raise ValueError("Sliced candidate needs a fraction in (0, 1]")
        if self.variant == PTB and not (self.worker_count
                                        and self.worker_count >= 1):
            raise ValueError("Ptb candidate needs a positive worker count")

    def sort_key(self):
        param = self.worker_count if self.variant == PTB else \
            (float(self.fraction) if self.fraction is not None else 0.0)
        return (_VARIANT_RANK[self.variant], param)

    def shape(self, cost: KernelCostModel, start_count: int = 0):
        if self.variant == ORIGINAL:
            return OriginalShape()
        if self.variant == SLICED:
            return SlicedShape(
                tuple(slice_extents(cost.total_blocks, self.fraction))
            )
        return PtbShape(self.worker_count, start_count=start_count)

    def describe(self) -> str:
        if self.variant == SLICED:
            return f"Sliced({self.fraction})"
        if self.variant == PTB:
            return f"Ptb({self.worker_count})"
        return "Original"


@dataclass(frozen=True)
class ProfileKey:
    kernel: str
    grid: tuple[int, int, int]
    block: tuple[int, int, int]

    def as_str(self) -> str:
        g, b = self.grid, self.block
        return f"{self.kernel}|{g[0]}x{g[1]}x{g[2]}|{b[0]}x{b[1]}x{b[2]}"


@dataclass(frozen=True)
class ProfileRecord:
    candidate: ConfigCandidate
    kernel_latency_ns: int     # mean isolated completion latency
    turnaround_estimate_ns: int
    runs: int

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.kernel_latency_ns < 0 or self.turnaround_estimate_ns < 0:
            raise ValueError("latencies must be non-negative")


def candidate_configs(cost: KernelCostModel, gpu: GpuSpec) -> list[ConfigCandidate]:
    """Original, Ptb worker counts in SM multiples, and distinct slicings."""
    out = [ConfigCandidate(ORIGINAL)]

    occupancy = gpu.occupancy_limit(cost.threads_per_block)
    slot_bound = gpu.num_sms * occupancy
    workers = gpu.num_sms
    while workers <= min(cost.total_blocks, slot_bound):
        out.append(ConfigCandidate(PTB, worker_count=workers))
        workers += gpu.num_sms

    seen_tilings = set()
    fractions = list(SLICE_FRACTION_MENU) + [Fraction(1, cost.total_blocks)]
    for frac in fractions:
        tiling = tuple(slice_extents(cost.total_blocks, frac))
        if len(tiling) <= 1 or tiling in seen_tilings:
            continue  # a single sub-launch duplicates Original
        seen_tilings.add(tiling)
        out.append(ConfigCandidate(SLICED, fraction=frac))
    return out


def estimate_turnaround(
    candidate: ConfigCandidate,
    kernel_latency_ns: int,
    total_blocks: int,
    single_slice_latency_ns: int | None = None,
) -> int:
    if candidate.variant == PTB:
        return round(kernel_latency_ns * candidate.worker_count / total_blocks)
    if candidate.variant == SLICED:
        if single_slice_latency_ns is None:
            raise ValueError("sliced estimate needs a measured slice latency")
        return single_slice_latency_ns
    return kernel_latency_ns


def select_config(
    records: list[ProfileRecord], threshold_ns: int = DEFAULT_THRESHOLD_NS
) -> ConfigCandidate:
    """Best throughput under the turnaround threshold, else least intrusive.

    Among candidates whose turnaround estimate meets the threshold, pick the
    one with minimal kernel latency; if none qualifies, fall back to the
    minimal-turnaround candidate.  Ties prefer Ptb over Sliced over
    Original, then the smaller parameter.
    """
    if not records:
        raise ValueError("no profile records to select from")
    qualifying = [r for r in records if r.turnaround_estimate_ns <= threshold_ns]
    if qualifying:
        best = min(qualifying,
                   key=lambda r: (r.kernel_latency_ns, r.candidate.sort_key()))
    else:
        best = min(records,
                   key=lambda r: (r.turnaround_estimate_ns,
                                  r.candidate.sort_key()))
    return best.candidate


class Profiler:
    """Measures candidates in isolated simulator runs and caches per work
    shape for the process lifetime."""

    def __init__(self, gpu: GpuSpec, runs: int = DEFAULT_RUNS):
        self.gpu = gpu
        self.runs = runs
        self._cache: dict[ProfileKey, tuple[ProfileRecord, ...]] = {}
        self.simulated_runs = 0

    def profile(
        self,
        key: ProfileKey,
        cost: KernelCostModel,
        candidates: list[ConfigCandidate] | None = None,
        runs: int | None = None,
    ) -> list[ProfileRecord]:
        if key in self._cache:
            return list(self._cache[key])
        runs = self.runs if runs is None else runs
        if candidates is None:
            candidates = candidate_configs(cost, self.gpu)
        records = []
        for cand in candidates:
            measured = self._measure(cand, cost, runs)
            if measured is None:
                continue
            latency, slice_latency = measured
            records.append(
                ProfileRecord(
                    candidate=cand,
                    kernel_latency_ns=latency,
                    turnaround_estimate_ns=estimate_turnaround(
                        cand, latency, cost.total_blocks, slice_latency
                    ),
                    runs=runs,
                )
            )
        self._cache[key] = tuple(records)
        return records

    def _measure(self, cand, cost, runs):
        latencies = []
        slice_latencies = []
        for r in range(runs):
            sim = GpuSim(self.gpu, placement_seed=r)
            try:
                handle = sim.submit(
                    SimLaunch("__profile__", cand.describe(), BEST_EFFORT,
                              cand.shape(cost), cost),
                    0,
                )
            except ValueError as e:
                log.warning("skipping infeasible candidate %s: %s",
                            cand.describe(), e)
                return None
            sim.run_to_completion()
            self.simulated_runs += 1
            latencies.append(handle.finish_time)
            if cand.variant == SLICED:
                slice_latencies.append(handle.sub_completions[0])
        latency = round(sum(latencies) / len(latencies))
        slice_latency = round(sum(slice_latencies) / len(slice_latencies)) \
            if slice_latencies else None
        return latency, slice_latency

    def select(
        self,
        key: ProfileKey,
        cost: KernelCostModel,
        threshold_ns: int = DEFAULT_THRESHOLD_NS,
    ) -> ConfigCandidate:
        return select_config(self.profile(key, cost), threshold_ns)

    # -- cache persistence --------------------------------------------------

    def dump_cache(self) -> str:
        out = {}
        for key, records in self._cache.items():
            out[key.as_str()] = [
                {
                    "variant": r.candidate.variant,
                    "fraction": str(r.candidate.fraction)
                    if r.candidate.fraction is not None else None,
                    "worker_count": r.candidate.worker_count,
                    "kernel_latency_ns": r.kernel_latency_ns,
                    "turnaround_estimate_ns": r.turnaround_estimate_ns,
                    "runs": r.runs,
                }
                for r in records
            ]
        return json.dumps({"schema_version": 1, "records": out},
                          indent=2, sort_keys=True)

    def load_cache(self, text: str) -> None:
        doc = json.loads(text)
        for key_str, rec_list in doc["records"].items():
            kernel, grid_s, block_s = key_str.split("|")
            grid = tuple(int(v) for v in grid_s.split("x"))
            block = tuple(int(v) for v in block_s.split("x"))
            key = ProfileKey(kernel, grid, block)
            records = tuple(
                ProfileRecord(
                    candidate=ConfigCandidate(
                        d["variant"],
                        fraction=Fraction(d["fraction"])
                        if d["fraction"] else None,
                        worker_count=d["worker_count"],
                    ),
                    kernel_latency_ns=d["kernel_latency_ns"],
                    turnaround_estimate_ns=d["turnaround_estimate_ns"],
                    runs=d["runs"],
                )
                for d in rec_list
            )
            self._cache[key] = records
