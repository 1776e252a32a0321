"""Profiler: candidate menus, measurement caching, and config selection."""

from fractions import Fraction

import pytest

from tallysim.profiler import (
    DEFAULT_THRESHOLD_NS,
    ORIGINAL,
    PTB,
    SLICED,
    ConfigCandidate,
    ProfileKey,
    ProfileRecord,
    Profiler,
    candidate_configs,
    estimate_turnaround,
    select_config,
)
from tallysim.sim import GpuSpec, cost_model, ms_to_ns

GPU4 = GpuSpec(num_sms=4, max_threads_per_sm=128, max_blocks_per_sm=1)
GPU8 = GpuSpec(num_sms=8, max_threads_per_sm=1024, max_blocks_per_sm=4)


def key(name="k", grid=(64, 1, 1), block=(128, 1, 1)):
    return ProfileKey(name, grid, block)


class TestCandidates:
    def test_menu_contents(self):
        cost = cost_model(1.0, 64, threads_per_block=128)
        cands = candidate_configs(cost, GPU8)
        variants = [c.variant for c in cands]
        assert variants.count(ORIGINAL) == 1
        # worker counts in SM multiples up to the slot bound (32)
        workers = [c.worker_count for c in cands if c.variant == PTB]
        assert workers == [8, 16, 24, 32]
        fractions = {c.fraction for c in cands if c.variant == SLICED}
        assert Fraction(1, 2) in fractions
        assert Fraction(1, 64) in fractions  # per-block slicing

    def test_ptb_workers_capped_by_total_blocks(self):
        cost = cost_model(1.0, 10, threads_per_block=128)
        workers = [c.worker_count
                   for c in candidate_configs(cost, GPU8)
                   if c.variant == PTB]
        assert workers == [8]

    def test_duplicate_tilings_deduped(self):
        # 4 blocks: 1/2 -> (2,2), 1/4 and per-block -> (1,1,1,1) once
        cost = cost_model(1.0, 4, threads_per_block=128)
        tilings = [tuple(c.shape(cost).sub_blocks)
                   for c in candidate_configs(cost, GPU8)
                   if c.variant == SLICED]
        assert len(tilings) == len(set(tilings))

    def test_candidate_validation(self):
        with pytest.raises(ValueError):
            ConfigCandidate(SLICED)
        with pytest.raises(ValueError):
            ConfigCandidate(PTB, worker_count=0)
        with pytest.raises(ValueError):
            ConfigCandidate("Weird")


class TestEstimate:
    def test_ptb_scales_with_worker_share(self):
        assert estimate_turnaround(
            ConfigCandidate(PTB, worker_count=4), 1_000_000, 100
        ) == 40_000

    def test_original_is_whole_latency(self):
        assert estimate_turnaround(ConfigCandidate(ORIGINAL),
                                   1_000_000, 100) == 1_000_000

    def test_sliced_needs_slice_measurement(self):
        cand = ConfigCandidate(SLICED, fraction=Fraction(1, 4))
        with pytest.raises(ValueError):
            estimate_turnaround(cand, 1_000_000, 100)
        assert estimate_turnaround(cand, 1_000_000, 100, 260_000) == 260_000


def record(cand, latency, turnaround):
    return ProfileRecord(cand, latency, turnaround, runs=1)


class TestSelection:
    def test_picks_min_latency_among_qualifying(self):
        thr = ms_to_ns(0.0316)
        recs = [
            record(ConfigCandidate(ORIGINAL), 100, 1_000_000),
            record(ConfigCandidate(PTB, worker_count=4), 120, thr - 1),
            record(ConfigCandidate(PTB, worker_count=8), 110, thr - 1),
        ]
        assert select_config(recs, thr).worker_count == 8

    def test_falls_back_to_min_turnaround(self):
        recs = [
            record(ConfigCandidate(ORIGINAL), 100, 900),
            record(ConfigCandidate(PTB, worker_count=4), 500, 300),
            record(ConfigCandidate(SLICED, fraction=Fraction(1, 2)), 400, 600),
        ]
        assert select_config(recs, threshold_ns=100).variant == PTB

    def test_infinite_threshold_keeps_original(self):
        # every candidate qualifies; Original has the lowest latency
        recs = [
            record(ConfigCandidate(ORIGINAL), 100, 100),
            record(ConfigCandidate(PTB, worker_count=4), 130, 50),
        ]
        assert select_config(recs, threshold_ns=10**15).variant == ORIGINAL

    def test_tie_break_prefers_ptb_then_smaller_parameter(self):
        recs = [
            record(ConfigCandidate(SLICED, fraction=Fraction(1, 2)), 100, 10),
            record(ConfigCandidate(PTB, worker_count=8), 100, 10),
            record(ConfigCandidate(PTB, worker_count=4), 100, 10),
        ]
        best = select_config(recs, threshold_ns=100)
        assert best == ConfigCandidate(PTB, worker_count=4)

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError):
            select_config([])


class TestProfiler:
    def test_measured_estimate_consistency(self):
        cost = cost_model(1.0, 64, threads_per_block=128)
        prof = Profiler(GPU8, runs=2)
        recs = prof.profile(key(), cost)
        by_variant = {}
        for r in recs:
            by_variant.setdefault(r.candidate.variant, []).append(r)
        orig = by_variant[ORIGINAL][0]
        assert orig.turnaround_estimate_ns == orig.kernel_latency_ns
        for r in by_variant[PTB]:
            assert r.turnaround_estimate_ns == round(
                r.kernel_latency_ns * r.candidate.worker_count / 64
            )

    def test_ptb_latency_non_increasing_in_workers(self):
        cost = cost_model(1.0, 64, threads_per_block=128)
        recs = Profiler(GPU8, runs=1).profile(key(), cost)
        ptb = sorted((r for r in recs if r.candidate.variant == PTB),
                     key=lambda r: r.candidate.worker_count)
        lats = [r.kernel_latency_ns for r in ptb]
        assert lats == sorted(lats, reverse=True)

    def test_cache_avoids_repeat_measurement(self):
        cost = cost_model(0.5, 16, threads_per_block=128)
        prof = Profiler(GPU8, runs=3)
        first = prof.profile(key("c"), cost)
        runs_after_first = prof.simulated_runs
        assert runs_after_first > 0
        second = prof.profile(key("c"), cost)
        assert prof.simulated_runs == runs_after_first
        assert second == first

    def test_distinct_shapes_profiled_separately(self):
        cost = cost_model(0.5, 16, threads_per_block=128)
        prof = Profiler(GPU8, runs=1)
        prof.profile(key("a"), cost)
        runs = prof.simulated_runs
        prof.profile(key("a", grid=(16, 1, 1)), cost)
        assert prof.simulated_runs > runs

    def test_infeasible_candidates_skipped(self):
        # blocks too wide for the GPU never produce records
        cost = cost_model(0.5, 8, threads_per_block=4096)
        recs = Profiler(GPU8, runs=1).profile(key("wide"), cost)
        assert recs == []

    def test_select_fallback_scenario(self):
        # short blocks, many of them: nothing meets the default threshold,
        # and a preemptible config has the lowest per-block disturbance
        cost = cost_model(0.15, 108, threads_per_block=128)
        prof = Profiler(GPU4, runs=1)
        chosen = prof.select(key("train", grid=(108, 1, 1)), cost,
                             DEFAULT_THRESHOLD_NS)
        assert chosen.variant == PTB
        assert chosen.worker_count == 4

    def test_cache_roundtrip_byte_identical(self):
        cost = cost_model(1.0, 64, threads_per_block=128)
        prof = Profiler(GPU8, runs=2)
        prof.profile(key(), cost)
        dumped = prof.dump_cache()
        fresh = Profiler(GPU8, runs=2)
        fresh.load_cache(dumped)
        assert fresh.dump_cache() == dumped
        # and the loaded cache is served without simulation
        assert fresh.profile(key(), cost) == prof.profile(key(), cost)
        assert fresh.simulated_runs == 0
