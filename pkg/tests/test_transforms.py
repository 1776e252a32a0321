"""Transformation passes verified against the interpreter oracle."""

from fractions import Fraction

import pytest

from tallysim.ir import (
    COMPLETED,
    DIVERGENT_BARRIER,
    Dim3,
    Imm,
    Instruction,
    KernelDef,
    LaunchSpec,
    Reg,
    SpecialReg,
    interpret,
)
from tallysim.ir.randgen import random_kernel
from tallysim.transforms import (
    PtbControl,
    TransformError,
    add_block_offset,
    has_unified_sync_shape,
    make_preemptible,
    run_ptb,
    run_sliced,
    slice_extents,
    slice_kernel,
    unify_synchronization,
)


def ptb_setup(case, workers):
    """Unify + preemption transform of a generated case, with control words
    appended to its memory image."""
    unified = unify_synchronization(case.kernel)
    ptb = make_preemptible(unified, Dim3(workers, 1, 1))
    n_mem = len(case.initial_memory)
    control = PtbControl(
        task_counter_addr=n_mem,
        preempt_flag_addr=n_mem + 1,
        total_blocks=case.kernel.grid.total,
        original_grid=case.kernel.grid,
    )
    memory = case.initial_memory + (0, 0)
    return ptb, control, memory


class TestSliceExtents:
    def test_even_tiling(self):
        assert slice_extents(8, Fraction(1, 4)) == [2, 2, 2, 2]

    def test_last_slice_absorbs_remainder(self):
        assert slice_extents(10, Fraction(3, 10)) == [3, 3, 4]

    def test_rounds_to_even_tiling(self):
        assert slice_extents(10, Fraction(1, 4)) == [2, 2, 2, 2, 2]

    def test_per_block(self):
        assert slice_extents(5, Fraction(1, 5)) == [1, 1, 1, 1, 1]

    def test_whole(self):
        assert slice_extents(6, 1) == [6]

    def test_invalid_fraction(self):
        with pytest.raises(TransformError):
            slice_extents(8, 0)
        with pytest.raises(TransformError):
            slice_extents(8, Fraction(3, 2))


class TestBlockOffset:
    def test_appends_three_offset_params(self):
        k = random_kernel(1).kernel
        off = add_block_offset(k)
        assert off.params[:len(k.params)] == k.params
        assert len(off.params) == len(k.params) + 3

    def test_refuses_inter_block_dependent(self):
        k = random_kernel(2).kernel
        dep = KernelDef(
            name=k.name, params=k.params, grid=k.grid, block=k.block,
            register_count=k.register_count, shared_words=k.shared_words,
            body=k.body, inter_block_dependent=True,
        )
        with pytest.raises(TransformError):
            add_block_offset(dep)
        with pytest.raises(TransformError):
            slice_kernel(dep, Fraction(1, 2))
        with pytest.raises(TransformError):
            make_preemptible(dep, Dim3(2, 1, 1))

    def test_slices_largest_axis(self):
        case = random_kernel(0)
        k = KernelDef(
            name="g", params=case.kernel.params, grid=Dim3(2, 6, 1),
            block=case.kernel.block,
            register_count=case.kernel.register_count,
            shared_words=case.kernel.shared_words, body=case.kernel.body,
        )
        plan = slice_kernel(k, Fraction(1, 3))
        # largest axis is y: offsets advance along y only
        offsets = [off for off, _ in plan.sub_launches]
        assert all(off.x == 0 and off.z == 0 for off in offsets)
        assert [off.y for off in offsets] == [0, 2, 4]


class TestSlicingEquivalence:
    @pytest.mark.parametrize("seed", range(12))
    def test_matches_original(self, seed):
        case = random_kernel(seed, max_blocks=24, max_threads=12)
        base = interpret(case.launch)
        assert base.status == COMPLETED
        fractions = [Fraction(1, 2), Fraction(1, 4), Fraction(1, 8),
                     Fraction(1, case.kernel.grid.total), 1]
        for frac in fractions:
            plan = slice_kernel(case.kernel, frac)
            res = run_sliced(plan, case.arg_values, case.initial_memory)
            assert res.status == COMPLETED
            assert res.final_memory == base.final_memory


class TestUnifiedSync:
    def test_shape_predicate(self):
        k = random_kernel(5).kernel
        assert has_unified_sync_shape(unify_synchronization(k))

    @pytest.mark.parametrize("seed", range(12))
    def test_unify_preserves_semantics(self, seed):
        case = random_kernel(seed, max_blocks=12, max_threads=12)
        base = interpret(case.launch)
        assert base.status == COMPLETED
        unified = unify_synchronization(case.kernel)
        res = interpret(LaunchSpec(unified, case.arg_values,
                                   case.initial_memory))
        assert res.status == COMPLETED
        assert res.final_memory == base.final_memory


class TestPtbEquivalence:
    @pytest.mark.parametrize("workers", (1, 2, 4, 8))
    def test_matches_original_without_preemption(self, workers):
        case = random_kernel(7, max_blocks=24, max_threads=12)
        base = interpret(case.launch)
        ptb, control, memory = ptb_setup(case, workers)
        res = run_ptb(ptb, control, case.arg_values, memory)
        assert res.status == COMPLETED
        n = len(case.initial_memory)
        assert res.final_memory[:n] == base.final_memory
        # workers may over-fetch once each while discovering exhaustion
        counter = res.final_memory[control.task_counter_addr]
        assert control.total_blocks <= counter <= \
            control.total_blocks + workers

    def test_schedule_seed_independent(self):
        case = random_kernel(11, max_blocks=16, max_threads=8)
        ptb, control, memory = ptb_setup(case, 4)
        results = {
            run_ptb(ptb, control, case.arg_values, memory,
                    schedule_seed=s).final_memory
            for s in range(5)
        }
        assert len(results) == 1

    def test_requires_unified_shape(self):
        k = random_kernel(21).kernel
        if not has_unified_sync_shape(k):
            with pytest.raises(TransformError):
                make_preemptible(k, Dim3(2, 1, 1))


class TestPreemption:
    def test_flag_set_before_launch_is_a_noop(self):
        case = random_kernel(9, max_blocks=16, max_threads=8)
        ptb, control, memory = ptb_setup(case, 4)
        armed = list(memory)
        armed[control.preempt_flag_addr] = 1
        res = run_ptb(ptb, control, case.arg_values, tuple(armed))
        assert res.status == COMPLETED
        assert res.final_memory[control.task_counter_addr] == 0
        n = len(case.initial_memory)
        assert res.final_memory[:n] == case.initial_memory

    def test_preempt_resume_exact_for_all_counters(self):
        case = random_kernel(13, max_blocks=16, max_threads=8)
        # force exactly 16 blocks
        k = case.kernel
        k16 = KernelDef(
            name=k.name, params=k.params, grid=Dim3(16, 1, 1), block=k.block,
            register_count=k.register_count, shared_words=k.shared_words,
            body=k.body,
        )
        nthreads = k.block.total
        n = 16 * nthreads
        memory = tuple(range(1, n + 1)) + (0,) * n + (0, 0)
        case16 = type(case)(kernel=k16, arg_values=(0, n),
                            initial_memory=memory)
        ptb, control, mem = ptb_setup(case16, 4)
        uninterrupted = run_ptb(ptb, control, case16.arg_values, mem)
        assert uninterrupted.status == COMPLETED
        for c in range(17):
            first = run_ptb(ptb, control, case16.arg_values, mem,
                            preempt_at_count=c)
            assert first.status == COMPLETED
            counter = first.final_memory[control.task_counter_addr]
            assert counter >= min(c, control.total_blocks)
            resumed_mem = list(first.final_memory)
            resumed_mem[control.preempt_flag_addr] = 0
            second = run_ptb(ptb, control, case16.arg_values,
                             tuple(resumed_mem))
            assert second.status == COMPLETED
            # payload memory must match exactly; control words may differ
            # (flag reset, exhaustion over-fetch count)
            payload = len(case16.initial_memory)
            assert second.final_memory[:payload] == \
                uninterrupted.final_memory[:payload]
            assert second.final_memory[control.task_counter_addr] >= \
                control.total_blocks


class TestUnifiedSyncWitness:
    """A guarded early return plus a barrier stalls a naive persistent-worker
    rewrite; the unified-synchronization pass removes the stall."""

    @staticmethod
    def witness_kernel():
        body = [
            Instruction("READ_SPECIAL", (Reg(0), SpecialReg("threadIdx", "x"))),
            Instruction("READ_SPECIAL", (Reg(1), SpecialReg("blockIdx", "x"))),
            Instruction("MUL", (Reg(2), Reg(1), Imm(2))),
            Instruction("ADD", (Reg(2), Reg(2), Reg(0))),
            Instruction("CONST", (Reg(3), Imm(7))),
            Instruction("STORE_GLOBAL", (Reg(2), Reg(3))),
            Instruction("BRANCH", (Reg(0), "cont")),
            Instruction("RET"),  # thread 0 returns before the barrier
            Instruction("BAR_SYNC", label="cont"),
            Instruction("RET"),
        ]
        return KernelDef(
            name="witness", params=(), grid=Dim3(2, 1, 1),
            block=Dim3(2, 1, 1), register_count=4, shared_words=0,
            body=tuple(body),
        )

    def test_original_stalls(self):
        k = self.witness_kernel()
        res = interpret(LaunchSpec(k, (), (0, 0, 0, 0)))
        assert res.status == DIVERGENT_BARRIER

    def test_ptb_without_unify_stalls(self):
        k = self.witness_kernel()
        ptb = make_preemptible(k, Dim3(1, 1, 1), enforce_unified=False)
        control = PtbControl(4, 5, 4, k.grid)
        res = run_ptb(ptb, control, (), (0, 0, 0, 0, 0, 0))
        assert res.status == DIVERGENT_BARRIER

    def test_ptb_with_unify_completes_with_correct_memory(self):
        k = self.witness_kernel()
        ptb = make_preemptible(unify_synchronization(k), Dim3(1, 1, 1))
        control = PtbControl(4, 5, 2, k.grid)
        res = run_ptb(ptb, control, (), (0, 0, 0, 0, 0, 0))
        assert res.status == COMPLETED
        assert res.final_memory[:4] == (7, 7, 7, 7)
