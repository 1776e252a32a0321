"""Block-level rewrites of kernel IR: offset slicing, unified synchronization,
and persistent-worker (preemptible) form.

All passes are pure functions from KernelDef to new KernelDefs; outputs are
verified against the interpreter in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .ir.core import (
    AXES,
    Dim3,
    Imm,
    Instruction,
    KernelDef,
    LaunchSpec,
    Reg,
    SpecialReg,
)
from .ir.interp import DEFAULT_STEP_LIMIT, MemTrigger, interpret
from .ir.core import COMPLETED, ExecResult


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class SlicedPlan:
    """Offset-augmented kernel plus the sub-launch tiling of the original grid."""

    base_kernel: KernelDef
    sub_launches: tuple[tuple[Dim3, Dim3], ...]  # (block_offset, sub_grid)


@dataclass(frozen=True)
class PtbControl:
    """Launch-time control words of a preemptible kernel.

    Both addresses index into the launch's global memory.  The counter holds
    the number of task indices claimed so far; it persists across preempt and
    relaunch.  The flag is 0 (run) or 1 (park after current block).
    """

    task_counter_addr: int
    preempt_flag_addr: int
    total_blocks: int
    original_grid: Dim3


@dataclass(frozen=True)
class PtbKernelDef:
    kernel: KernelDef
    worker_grid: Dim3


def _refuse_dependent(k: KernelDef, what: str) -> None:
    if k.inter_block_dependent:
        raise TransformError(
            f"{k.name}: {what} refused, kernel is inter-block dependent"
        )


class _Names:
    """Fresh label/param names that cannot collide with existing ones."""

    def __init__(self, k: KernelDef):
        self.used = set(k.labels) | set(k.params)
        self.counter = 0

    def fresh(self, base: str) -> str:
        name = base
        while name in self.used:
            self.counter += 1
            name = f"{base}_{self.counter}"
        self.used.add(name)
        return name


def _snapshot_prologue(n_orig_params: int, n_extra: int, dest_base: int):
    """MOVs that capture appended params into scratch registers before the
    original body can clobber the low registers they arrive in."""
    return [
        Instruction("MOV", (Reg(dest_base + i), Reg(n_orig_params + i)))
        for i in range(n_extra)
    ]


def add_block_offset(k: KernelDef) -> KernelDef:
    """Append offset parameters and rebase every blockIdx read by them.

    gridDim reads are pinned to the original grid extents so that launching
    the result over a sub-grid does not change their meaning.
    """
    _refuse_dependent(k, "block-offset transformation")
    names = _Names(k)
    off_params = tuple(names.fresh(f"__off_{a}") for a in AXES)
    p_base = len(k.params)
    reg_base = max(k.register_count, p_base + 3)
    off_regs = {a: reg_base + i for i, a in enumerate(AXES)}

    body = _snapshot_prologue(p_base, 3, reg_base)
    for ins in k.body:
        if ins.opcode == "READ_SPECIAL":
            dest, spec = ins.operands
            if spec.kind == "blockIdx":
                body.append(ins)
                body.append(
                    Instruction("ADD", (dest, dest, Reg(off_regs[spec.axis])))
                )
                continue
            if spec.kind == "gridDim":
                body.append(
                    Instruction(
                        "CONST", (dest, Imm(k.grid.axis(spec.axis))), label=ins.label
                    )
                )
                continue
        body.append(ins)

    return KernelDef(
        name=k.name,
        params=k.params + off_params,
        grid=k.grid,
        block=k.block,
        register_count=reg_base + 3,
        shared_words=k.shared_words,
        body=tuple(body),
        inter_block_dependent=False,
    )


def slice_extents(axis_len: int, fraction: Fraction | float) -> list[int]:
    """Tile an axis into contiguous slices of extent ~ fraction * axis_len.

    The slice extent is max(1, round(fraction * axis_len)); the last slice
    absorbs any remainder.
    """
    frac = Fraction(fraction)
    if not 0 < frac <= 1:
        raise TransformError(f"slice fraction must be in (0, 1], got {fraction}")
    extent = max(1, round(frac * axis_len))
    extent = min(extent, axis_len)
    n_full = axis_len // extent
    extents = [extent] * n_full
    rem = axis_len % extent
    if rem:
        extents[-1] += rem
    return extents


def slice_kernel(k: KernelDef, slice_fraction: Fraction | float) -> SlicedPlan:
    """Split the grid along its largest axis into offset sub-launches."""
    _refuse_dependent(k, "slicing")
    axis = max(AXES, key=lambda a: k.grid.axis(a))  # ties break x -> y -> z
    extents = slice_extents(k.grid.axis(axis), slice_fraction)

    subs = []
    offset = 0
    for ext in extents:
        off = Dim3(**{a: (offset if a == axis else 0) for a in AXES})
        sub = Dim3(**{a: (ext if a == axis else k.grid.axis(a)) for a in AXES})
        subs.append((off, sub))
        offset += ext
    return SlicedPlan(base_kernel=add_block_offset(k), sub_launches=tuple(subs))


def run_sliced(
    plan: SlicedPlan,
    arg_values,
    global_memory,
    schedule_seed: int = 0,
    step_limit: int = DEFAULT_STEP_LIMIT,
) -> ExecResult:
    """Interpret every sub-launch in order, threading memory through."""
    mem = tuple(global_memory)
    steps = 0
    for i, (off, sub_grid) in enumerate(plan.sub_launches):
        kernel = KernelDef(
            name=plan.base_kernel.name,
            params=plan.base_kernel.params,
            grid=sub_grid,
            block=plan.base_kernel.block,
            register_count=plan.base_kernel.register_count,
            shared_words=plan.base_kernel.shared_words,
            body=plan.base_kernel.body,
        )
        launch = LaunchSpec(kernel, tuple(arg_values) + (off.x, off.y, off.z), mem)
        res = interpret(launch, schedule_seed + i, step_limit)
        steps += res.steps_executed
        if res.status != COMPLETED:
            return ExecResult(res.status, None, steps)
        mem = res.final_memory
    return ExecResult(COMPLETED, mem, steps)


def has_unified_sync_shape(k: KernelDef) -> bool:
    """Structural check that every path funnels through one terminal return.

    Conservative: accepts exactly one RET which must be the last body
    instruction (the shape :func:`unify_synchronization` produces).
    """
    rets = [ins for ins in k.body if ins.opcode == "RET"]
    return len(rets) == 1 and k.body[-1].opcode == "RET"


def unify_synchronization(k: KernelDef) -> KernelDef:
    """Funnel every barrier and return through one synchronization block.

    Each BAR_SYNC records a per-thread resume site and jumps to the unified
    block; each RET marks the thread returned (counted in a shared word) and
    jumps there too.  The unified block barriers, then either resumes
    non-returned threads at their recorded sites or, once every thread has
    returned, returns them all simultaneously.
    """
    names = _Names(k)
    usync = names.fresh("__usync")
    uret = names.fresh("__uret")
    s_ret = k.shared_words  # shared word counting returned threads
    rc = k.register_count
    r_ret, r_resume, r_t1, r_t2 = rc, rc + 1, rc + 2, rc + 3
    nthreads = k.block.total

    # Resume label for each instruction index that follows a BAR_SYNC.
    resume_label: dict[int, str] = {}
    sites: list[tuple[int, str]] = []  # (site number, resume label)
    site_no = 0
    for j, ins in enumerate(k.body):
        if ins.opcode == "BAR_SYNC":
            site_no += 1
            succ = k.body[j + 1]  # validation guarantees a successor
            if succ.label is not None:
                lbl = succ.label
            elif j + 1 in resume_label:
                lbl = resume_label[j + 1]
            else:
                lbl = names.fresh(f"__u_res{site_no}")
                resume_label[j + 1] = lbl
            sites.append((site_no, lbl))

    body: list[Instruction] = [
        # per-iteration state reset; the barrier keeps any thread from
        # reaching a return before every thread has passed the reset
        Instruction("CONST", (Reg(r_ret), Imm(0))),
        Instruction("CONST", (Reg(r_resume), Imm(0))),
        Instruction("STORE_SHARED", (Imm(s_ret), Imm(0))),
        Instruction("BAR_SYNC"),
    ]
    site_iter = iter(sites)
    for j, ins in enumerate(k.body):
        label = resume_label.get(j, ins.label)
        if ins.opcode == "BAR_SYNC":
            no, _ = next(site_iter)
            body.append(Instruction("CONST", (Reg(r_resume), Imm(no)), label=label))
            body.append(Instruction("JUMP", (usync,)))
        elif ins.opcode == "RET":
            body.append(Instruction("CONST", (Reg(r_ret), Imm(1)), label=label))
            body.append(Instruction("LOAD_SHARED", (Reg(r_t1), Imm(s_ret))))
            body.append(Instruction("ADD", (Reg(r_t1), Reg(r_t1), Imm(1))))
            body.append(Instruction("STORE_SHARED", (Imm(s_ret), Reg(r_t1))))
            body.append(Instruction("JUMP", (usync,)))
        else:
            body.append(ins.with_label(label))

    body.append(Instruction("BAR_SYNC", label=usync))
    body.append(Instruction("LOAD_SHARED", (Reg(r_t1), Imm(s_ret))))
    body.append(Instruction("CMP_EQ", (Reg(r_t2), Reg(r_t1), Imm(nthreads))))
    body.append(Instruction("BRANCH", (Reg(r_t2), uret)))
    body.append(Instruction("BRANCH", (Reg(r_ret), usync)))
    for no, lbl in sites:
        body.append(Instruction("CMP_EQ", (Reg(r_t2), Reg(r_resume), Imm(no))))
        body.append(Instruction("BRANCH", (Reg(r_t2), lbl)))
    body.append(Instruction("JUMP", (usync,)))  # unreachable
    body.append(Instruction("RET", label=uret))

    return KernelDef(
        name=k.name,
        params=k.params,
        grid=k.grid,
        block=k.block,
        register_count=rc + 4,
        shared_words=k.shared_words + 1,
        body=tuple(body),
        inter_block_dependent=k.inter_block_dependent,
    )


def make_preemptible(
    k: KernelDef, worker_grid: Dim3, enforce_unified: bool = True
) -> PtbKernelDef:
    """Wrap the body in a persistent-worker loop driven by a global counter.

    Thread (0,0,0) of each worker checks the preemption flag and, if clear,
    claims the next task index and publishes it through shared memory; after
    a barrier, all threads either exit (flag set or tasks exhausted) or
    execute the body with the block index reconstructed from the task index.
    A barrier terminates every iteration.

    Requires a kernel in unified-synchronization shape unless
    ``enforce_unified`` is False (only useful to demonstrate the divergence
    hazard the unified pass removes).
    """
    _refuse_dependent(k, "preemption transformation")
    if worker_grid.total < 1 or worker_grid.x < 1 or worker_grid.y < 1 \
            or worker_grid.z < 1:
        raise TransformError(f"worker grid must be non-empty, got {worker_grid}")
    if enforce_unified and not has_unified_sync_shape(k):
        raise TransformError(
            f"{k.name}: preemption requires unified synchronization "
            "(a raw RET is reachable before the unified sync block)"
        )

    names = _Names(k)
    ploop = names.fresh("__ploop")
    pstop = names.fresh("__pstop")
    pfence = names.fresh("__pfence")
    piter = names.fresh("__piter")
    pexit = names.fresh("__pexit")
    extra = tuple(names.fresh(n) for n in ("__ctr_addr", "__flag_addr", "__total"))

    p_base = len(k.params)
    rb = max(k.register_count, p_base + 3)
    r_ctr, r_flag, r_tot = rb, rb + 1, rb + 2
    r_task, r_bx, r_by, r_bz, r_t1, r_lead = rb + 3, rb + 4, rb + 5, rb + 6, \
        rb + 7, rb + 8
    b_regs = {"x": r_bx, "y": r_by, "z": r_bz}
    s_task = k.shared_words  # shared word broadcasting the claimed task index

    body: list[Instruction] = _snapshot_prologue(p_base, 3, rb)
    body += [
        # leader election: linear thread id == 0
        Instruction("READ_SPECIAL", (Reg(r_t1), SpecialReg("threadIdx", "x")),
                    label=ploop),
        Instruction("READ_SPECIAL", (Reg(r_lead), SpecialReg("threadIdx", "y"))),
        Instruction("ADD", (Reg(r_t1), Reg(r_t1), Reg(r_lead))),
        Instruction("READ_SPECIAL", (Reg(r_lead), SpecialReg("threadIdx", "z"))),
        Instruction("ADD", (Reg(r_t1), Reg(r_t1), Reg(r_lead))),
        Instruction("CMP_NE", (Reg(r_lead), Reg(r_t1), Imm(0))),
        Instruction("BRANCH", (Reg(r_lead), pfence)),
        # leader: flag check gates the fetch, so a parked launch never
        # over-claims a task index
        Instruction("LOAD_GLOBAL", (Reg(r_t1), Reg(r_flag))),
        Instruction("BRANCH", (Reg(r_t1), pstop)),
        Instruction("ATOMIC_ADD_GLOBAL", (Reg(r_t1), Reg(r_ctr), Imm(1))),
        Instruction("STORE_SHARED", (Imm(s_task), Reg(r_t1))),
        Instruction("JUMP", (pfence,)),
        Instruction("CONST", (Reg(r_t1), Imm(-1)), label=pstop),
        Instruction("STORE_SHARED", (Imm(s_task), Reg(r_t1))),
        Instruction("BAR_SYNC", label=pfence),
        Instruction("LOAD_SHARED", (Reg(r_task), Imm(s_task))),
        Instruction("CMP_LT", (Reg(r_t1), Reg(r_task), Imm(0))),
        Instruction("BRANCH", (Reg(r_t1), pexit)),
        Instruction("CMP_LT", (Reg(r_t1), Reg(r_task), Reg(r_tot))),
        Instruction("CMP_EQ", (Reg(r_t1), Reg(r_t1), Imm(0))),
        Instruction("BRANCH", (Reg(r_t1), pexit)),
        # blockIdx = delinearize(task, original grid)
        Instruction("MOD", (Reg(r_bx), Reg(r_task), Imm(k.grid.x))),
        Instruction("DIV", (Reg(r_t1), Reg(r_task), Imm(k.grid.x))),
        Instruction("MOD", (Reg(r_by), Reg(r_t1), Imm(k.grid.y))),
        Instruction("DIV", (Reg(r_bz), Reg(r_t1), Imm(k.grid.y))),
    ]

    for ins in k.body:
        if ins.opcode == "READ_SPECIAL":
            dest, spec = ins.operands
            if spec.kind == "blockIdx":
                body.append(
                    Instruction("MOV", (dest, Reg(b_regs[spec.axis])),
                                label=ins.label)
                )
                continue
            if spec.kind == "gridDim":
                body.append(
                    Instruction("CONST", (dest, Imm(k.grid.axis(spec.axis))),
                                label=ins.label)
                )
                continue
        if ins.opcode == "RET":
            body.append(Instruction("JUMP", (piter,), label=ins.label))
            continue
        body.append(ins)

    body += [
        Instruction("BAR_SYNC", label=piter),
        Instruction("JUMP", (ploop,)),
        Instruction("RET", label=pexit),
    ]

    kernel = KernelDef(
        name=k.name,
        params=k.params + extra,
        grid=worker_grid,
        block=k.block,
        register_count=rb + 9,
        shared_words=k.shared_words + 1,
        body=tuple(body),
    )
    return PtbKernelDef(kernel=kernel, worker_grid=worker_grid)


def ptb_launch_spec(
    ptb: PtbKernelDef, control: PtbControl, arg_values, global_memory
) -> LaunchSpec:
    """Bind a preemptible kernel to its control words for one launch."""
    mem = tuple(global_memory)
    for addr in (control.task_counter_addr, control.preempt_flag_addr):
        if not 0 <= addr < len(mem):
            raise TransformError(f"control address {addr} outside global memory")
    if control.task_counter_addr == control.preempt_flag_addr:
        raise TransformError("control addresses must be distinct")
    args = tuple(arg_values) + (
        control.task_counter_addr,
        control.preempt_flag_addr,
        control.total_blocks,
    )
    return LaunchSpec(ptb.kernel, args, mem)


def run_ptb(
    ptb: PtbKernelDef,
    control: PtbControl,
    arg_values,
    global_memory,
    schedule_seed: int = 0,
    step_limit: int = DEFAULT_STEP_LIMIT,
    preempt_at_count: int | None = None,
) -> ExecResult:
    """Interpret a preemptible launch.

    ``preempt_at_count`` arms a watch on the task counter: as soon as it
    reaches that value the preemption flag is raised, modeling the host
    signaling preemption at an exact progress point.
    """
    launch = ptb_launch_spec(ptb, control, arg_values, global_memory)
    triggers = ()
    if preempt_at_count is not None:
        triggers = (
            MemTrigger(
                watch_addr=control.task_counter_addr,
                watch_value=preempt_at_count,
                store_addr=control.preempt_flag_addr,
                store_value=1,
            ),
        )
    return interpret(launch, schedule_seed, step_limit, triggers=triggers)
