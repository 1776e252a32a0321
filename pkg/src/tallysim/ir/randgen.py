"""Seeded random kernel generator for equivalence testing.

Generated kernels only write global memory at per-thread-disjoint addresses
(block-disjoint by construction) plus optional atomic accumulations into a
couple of shared counter cells, so every kernel has a unique reference
output regardless of block execution order.  Barriers are balanced (every
thread reaches each one), and optional early returns only occur after the
last barrier, which keeps the originals divergence-free while still giving
the preemption pass multi-RET bodies to cope with.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .core import Dim3, Imm, Instruction, KernelDef, LaunchSpec, Reg, SpecialReg

# fixed register layout of generated kernels
_R_IN = 0       # param: input region base
_R_OUT = 1      # param: output region base
_R_LIN = 2      # global linear thread id
_R_TID = 3      # linear thread id within the block
_R_ADDR = 4     # scratch address register
_VREGS = (5, 6, 7, 8)
_R_SCRATCH = 9
_REGS = 10

_ARITH = ("ADD", "SUB", "MUL", "CMP_LT", "CMP_LE", "CMP_EQ", "CMP_NE")


@dataclass(frozen=True)
class GeneratedCase:
    kernel: KernelDef
    arg_values: tuple[int, ...]
    initial_memory: tuple[int, ...]

    @property
    def launch(self) -> LaunchSpec:
        return LaunchSpec(self.kernel, self.arg_values, self.initial_memory)


def _rand_dims(rng: random.Random, max_blocks: int, max_threads: int):
    def split(total_budget, ndims_weights):
        dims = [1, 1, 1]
        total = rng.randint(1, total_budget)
        if rng.random() < ndims_weights:
            # multi-axis shape
            x = rng.randint(1, total)
            rest = max(1, total // x)
            y = rng.randint(1, rest)
            z = max(1, rest // y) if rng.random() < 0.3 else 1
            dims = [x, y, z]
        else:
            dims = [total, 1, 1]
        return Dim3(*dims)

    grid = split(max_blocks, 0.4)
    block = split(max_threads, 0.3)
    return grid, block


def random_kernel(
    seed: int, max_blocks: int = 64, max_threads: int = 32
) -> GeneratedCase:
    rng = random.Random(seed)
    grid, block = _rand_dims(rng, max_blocks, max_threads)
    nthreads = block.total
    n = grid.total * nthreads
    shared_words = max(nthreads, 1)

    body: list[Instruction] = []
    emit = body.append

    def v(x):
        return Imm(x) if isinstance(x, int) else Reg(x)

    # r_tid = linear thread id in block, r_lin = global linear id
    emit(Instruction("READ_SPECIAL", (Reg(_R_TID), SpecialReg("threadIdx", "x"))))
    emit(Instruction("READ_SPECIAL", (Reg(_R_SCRATCH), SpecialReg("threadIdx", "y"))))
    emit(Instruction("MUL", (Reg(_R_SCRATCH), Reg(_R_SCRATCH), Imm(block.x))))
    emit(Instruction("ADD", (Reg(_R_TID), Reg(_R_TID), Reg(_R_SCRATCH))))
    emit(Instruction("READ_SPECIAL", (Reg(_R_SCRATCH), SpecialReg("threadIdx", "z"))))
    emit(Instruction("MUL", (Reg(_R_SCRATCH), Reg(_R_SCRATCH),
                             Imm(block.x * block.y))))
    emit(Instruction("ADD", (Reg(_R_TID), Reg(_R_TID), Reg(_R_SCRATCH))))

    emit(Instruction("READ_SPECIAL", (Reg(_R_LIN), SpecialReg("blockIdx", "x"))))
    emit(Instruction("READ_SPECIAL", (Reg(_R_SCRATCH), SpecialReg("blockIdx", "y"))))
    emit(Instruction("MUL", (Reg(_R_SCRATCH), Reg(_R_SCRATCH), Imm(grid.x))))
    emit(Instruction("ADD", (Reg(_R_LIN), Reg(_R_LIN), Reg(_R_SCRATCH))))
    emit(Instruction("READ_SPECIAL", (Reg(_R_SCRATCH), SpecialReg("blockIdx", "z"))))
    emit(Instruction("MUL", (Reg(_R_SCRATCH), Reg(_R_SCRATCH),
                             Imm(grid.x * grid.y))))
    emit(Instruction("ADD", (Reg(_R_LIN), Reg(_R_LIN), Reg(_R_SCRATCH))))
    emit(Instruction("MUL", (Reg(_R_LIN), Reg(_R_LIN), Imm(nthreads))))
    emit(Instruction("ADD", (Reg(_R_LIN), Reg(_R_LIN), Reg(_R_TID))))

    # seed value registers from the input region and thread coordinates
    emit(Instruction("ADD", (Reg(_R_ADDR), Reg(_R_IN), Reg(_R_LIN))))
    emit(Instruction("LOAD_GLOBAL", (Reg(_VREGS[0]), Reg(_R_ADDR))))
    emit(Instruction("MOV", (Reg(_VREGS[1]), Reg(_R_LIN))))
    emit(Instruction("MOV", (Reg(_VREGS[2]), Reg(_R_TID))))
    emit(Instruction("CONST", (Reg(_VREGS[3]), Imm(rng.randint(-50, 50)))))

    label_no = 0
    n_segments = rng.randint(1, 3)
    for seg in range(n_segments):
        for _ in range(rng.randint(2, 5)):
            if rng.random() < 0.25:
                # guarded snippet: skip one op on a thread-id predicate
                label_no += 1
                skip = f"skip{label_no}"
                emit(Instruction("MOD", (Reg(_R_SCRATCH), Reg(_R_TID),
                                         Imm(rng.randint(2, 4)))))
                emit(Instruction("BRANCH", (Reg(_R_SCRATCH), skip)))
                emit(Instruction(rng.choice(_ARITH),
                                 (Reg(rng.choice(_VREGS)),
                                  v(rng.choice(_VREGS)),
                                  v(rng.choice(list(_VREGS) +
                                               [rng.randint(-9, 9)])))))
                emit(Instruction("MOV", (Reg(_R_SCRATCH), Imm(0)),
                                 label=skip))
            elif rng.random() < 0.2:
                # reload from a rotated input address
                emit(Instruction("MUL", (Reg(_R_ADDR), Reg(_R_LIN),
                                         Imm(rng.randint(2, 5)))))
                emit(Instruction("ADD", (Reg(_R_ADDR), Reg(_R_ADDR),
                                         Imm(rng.randint(0, 7)))))
                emit(Instruction("MOD", (Reg(_R_ADDR), Reg(_R_ADDR), Imm(n))))
                emit(Instruction("ADD", (Reg(_R_ADDR), Reg(_R_ADDR), Reg(_R_IN))))
                emit(Instruction("LOAD_GLOBAL", (Reg(rng.choice(_VREGS)),
                                                 Reg(_R_ADDR))))
            else:
                emit(Instruction(rng.choice(_ARITH),
                                 (Reg(rng.choice(_VREGS)),
                                  v(rng.choice(_VREGS)),
                                  v(rng.choice(list(_VREGS) +
                                               [rng.randint(-9, 9)])))))
        is_last = seg == n_segments - 1
        if not is_last and rng.random() < 0.6:
            if rng.random() < 0.7 and nthreads > 1:
                # shared-memory neighbor exchange around balanced barriers
                src = rng.choice(_VREGS)
                dst = rng.choice(_VREGS)
                emit(Instruction("STORE_SHARED", (Reg(_R_TID), Reg(src))))
                emit(Instruction("BAR_SYNC"))
                emit(Instruction("ADD", (Reg(_R_SCRATCH), Reg(_R_TID), Imm(1))))
                emit(Instruction("MOD", (Reg(_R_SCRATCH), Reg(_R_SCRATCH),
                                         Imm(nthreads))))
                emit(Instruction("LOAD_SHARED", (Reg(dst), Reg(_R_SCRATCH))))
                emit(Instruction("BAR_SYNC"))
            else:
                emit(Instruction("BAR_SYNC"))

    # per-thread-disjoint output store
    emit(Instruction("ADD", (Reg(_R_ADDR), Reg(_R_OUT), Reg(_R_LIN))))
    out_val = rng.choice(_VREGS)
    emit(Instruction("STORE_GLOBAL", (Reg(_R_ADDR), Reg(out_val))))

    if rng.random() < 0.35:
        # guarded early return after the last barrier
        label_no += 1
        tail = f"tail{label_no}"
        emit(Instruction("MOD", (Reg(_R_SCRATCH), Reg(_R_TID), Imm(2))))
        emit(Instruction("BRANCH", (Reg(_R_SCRATCH), tail)))
        emit(Instruction("RET"))
        emit(Instruction("MOV", (Reg(_R_SCRATCH), Imm(0)), label=tail))

    if rng.random() < 0.5:
        # cross-block atomic accumulation (commutative, order-free)
        acc = 2 * n + rng.randint(0, 1)
        emit(Instruction("ATOMIC_ADD_GLOBAL",
                         (Reg(_R_SCRATCH), Imm(acc),
                          v(rng.choice(list(_VREGS) + [1])))))
    emit(Instruction("RET"))

    kernel = KernelDef(
        name=f"gen{seed}",
        params=("in_base", "out_base"),
        grid=grid,
        block=block,
        register_count=_REGS,
        shared_words=shared_words,
        body=tuple(body),
    )
    inputs = [rng.randint(-100, 100) for _ in range(n)]
    memory = tuple(inputs + [0] * n + [0, 0])
    return GeneratedCase(kernel=kernel, arg_values=(0, n),
                         initial_memory=memory)
