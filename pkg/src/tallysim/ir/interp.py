"""Deterministic interpreter for the kernel IR.

Blocks execute serialized in a seed-derived permutation (cross-block
interaction is restricted to sequentially consistent atomics, so a seeded
permutation is enough to exercise order sensitivity).  Within a block,
runnable threads advance in round-robin order between barrier points: each
thread runs until it hits BAR_SYNC or RET, then the next thread runs.

A barrier releases only when every non-returned thread of the block has
arrived and no thread of the block has returned; a block where some threads
wait at a barrier while others have returned is reported as DivergentBarrier
instead of stalling forever.

``MemTrigger`` models an asynchronous host-side store: when a watched global
word first reaches a given value, another global word is overwritten.  The
scheduler uses this to flip a preemption flag at a precise progress point
inside an otherwise serialized run.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .core import (
    COMPLETED,
    DIVERGENT_BARRIER,
    MEMORY_FAULT,
    STEP_LIMIT_EXCEEDED,
    Dim3,
    ExecResult,
    Imm,
    LaunchSpec,
    Reg,
    SpecialReg,
    wrap_word,
)

DEFAULT_STEP_LIMIT = 10**7

_RUNNABLE = 0
_WAITING = 1
_RETURNED = 2


@dataclass(frozen=True)
class MemTrigger:
    watch_addr: int
    watch_value: int
    store_addr: int
    store_value: int


class _Fault(Exception):
    pass


def _compile(kernel):
    """Lower the body to tuples the inner loop can dispatch on cheaply."""
    labels = kernel.labels
    prog = []
    for ins in kernel.body:
        ops = []
        for op in ins.operands:
            if isinstance(op, Reg):
                ops.append((True, op.index))
            elif isinstance(op, Imm):
                ops.append((False, wrap_word(op.value)))
            elif isinstance(op, SpecialReg):
                ops.append((op.kind, op.axis))
            else:  # label
                ops.append(labels[op])
        prog.append((ins.opcode, ops))
    return prog


def interpret(
    launch: LaunchSpec,
    schedule_seed: int = 0,
    step_limit: int = DEFAULT_STEP_LIMIT,
    triggers: tuple[MemTrigger, ...] = (),
) -> ExecResult:
    """Execute every block of the launch and return the final memory image."""
    kernel = launch.kernel
    prog = _compile(kernel)
    gmem = list(launch.global_memory)
    gsize = len(gmem)
    nparams = len(launch.arg_values)
    args = [wrap_word(v) for v in launch.arg_values]
    grid, block = kernel.grid, kernel.block
    nthreads = block.total
    steps = 0
    pending_triggers = list(triggers)

    block_order = [
        Dim3(bx, by, bz)
        for bz in range(grid.z)
        for by in range(grid.y)
        for bx in range(grid.x)
    ]
    random.Random(schedule_seed).shuffle(block_order)

    specials_static = {
        ("gridDim", "x"): grid.x,
        ("gridDim", "y"): grid.y,
        ("gridDim", "z"): grid.z,
        ("blockDim", "x"): block.x,
        ("blockDim", "y"): block.y,
        ("blockDim", "z"): block.z,
    }

    def fire_triggers(addr):
        nonlocal pending_triggers
        if not pending_triggers:
            return
        still = []
        for t in pending_triggers:
            if t.watch_addr == addr and gmem[addr] == t.watch_value:
                if not 0 <= t.store_addr < gsize:
                    raise _Fault(f"trigger store address {t.store_addr}")
                gmem[t.store_addr] = wrap_word(t.store_value)
            else:
                still.append(t)
        pending_triggers = still

    def gcheck(addr):
        if not 0 <= addr < gsize:
            raise _Fault(f"global address {addr}")
        return addr

    for bidx in block_order:
        shared = [0] * kernel.shared_words
        specials = dict(specials_static)
        specials[("blockIdx", "x")] = bidx.x
        specials[("blockIdx", "y")] = bidx.y
        specials[("blockIdx", "z")] = bidx.z

        pcs = [0] * nthreads
        states = [_RUNNABLE] * nthreads
        regfiles = []
        tid = 0
        for tz in range(block.z):
            for ty in range(block.y):
                for tx in range(block.x):
                    regs = [0] * kernel.register_count
                    regs[:nparams] = args
                    regfiles.append((regs, tx, ty, tz))
                    tid += 1

        def run_thread(t):
            """Advance thread t to its next barrier point or return."""
            nonlocal steps
            pc = pcs[t]
            regs, tx, ty, tz = regfiles[t]
            sspec = {
                ("threadIdx", "x"): tx,
                ("threadIdx", "y"): ty,
                ("threadIdx", "z"): tz,
            }
            while True:
                opcode, ops = prog[pc]
                steps += 1
                if steps > step_limit:
                    return STEP_LIMIT_EXCEEDED
                pc += 1
                if opcode == "BAR_SYNC":
                    pcs[t] = pc
                    states[t] = _WAITING
                    return None
                if opcode == "RET":
                    pcs[t] = pc
                    states[t] = _RETURNED
                    return None
                if opcode == "JUMP":
                    pc = ops[0]
                    continue
                if opcode == "BRANCH":
                    isreg, v = ops[0]
                    cond = regs[v] if isreg else v
                    if cond != 0:
                        pc = ops[1]
                    continue
                if opcode == "READ_SPECIAL":
                    key = ops[1]
                    regs[ops[0][1]] = sspec[key] if key in sspec else specials[key]
                    continue

                # value operands
                def val(o):
                    isreg, v = o
                    return regs[v] if isreg else v

                if opcode == "CONST" or opcode == "MOV":
                    regs[ops[0][1]] = val(ops[1])
                elif opcode == "ADD":
                    regs[ops[0][1]] = wrap_word(val(ops[1]) + val(ops[2]))
                elif opcode == "SUB":
                    regs[ops[0][1]] = wrap_word(val(ops[1]) - val(ops[2]))
                elif opcode == "MUL":
                    regs[ops[0][1]] = wrap_word(val(ops[1]) * val(ops[2]))
                elif opcode == "DIV":
                    a, b = val(ops[1]), val(ops[2])
                    # C-style truncation; division by zero yields 0
                    regs[ops[0][1]] = 0 if b == 0 else wrap_word(
                        abs(a) // abs(b) * (1 if (a >= 0) == (b >= 0) else -1)
                    )
                elif opcode == "MOD":
                    a, b = val(ops[1]), val(ops[2])
                    regs[ops[0][1]] = 0 if b == 0 else wrap_word(
                        a - b * (abs(a) // abs(b) * (1 if (a >= 0) == (b >= 0) else -1))
                    )
                elif opcode == "CMP_LT":
                    regs[ops[0][1]] = 1 if val(ops[1]) < val(ops[2]) else 0
                elif opcode == "CMP_LE":
                    regs[ops[0][1]] = 1 if val(ops[1]) <= val(ops[2]) else 0
                elif opcode == "CMP_EQ":
                    regs[ops[0][1]] = 1 if val(ops[1]) == val(ops[2]) else 0
                elif opcode == "CMP_NE":
                    regs[ops[0][1]] = 1 if val(ops[1]) != val(ops[2]) else 0
                elif opcode == "LOAD_GLOBAL":
                    regs[ops[0][1]] = gmem[gcheck(val(ops[1]))]
                elif opcode == "STORE_GLOBAL":
                    addr = gcheck(val(ops[0]))
                    gmem[addr] = val(ops[1])
                    fire_triggers(addr)
                elif opcode == "ATOMIC_ADD_GLOBAL":
                    addr = gcheck(val(ops[1]))
                    prior = gmem[addr]
                    gmem[addr] = wrap_word(prior + val(ops[2]))
                    regs[ops[0][1]] = prior
                    fire_triggers(addr)
                elif opcode == "LOAD_SHARED":
                    addr = val(ops[1])
                    if not 0 <= addr < kernel.shared_words:
                        raise _Fault(f"shared address {addr}")
                    regs[ops[0][1]] = shared[addr]
                elif opcode == "STORE_SHARED":
                    addr = val(ops[0])
                    if not 0 <= addr < kernel.shared_words:
                        raise _Fault(f"shared address {addr}")
                    shared[addr] = val(ops[1])
                else:  # pragma: no cover - opcode table is closed
                    raise AssertionError(opcode)

        try:
            while True:
                ran_any = False
                for t in range(nthreads):
                    if states[t] == _RUNNABLE:
                        ran_any = True
                        status = run_thread(t)
                        if status is not None:
                            return ExecResult(status, None, steps)
                if all(s == _RETURNED for s in states):
                    break
                if not ran_any:
                    if any(s == _RETURNED for s in states):
                        return ExecResult(DIVERGENT_BARRIER, None, steps)
                    # all threads waiting at a barrier: release
                    for t in range(nthreads):
                        states[t] = _RUNNABLE
        except _Fault:
            return ExecResult(MEMORY_FAULT, None, steps)

    return ExecResult(COMPLETED, tuple(gmem), steps)
