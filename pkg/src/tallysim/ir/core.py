"""Core types of the mini SIMT kernel IR.

A kernel is a straight-line-with-branches instruction list executed by every
thread of every block of a grid.  Machine words are signed 64-bit integers.
By convention the first ``len(params)`` registers of each thread are
initialized with the launch argument values; all other registers start at 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

_WORD_MASK = (1 << 64) - 1
_WORD_SIGN = 1 << 63


def wrap_word(v: int) -> int:
    """Wrap an integer to signed 64-bit two's-complement."""
    v &= _WORD_MASK
    return v - (1 << 64) if v & _WORD_SIGN else v


AXES = ("x", "y", "z")
SPECIAL_KINDS = ("blockIdx", "threadIdx", "gridDim", "blockDim")


@dataclass(frozen=True, order=True)
class Dim3:
    x: int
    y: int = 1
    z: int = 1

    def __post_init__(self):
        # Dim3 doubles as extent (grid/block dims, each axis >= 1, checked at
        # the point of use) and as a 3-D index (axes >= 0).
        if self.x < 0 or self.y < 0 or self.z < 0:
            raise ValueError(f"Dim3 axes must be non-negative, got {self}")

    @property
    def total(self) -> int:
        return self.x * self.y * self.z

    def axis(self, name: str) -> int:
        return getattr(self, name)

    def __iter__(self):
        yield self.x
        yield self.y
        yield self.z


def linearize(idx: Dim3, dims: Dim3) -> int:
    """Flatten a 3-D index into the canonical integer task index."""
    if idx.x >= dims.x or idx.y >= dims.y or idx.z >= dims.z:
        raise ValueError(f"index {idx} out of range for dims {dims}")
    return idx.x + idx.y * dims.x + idx.z * dims.x * dims.y


def delinearize(task_index: int, dims: Dim3) -> Dim3:
    """Inverse of :func:`linearize`."""
    if not 0 <= task_index < dims.total:
        raise ValueError(f"task index {task_index} out of range for dims {dims}")
    x = task_index % dims.x
    rest = task_index // dims.x
    return Dim3(x, rest % dims.y, rest // dims.y)


@dataclass(frozen=True)
class SpecialReg:
    kind: str  # blockIdx | threadIdx | gridDim | blockDim
    axis: str  # x | y | z

    def __post_init__(self):
        if self.kind not in SPECIAL_KINDS:
            raise ValueError(f"unknown special register kind {self.kind!r}")
        if self.axis not in AXES:
            raise ValueError(f"unknown axis {self.axis!r}")


@dataclass(frozen=True)
class Reg:
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("register index must be non-negative")


@dataclass(frozen=True)
class Imm:
    value: int


# opcode -> operand signature.  r = dest register, v = register-or-immediate,
# s = special register, l = label.
OPCODES = {
    "CONST": "rv",
    "MOV": "rv",
    "ADD": "rvv",
    "SUB": "rvv",
    "MUL": "rvv",
    "DIV": "rvv",
    "MOD": "rvv",
    "CMP_LT": "rvv",
    "CMP_LE": "rvv",
    "CMP_EQ": "rvv",
    "CMP_NE": "rvv",
    "READ_SPECIAL": "rs",
    "LOAD_GLOBAL": "rv",
    "STORE_GLOBAL": "vv",
    "ATOMIC_ADD_GLOBAL": "rvv",
    "LOAD_SHARED": "rv",
    "STORE_SHARED": "vv",
    "BAR_SYNC": "",
    "BRANCH": "vl",
    "JUMP": "l",
    "RET": "",
}


@dataclass(frozen=True)
class Instruction:
    opcode: str
    operands: tuple = ()
    label: str | None = None  # label attached to this body line, if any

    def __post_init__(self):
        sig = OPCODES.get(self.opcode)
        if sig is None:
            raise ValueError(f"unknown opcode {self.opcode!r}")
        if len(sig) != len(self.operands):
            raise ValueError(
                f"{self.opcode} expects {len(sig)} operands, got {len(self.operands)}"
            )
        for kind, op in zip(sig, self.operands):
            if kind == "r" and not isinstance(op, Reg):
                raise ValueError(f"{self.opcode}: destination must be a register")
            if kind == "v" and not isinstance(op, (Reg, Imm)):
                raise ValueError(f"{self.opcode}: expected register or immediate")
            if kind == "s" and not isinstance(op, SpecialReg):
                raise ValueError(f"{self.opcode}: expected a special register")
            if kind == "l" and not isinstance(op, str):
                raise ValueError(f"{self.opcode}: expected a label name")

    def with_label(self, label: str | None) -> "Instruction":
        return replace(self, label=label)


class KernelValidationError(ValueError):
    pass


@dataclass(frozen=True)
class KernelDef:
    name: str
    params: tuple[str, ...]
    grid: Dim3
    block: Dim3
    register_count: int
    shared_words: int
    body: tuple[Instruction, ...]
    inter_block_dependent: bool = False

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        object.__setattr__(self, "body", tuple(self.body))
        self.validate()

    def validate(self) -> None:
        if not self.body:
            raise KernelValidationError(f"{self.name}: empty body")
        for which, d in (("grid", self.grid), ("block", self.block)):
            if d.x < 1 or d.y < 1 or d.z < 1:
                raise KernelValidationError(
                    f"{self.name}: {which} axes must be >= 1, got {d}"
                )
        if self.register_count < len(self.params):
            raise KernelValidationError(
                f"{self.name}: register_count {self.register_count} < "
                f"param count {len(self.params)}"
            )
        if self.shared_words < 0:
            raise KernelValidationError(f"{self.name}: negative shared_words")
        if len(set(self.params)) != len(self.params):
            raise KernelValidationError(f"{self.name}: duplicate parameter names")
        labels: dict[str, int] = {}
        for i, ins in enumerate(self.body):
            if ins.label is not None:
                if ins.label in labels:
                    raise KernelValidationError(
                        f"{self.name}: duplicate label {ins.label!r}"
                    )
                labels[ins.label] = i
        for ins in self.body:
            for kind, op in zip(OPCODES[ins.opcode], ins.operands):
                if kind == "l" and op not in labels:
                    raise KernelValidationError(
                        f"{self.name}: unresolved label {op!r} in {ins.opcode}"
                    )
                if isinstance(op, Reg) and op.index >= self.register_count:
                    raise KernelValidationError(
                        f"{self.name}: register r{op.index} out of range "
                        f"(regs {self.register_count})"
                    )
        if self.body[-1].opcode not in ("RET", "JUMP"):
            raise KernelValidationError(
                f"{self.name}: body must end with RET or JUMP"
            )

    @property
    def labels(self) -> dict[str, int]:
        return {
            ins.label: i for i, ins in enumerate(self.body) if ins.label is not None
        }


@dataclass(frozen=True)
class LaunchSpec:
    """A kernel plus arguments and a flat global-memory image."""

    kernel: KernelDef
    arg_values: tuple[int, ...]
    global_memory: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "arg_values", tuple(self.arg_values))
        object.__setattr__(self, "global_memory", tuple(self.global_memory))
        if len(self.arg_values) != len(self.kernel.params):
            raise ValueError(
                f"{self.kernel.name}: expected {len(self.kernel.params)} args, "
                f"got {len(self.arg_values)}"
            )


COMPLETED = "Completed"
DIVERGENT_BARRIER = "DivergentBarrier"
STEP_LIMIT_EXCEEDED = "StepLimitExceeded"
MEMORY_FAULT = "MemoryFault"


@dataclass(frozen=True)
class ExecResult:
    status: str
    final_memory: tuple[int, ...] | None
    steps_executed: int

    def __post_init__(self):
        if self.status == COMPLETED and self.final_memory is None:
            raise ValueError("Completed result must carry final memory")
        if self.status != COMPLETED and self.final_memory is not None:
            raise ValueError("final_memory is defined only for Completed results")
