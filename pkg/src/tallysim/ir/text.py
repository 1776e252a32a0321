"""Line-based textual format for the kernel IR.

Header lines::

    kernel <name>
    grid <x> <y> <z>
    block <x> <y> <z>
    regs <n>
    shared <n>
    param <name>          # repeated, in order
    flags inter_block_dependent   # optional

Body lines follow the headers::

    [label:] OPCODE operand*

Registers are written ``r<k>``, immediates as decimal integers, special
registers as ``kind.axis`` (e.g. ``blockIdx.x``).  ``#`` starts a comment.
"""

from __future__ import annotations

import re

from .core import (
    AXES,
    OPCODES,
    SPECIAL_KINDS,
    Dim3,
    Imm,
    Instruction,
    KernelDef,
    KernelValidationError,
    Reg,
    SpecialReg,
)

_LABEL_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_.]*):$")
_REG_RE = re.compile(r"^r(\d+)$")
_INT_RE = re.compile(r"^-?\d+$")
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


class ParseError(ValueError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, col {column}: {message}")
        self.line = line
        self.column = column


def _strip(line: str) -> str:
    hash_pos = line.find("#")
    if hash_pos >= 0:
        line = line[:hash_pos]
    return line.strip()


def _parse_operand(tok: str, sig: str, lineno: int):
    m = _REG_RE.match(tok)
    if m:
        if sig not in ("r", "v"):
            raise ParseError(f"unexpected register {tok!r}", lineno)
        return Reg(int(m.group(1)))
    if _INT_RE.match(tok):
        if sig != "v":
            raise ParseError(f"unexpected immediate {tok!r}", lineno)
        return Imm(int(tok))
    if "." in tok:
        kind, _, axis = tok.partition(".")
        if kind in SPECIAL_KINDS and axis in AXES:
            if sig != "s":
                raise ParseError(f"unexpected special register {tok!r}", lineno)
            return SpecialReg(kind, axis)
    if sig == "l":
        if not _NAME_RE.match(tok):
            raise ParseError(f"bad label name {tok!r}", lineno)
        return tok
    if sig == "r":
        raise ParseError(f"expected register, got {tok!r}", lineno)
    if sig == "s":
        raise ParseError(f"expected special register, got {tok!r}", lineno)
    raise ParseError(f"bad operand {tok!r}", lineno)


def parse_kernel(text: str) -> KernelDef:
    """Parse one kernel definition from IR source text."""
    name = None
    grid = None
    block = None
    regs = None
    shared = 0
    params: list[str] = []
    inter_block_dependent = False
    body: list[Instruction] = []
    in_body = False

    def dim3(toks, lineno):
        if len(toks) != 3:
            raise ParseError("expected three axis values", lineno)
        try:
            return Dim3(*(int(t) for t in toks))
        except ValueError as e:
            raise ParseError(str(e), lineno) from None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip(raw)
        if not line:
            continue
        toks = line.split()
        head = toks[0]
        if not in_body and head in ("kernel", "grid", "block", "regs", "shared",
                                    "param", "flags"):
            if head == "kernel":
                if len(toks) != 2 or not _NAME_RE.match(toks[1]):
                    raise ParseError("expected 'kernel <name>'", lineno)
                name = toks[1]
            elif head == "grid":
                grid = dim3(toks[1:], lineno)
            elif head == "block":
                block = dim3(toks[1:], lineno)
            elif head == "regs":
                if len(toks) != 2 or not toks[1].isdigit():
                    raise ParseError("expected 'regs <n>'", lineno)
                regs = int(toks[1])
            elif head == "shared":
                if len(toks) != 2 or not toks[1].isdigit():
                    raise ParseError("expected 'shared <n>'", lineno)
                shared = int(toks[1])
            elif head == "param":
                if len(toks) != 2 or not _NAME_RE.match(toks[1]):
                    raise ParseError("expected 'param <name>'", lineno)
                params.append(toks[1])
            elif head == "flags":
                for flag in toks[1:]:
                    if flag != "inter_block_dependent":
                        raise ParseError(f"unknown flag {flag!r}", lineno)
                    inter_block_dependent = True
            continue

        # body line
        in_body = True
        label = None
        m = _LABEL_RE.match(toks[0])
        if m:
            label = m.group(1)
            toks = toks[1:]
            if not toks:
                raise ParseError("label without instruction", lineno)
        opcode = toks[0]
        sig = OPCODES.get(opcode)
        if sig is None:
            raise ParseError(f"unknown opcode {opcode!r}", lineno)
        if len(toks) - 1 != len(sig):
            raise ParseError(
                f"{opcode} expects {len(sig)} operands, got {len(toks) - 1}", lineno
            )
        operands = tuple(
            _parse_operand(tok, s, lineno) for tok, s in zip(toks[1:], sig)
        )
        body.append(Instruction(opcode, operands, label=label))

    if name is None:
        raise ParseError("missing 'kernel <name>' header", 1)
    if grid is None or block is None or regs is None:
        raise ParseError(f"kernel {name}: missing grid/block/regs header", 1)
    try:
        return KernelDef(
            name=name,
            params=tuple(params),
            grid=grid,
            block=block,
            register_count=regs,
            shared_words=shared,
            body=tuple(body),
            inter_block_dependent=inter_block_dependent,
        )
    except KernelValidationError as e:
        raise ParseError(str(e), 1) from None


def _emit_operand(op) -> str:
    if isinstance(op, Reg):
        return f"r{op.index}"
    if isinstance(op, Imm):
        return str(op.value)
    if isinstance(op, SpecialReg):
        return f"{op.kind}.{op.axis}"
    return op  # label


def emit_kernel(k: KernelDef) -> str:
    """Emit IR source text; ``parse_kernel(emit_kernel(k)) == k``."""
    lines = [
        f"kernel {k.name}",
        f"grid {k.grid.x} {k.grid.y} {k.grid.z}",
        f"block {k.block.x} {k.block.y} {k.block.z}",
        f"regs {k.register_count}",
        f"shared {k.shared_words}",
    ]
    lines.extend(f"param {p}" for p in k.params)
    if k.inter_block_dependent:
        lines.append("flags inter_block_dependent")
    for ins in k.body:
        parts = []
        if ins.label is not None:
            parts.append(f"{ins.label}:")
        parts.append(ins.opcode)
        parts.extend(_emit_operand(op) for op in ins.operands)
        lines.append("  " + " ".join(parts))
    return "\n".join(lines) + "\n"
