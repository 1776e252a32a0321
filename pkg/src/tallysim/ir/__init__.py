from .core import (
    COMPLETED,
    DIVERGENT_BARRIER,
    MEMORY_FAULT,
    STEP_LIMIT_EXCEEDED,
    Dim3,
    ExecResult,
    Imm,
    Instruction,
    KernelDef,
    KernelValidationError,
    LaunchSpec,
    Reg,
    SpecialReg,
    delinearize,
    linearize,
    wrap_word,
)
from .interp import DEFAULT_STEP_LIMIT, MemTrigger, interpret
from .text import ParseError, emit_kernel, parse_kernel

__all__ = [
    "COMPLETED",
    "DIVERGENT_BARRIER",
    "MEMORY_FAULT",
    "STEP_LIMIT_EXCEEDED",
    "DEFAULT_STEP_LIMIT",
    "Dim3",
    "ExecResult",
    "Imm",
    "Instruction",
    "KernelDef",
    "KernelValidationError",
    "LaunchSpec",
    "MemTrigger",
    "ParseError",
    "Reg",
    "SpecialReg",
    "delinearize",
    "emit_kernel",
    "interpret",
    "linearize",
    "parse_kernel",
    "wrap_word",
]
