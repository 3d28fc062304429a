"""Diagnostics: stable error codes, source locations, and the compile-error carrier."""

from __future__ import annotations

from dataclasses import dataclass, field

# Stable diagnostic codes. Error codes abort compilation, warning codes do not.
E_LEX = "E_LEX"
E_SYNTAX = "E_SYNTAX"
E_DUP_CLASS = "E_DUP_CLASS"
E_DUP_FIELD = "E_DUP_FIELD"
E_UNKNOWN_NAME = "E_UNKNOWN_NAME"
E_UNKNOWN_CLASS = "E_UNKNOWN_CLASS"
E_TYPE = "E_TYPE"
E_READ_EFFECT = "E_READ_EFFECT"
E_WRITE_STATE = "E_WRITE_STATE"
E_READ_ACC_IN_BLOCK1 = "E_READ_ACC_IN_BLOCK1"
E_WRITE_ACC_IN_BLOCK2 = "E_WRITE_ACC_IN_BLOCK2"
E_WAIT_IN_ACCUM = "E_WAIT_IN_ACCUM"
E_WAIT_IN_ATOMIC = "E_WAIT_IN_ATOMIC"
E_WAIT_IN_HANDLER = "E_WAIT_IN_HANDLER"
E_UNPARTITIONED_STATE = "E_UNPARTITIONED_STATE"
E_ATOMIC_IN_ACCUM = "E_ATOMIC_IN_ACCUM"
E_NESTED_ATOMIC = "E_NESTED_ATOMIC"
E_RESTART_OUTSIDE_HANDLER = "E_RESTART_OUTSIDE_HANDLER"
E_RESTART_NO_SCRIPT = "E_RESTART_NO_SCRIPT"
E_MULTIPLE_SCRIPTS = "E_MULTIPLE_SCRIPTS"
E_SHADOW = "E_SHADOW"
E_EXTENT_USE = "E_EXTENT_USE"
E_CONSTRAINED_IN_ACCUM = "E_CONSTRAINED_IN_ACCUM"
E_SPAWN_IN_ATOMIC = "E_SPAWN_IN_ATOMIC"
E_BAD_COMBINATOR = "E_BAD_COMBINATOR"
E_BAD_RULE_TARGET = "E_BAD_RULE_TARGET"
E_NONCONST_INIT = "E_NONCONST_INIT"
E_RESERVED_NAME = "E_RESERVED_NAME"
E_UNCOMPILABLE = "E_UNCOMPILABLE"
W_UNUSED = "W_UNUSED"


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    message: str
    line: int = 1
    column: int = 1

    def __str__(self) -> str:
        return f"{self.line}:{self.column}: {self.severity}: {self.code}: {self.message}"


class CompileError(Exception):
    """Raised when compilation produced at least one error diagnostic."""

    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))


@dataclass
class DiagnosticSink:
    """Collects diagnostics during a pass; raises at pass end if any error was seen."""

    diagnostics: list[Diagnostic] = field(default_factory=list)

    def error(self, code: str, message: str, pos: tuple[int, int] = (1, 1)) -> None:
        self.diagnostics.append(Diagnostic("error", code, message, pos[0], pos[1]))

    def warning(self, code: str, message: str, pos: tuple[int, int] = (1, 1)) -> None:
        self.diagnostics.append(Diagnostic("warning", code, message, pos[0], pos[1]))

    @property
    def has_errors(self) -> bool:
        return any(d.severity == "error" for d in self.diagnostics)

    def check(self) -> None:
        if self.has_errors:
            raise CompileError(self.diagnostics)
