"""Canonical pretty-printer: the formatting used by all golden tests.

parse(format_ast(u)) is structurally equal to u; positions are not preserved.
"""

from __future__ import annotations

from .lexer import escape_string
from .nodes import (
    AccumLoop,
    Atomic,
    Binary,
    ClassDef,
    CompilationUnit,
    Destroy,
    EffectAssign,
    Expr,
    FieldAccess,
    HandlerDef,
    If,
    Let,
    Literal,
    Name,
    Restart,
    ScriptDef,
    Spawn,
    Stmt,
    Unary,
    WaitNextTick,
)
from .typesys import Kind, Type

_PREC = {
    "||": 1, "&&": 2,
    "==": 3, "!=": 3, "<": 3, "<=": 3, ">": 3, ">=": 3,
    "+": 4, "-": 4, "*": 5, "/": 5,
}
_UNARY_PREC = 6


def format_type(ty: Type, loop_var: bool = False) -> str:
    if loop_var and ty.kind is Kind.REF:
        return ty.class_name or "?"
    return str(ty)


def format_expr(e: Expr, parent_prec: int = 0, right_side: bool = False) -> str:
    if isinstance(e, Literal):
        if e.lit_type.kind is Kind.NULL:
            return "null"
        if e.lit_type.kind is Kind.BOOL:
            return "true" if e.value else "false"
        if e.lit_type.kind is Kind.STRING:
            return escape_string(str(e.value))
        if e.lit_type.kind is Kind.NUMBER:
            text = repr(float(e.value))
            return text
        return str(e.value)
    if isinstance(e, Name):
        return e.ident
    if isinstance(e, FieldAccess):
        return f"{format_expr(e.base, _UNARY_PREC + 1)}.{e.name}"
    if isinstance(e, Unary):
        inner = format_expr(e.operand, _UNARY_PREC)
        text = f"{e.op}{inner}"
        return f"({text})" if parent_prec > _UNARY_PREC else text
    if isinstance(e, Binary):
        prec = _PREC[e.op]
        # Comparisons are non-associative; arithmetic and logic are left-associative.
        left = format_expr(e.left, prec)
        right = format_expr(e.right, prec + 1)
        text = f"{left} {e.op} {right}"
        if parent_prec > prec or (right_side and parent_prec == prec):
            return f"({text})"
        return text
    raise TypeError(f"unknown expression node {type(e).__name__}")


class _Printer:
    def __init__(self) -> None:
        self.lines: list[str] = []
        self.depth = 0

    def emit(self, text: str) -> None:
        self.lines.append("  " * self.depth + text)

    def block(self, stmts: list[Stmt], header: str, footer: str = "}") -> None:
        self.emit(header)
        self.depth += 1
        for s in stmts:
            self.stmt(s)
        self.depth -= 1
        self.emit(footer)

    def stmt(self, s: Stmt) -> None:
        if isinstance(s, Let):
            self.emit(f"let {s.name} = {format_expr(s.value)};")
        elif isinstance(s, EffectAssign):
            self.emit(f"{format_expr(s.target)} {s.op} {format_expr(s.value)};")
        elif isinstance(s, If):
            self.emit(f"if ({format_expr(s.cond)}) {{")
            while True:
                self.depth += 1
                for t in s.then:
                    self.stmt(t)
                self.depth -= 1
                if not s.els:
                    self.emit("}")
                    break
                if len(s.els) == 1 and isinstance(s.els[0], If):
                    s = s.els[0]
                    self.emit(f"}} else if ({format_expr(s.cond)}) {{")
                    continue
                self.emit("} else {")
                self.depth += 1
                for t in s.els:
                    self.stmt(t)
                self.depth -= 1
                self.emit("}")
                break
        elif isinstance(s, AccumLoop):
            head = (
                f"accum {format_type(s.acc_type)} {s.acc_name} with {s.combinator.value} "
                f"over {format_type(s.var_type, loop_var=True)} {s.var_name} "
                f"from {format_expr(s.source)} {{"
            )
            self.emit(head)
            self.depth += 1
            for t in s.block1:
                self.stmt(t)
            self.depth -= 1
            self.emit("} in {")
            self.depth += 1
            for t in s.block2:
                self.stmt(t)
            self.depth -= 1
            self.emit("}")
        elif isinstance(s, WaitNextTick):
            self.emit("waitNextTick;")
        elif isinstance(s, Atomic):
            self.block(s.body, "atomic {")
        elif isinstance(s, Spawn):
            fields = ", ".join(f"{n} = {format_expr(v)}" for n, v in s.fields)
            self.emit(f"spawn {s.class_name} {{{fields}}};" if fields else f"spawn {s.class_name} {{}};")
        elif isinstance(s, Destroy):
            self.emit(f"destroy {format_expr(s.target)};" if s.target is not None else "destroy;")
        elif isinstance(s, Restart):
            self.emit("restart;")
        else:
            raise TypeError(f"unknown statement node {type(s).__name__}")

    def class_def(self, c: ClassDef) -> None:
        self.emit(f"class {c.name} {{")
        self.depth += 1
        state = [f for f in c.state_fields if not f.synthetic]
        effects = [f for f in c.effect_fields if not f.synthetic]
        rules = [r for r in c.update_rules if not r.synthetic]
        if state:
            self.emit("state:")
            self.depth += 1
            for f in state:
                init = f" = {format_expr(f.init)}" if f.init is not None else ""
                self.emit(f"{format_type(f.ty)} {f.name}{init};")
            self.depth -= 1
        if effects:
            self.emit("effects:")
            self.depth += 1
            for f in effects:
                self.emit(f"{format_type(f.ty)} {f.name} : {f.combinator.value};")
            self.depth -= 1
        if rules:
            self.emit("update:")
            self.depth += 1
            for r in rules:
                self.emit(f"{r.target} = {format_expr(r.value)};")
            self.depth -= 1
        if c.constraints:
            self.emit("constraints:")
            self.depth += 1
            for e in c.constraints:
                self.emit(f"{format_expr(e)};")
            self.depth -= 1
        self.depth -= 1
        self.emit("}")


def format_ast(unit: CompilationUnit) -> str:
    """Deterministic canonical rendering of a compilation unit."""
    if not unit.classes and not unit.scripts and not unit.handlers:
        return ""
    p = _Printer()
    first = True
    for c in unit.classes:
        if not first:
            p.emit("")
        first = False
        p.class_def(c)
    for s in unit.scripts:
        if not first:
            p.emit("")
        first = False
        p.block(s.body, f"run {s.name}(this: {s.class_name}) {{")
    for h in unit.handlers:
        if not first:
            p.emit("")
        first = False
        p.block(h.body, f"on {h.class_name} when ({format_expr(h.condition)}) {{")
    return "\n".join(p.lines) + "\n"
