"""AST node definitions.

Structural equality ignores source positions and analysis annotations
(those fields use compare=False), so parse(format(u)) == u can be asserted
directly on trees.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

from .typesys import Combinator, Type

Pos = tuple[int, int]


def _pos_field() -> Pos:
    return (1, 1)


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

@dataclass(eq=True)
class Expr:
    pass


@dataclass
class Literal(Expr):
    value: object  # float | int | bool | str | None (null)
    lit_type: Type
    pos: Pos = field(default_factory=_pos_field, compare=False)
    ty: Optional[Type] = field(default=None, compare=False, repr=False)


@dataclass
class Name(Expr):
    ident: str
    pos: Pos = field(default_factory=_pos_field, compare=False)
    ty: Optional[Type] = field(default=None, compare=False, repr=False)
    # Filled by analysis: "state" | "effect" | "local" | "loopvar" | "acc" | "extent" | "builtin"
    res: Optional[str] = field(default=None, compare=False, repr=False)


@dataclass
class FieldAccess(Expr):
    base: Expr
    name: str
    pos: Pos = field(default_factory=_pos_field, compare=False)
    ty: Optional[Type] = field(default=None, compare=False, repr=False)
    # Filled by analysis: ("state"|"effect", class_name)
    res: Optional[tuple[str, str]] = field(default=None, compare=False, repr=False)


@dataclass
class Unary(Expr):
    op: str  # "-" | "!"
    operand: Expr
    pos: Pos = field(default_factory=_pos_field, compare=False)
    ty: Optional[Type] = field(default=None, compare=False, repr=False)


@dataclass
class Binary(Expr):
    op: str  # + - * / == != < <= > >= && ||
    left: Expr
    right: Expr
    pos: Pos = field(default_factory=_pos_field, compare=False)
    ty: Optional[Type] = field(default=None, compare=False, repr=False)


# ---------------------------------------------------------------------------
# Statements
# ---------------------------------------------------------------------------

@dataclass
class Stmt:
    pass


@dataclass
class Let(Stmt):
    name: str
    value: Expr
    pos: Pos = field(default_factory=_pos_field, compare=False)
    ty: Optional[Type] = field(default=None, compare=False, repr=False)


@dataclass
class EffectAssign(Stmt):
    """`target <- value` (merge) or `target <= value` (set insert)."""

    target: Union[Name, FieldAccess]
    value: Expr
    op: str  # "<-" | "<="
    pos: Pos = field(default_factory=_pos_field, compare=False)
    stmt_id: int = field(default=-1, compare=False)
    # Analysis: True when this emission goes through the restart override lane.
    override: bool = field(default=False, compare=False)


@dataclass
class If(Stmt):
    cond: Expr
    then: list[Stmt]
    els: list[Stmt]
    pos: Pos = field(default_factory=_pos_field, compare=False)


@dataclass
class AccumLoop(Stmt):
    acc_name: str
    acc_type: Type
    combinator: Combinator
    var_name: str
    var_type: Type
    source: Expr
    block1: list[Stmt]
    block2: list[Stmt]
    pos: Pos = field(default_factory=_pos_field, compare=False)


@dataclass
class WaitNextTick(Stmt):
    pos: Pos = field(default_factory=_pos_field, compare=False)


@dataclass
class Atomic(Stmt):
    body: list[Stmt]
    pos: Pos = field(default_factory=_pos_field, compare=False)
    site_id: int = field(default=-1, compare=False)
    synthetic: bool = field(default=False, compare=False)  # compiler-wrapped singleton


@dataclass
class Spawn(Stmt):
    class_name: str
    fields: list[tuple[str, Expr]]
    pos: Pos = field(default_factory=_pos_field, compare=False)
    stmt_id: int = field(default=-1, compare=False)


@dataclass
class Destroy(Stmt):
    target: Optional[Expr]  # None destroys self
    pos: Pos = field(default_factory=_pos_field, compare=False)
    stmt_id: int = field(default=-1, compare=False)


@dataclass
class Restart(Stmt):
    """Reset a multi-tick script's program counter; legal only in handlers."""

    pos: Pos = field(default_factory=_pos_field, compare=False)
    stmt_id: int = field(default=-1, compare=False)


# ---------------------------------------------------------------------------
# Declarations
# ---------------------------------------------------------------------------

@dataclass
class FieldDecl:
    name: str
    ty: Type
    init: Optional[Expr]
    pos: Pos = field(default_factory=_pos_field, compare=False)
    synthetic: bool = field(default=False, compare=False)


@dataclass
class EffectDecl:
    name: str
    ty: Type
    combinator: Combinator
    pos: Pos = field(default_factory=_pos_field, compare=False)
    synthetic: bool = field(default=False, compare=False)


@dataclass
class UpdateRule:
    target: str
    value: Expr
    pos: Pos = field(default_factory=_pos_field, compare=False)
    synthetic: bool = field(default=False, compare=False)


@dataclass
class ClassDef:
    name: str
    state_fields: list[FieldDecl]
    effect_fields: list[EffectDecl]
    update_rules: list[UpdateRule]
    constraints: list[Expr]
    pos: Pos = field(default_factory=_pos_field, compare=False)

    def state_field(self, name: str) -> Optional[FieldDecl]:
        for f in self.state_fields:
            if f.name == name:
                return f
        return None

    def effect_field(self, name: str) -> Optional[EffectDecl]:
        for f in self.effect_fields:
            if f.name == name:
                return f
        return None


@dataclass
class ScriptDef:
    name: str
    class_name: str
    body: list[Stmt]
    pos: Pos = field(default_factory=_pos_field, compare=False)


@dataclass
class HandlerDef:
    class_name: str
    condition: Expr
    body: list[Stmt]
    pos: Pos = field(default_factory=_pos_field, compare=False)
    may_restart: bool = field(default=False, compare=False)


@dataclass
class CompilationUnit:
    classes: list[ClassDef]
    scripts: list[ScriptDef]
    handlers: list[HandlerDef]

    def class_def(self, name: str) -> Optional[ClassDef]:
        for c in self.classes:
            if c.name == name:
                return c
        return None

    def script_for(self, class_name: str) -> Optional[ScriptDef]:
        for s in self.scripts:
            if s.class_name == class_name:
                return s
        return None

    def handlers_for(self, class_name: str) -> list[HandlerDef]:
        return [h for h in self.handlers if h.class_name == class_name]


def walk_stmts(stmts: list[Stmt]):
    """Yield every statement in a block, depth first, including nested blocks."""
    for s in stmts:
        yield s
        if isinstance(s, If):
            yield from walk_stmts(s.then)
            yield from walk_stmts(s.els)
        elif isinstance(s, AccumLoop):
            yield from walk_stmts(s.block1)
            yield from walk_stmts(s.block2)
        elif isinstance(s, Atomic):
            yield from walk_stmts(s.body)


def walk_exprs(e: Expr):
    """Yield every sub-expression of e, including e itself."""
    yield e
    if isinstance(e, FieldAccess):
        yield from walk_exprs(e.base)
    elif isinstance(e, Unary):
        yield from walk_exprs(e.operand)
    elif isinstance(e, Binary):
        yield from walk_exprs(e.left)
        yield from walk_exprs(e.right)
