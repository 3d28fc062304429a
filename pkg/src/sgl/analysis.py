"""Semantic analysis and lowering.

Four jobs, in order:

1. check_access — resolve every identifier, type-check expressions, and
   enforce the access discipline: state is read-only, effects are
   write-only, accumulators are write-only in block1 and read-only in
   block2, waitNextTick is banned inside accum blocks / atomic blocks /
   handlers.
2. transaction wrapping — effect assignments that feed constrained state
   fields and sit outside an atomic block are wrapped as singleton
   transactions, so the admission engine sees every write to a
   constrained variable.
3. lower_handlers / lower_multitick — handlers become per-tick conditional
   preludes; scripts are split at each waitNextTick into single-tick
   segments dispatched on a synthesized program-counter state field.
4. composition — per class, one single-tick statement list (preludes +
   segment dispatch) that both the plan compiler and the reference
   interpreter consume.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field as dc_field

from . import typesys
from .diagnostics import (
    CompileError,
    DiagnosticSink,
    E_ATOMIC_IN_ACCUM,
    E_BAD_COMBINATOR,
    E_BAD_RULE_TARGET,
    E_CONSTRAINED_IN_ACCUM,
    E_EXTENT_USE,
    E_MULTIPLE_SCRIPTS,
    E_NESTED_ATOMIC,
    E_NONCONST_INIT,
    E_READ_ACC_IN_BLOCK1,
    E_READ_EFFECT,
    E_RESERVED_NAME,
    E_RESTART_NO_SCRIPT,
    E_RESTART_OUTSIDE_HANDLER,
    E_SHADOW,
    E_SPAWN_IN_ATOMIC,
    E_TYPE,
    E_UNKNOWN_CLASS,
    E_UNKNOWN_NAME,
    E_WAIT_IN_ACCUM,
    E_WAIT_IN_ATOMIC,
    E_WAIT_IN_HANDLER,
    E_WRITE_ACC_IN_BLOCK2,
    E_WRITE_STATE,
)
from .formatter import format_ast
from .nodes import (
    AccumLoop,
    Atomic,
    Binary,
    ClassDef,
    CompilationUnit,
    Destroy,
    EffectAssign,
    EffectDecl,
    Expr,
    FieldAccess,
    FieldDecl,
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
    UpdateRule,
    WaitNextTick,
    walk_exprs,
    walk_stmts,
)
from .parser import parse_source
from .typesys import BOOL, INT, NULL, NUMBER, STRING, Combinator, Kind, Type, assignable, combinator_accepts

BUILTIN_ID = "id"
BUILTIN_TICK = "tick"
TXN_STATUS_FIELD = "lastTxnStatus"
PC_FIELD = "$pc"
PC_EFFECT = "$pc_next"
RESERVED_FIELDS = frozenset({BUILTIN_ID, BUILTIN_TICK, TXN_STATUS_FIELD})


@dataclass
class LoweredScript:
    """A multi-tick script split into single-tick segments.

    Segment k runs when the program counter equals k; every control path in
    a segment ends by emitting the next pc value on the pc effect channel.
    """

    class_name: str
    segments: list[list[Stmt]]
    pc_field: str = PC_FIELD
    pc_effect: str = PC_EFFECT


@dataclass
class ClassInfo:
    cdef: ClassDef
    tick_body: list[Stmt]
    segment_count: int
    has_script: bool
    constrained_state: list[str]
    constrained_effects: list[str]
    atomic_sites: list[int]
    defaults: dict[str, object]
    # Per update rule target: effect fields the rule reads that lack an
    # identity (avg/min/max); if absent the rule is skipped for that object.
    rule_gating_effects: dict[str, list[str]]


@dataclass
class AnalyzedUnit:
    unit: CompilationUnit
    classes: dict[str, ClassInfo]
    source_hash: str
    stmt_count: int
    site_count: int

    def class_info(self, name: str) -> ClassInfo:
        return self.classes[name]


# ---------------------------------------------------------------------------
# Scopes
# ---------------------------------------------------------------------------


class _Scope:
    def __init__(self, parent: "_Scope | None" = None):
        self.parent = parent
        self.bindings: dict[str, tuple[str, Type]] = {}  # name -> (kind, type)

    def lookup(self, name: str) -> tuple[str, Type] | None:
        s: _Scope | None = self
        while s is not None:
            if name in s.bindings:
                return s.bindings[name]
            s = s.parent
        return None

    def bind(self, name: str, kind: str, ty: Type) -> None:
        self.bindings[name] = (kind, ty)


@dataclass
class _Ctx:
    cls: ClassDef
    scope: _Scope
    in_handler: bool = False
    in_atomic: bool = False
    in_block1: bool = False
    in_accum: bool = False
    allow_effect_read: bool = False  # update rules only
    constraint: bool = False


# ---------------------------------------------------------------------------
# The checker
# ---------------------------------------------------------------------------


class _Checker:
    def __init__(self, unit: CompilationUnit):
        self.unit = unit
        self.sink = DiagnosticSink()
        self.class_names = {c.name for c in unit.classes}
        self._acc_combinators: dict[str, Combinator] = {}

    # -- expression resolution ------------------------------------------------

    def resolve_expr(self, e: Expr, ctx: _Ctx) -> Type:
        ty = self._resolve(e, ctx)
        e.ty = ty
        return ty

    def _resolve(self, e: Expr, ctx: _Ctx) -> Type:
        if isinstance(e, Literal):
            return e.lit_type
        if isinstance(e, Name):
            return self._resolve_name(e, ctx)
        if isinstance(e, FieldAccess):
            return self._resolve_field(e, ctx)
        if isinstance(e, Unary):
            t = self.resolve_expr(e.operand, ctx)
            if e.op == "-":
                if not t.is_numeric:
                    self.sink.error(E_TYPE, f"unary '-' needs a numeric operand, got {t}", e.pos)
                    return NUMBER
                return t
            if not (t.kind is Kind.BOOL):
                self.sink.error(E_TYPE, f"'!' needs a bool operand, got {t}", e.pos)
            return BOOL
        if isinstance(e, Binary):
            lt = self.resolve_expr(e.left, ctx)
            rt = self.resolve_expr(e.right, ctx)
            op = e.op
            if op in ("+", "-", "*", "/"):
                if not (lt.is_numeric and rt.is_numeric):
                    self.sink.error(E_TYPE, f"'{op}' needs numeric operands, got {lt} and {rt}", e.pos)
                    return NUMBER
                return INT if lt.kind is Kind.INT and rt.kind is Kind.INT else NUMBER
            if op in ("<", "<=", ">", ">="):
                if not (lt.is_numeric and rt.is_numeric):
                    self.sink.error(E_TYPE, f"'{op}' needs numeric operands, got {lt} and {rt}", e.pos)
                return BOOL
            if op in ("==", "!="):
                ok = (
                    (lt.is_numeric and rt.is_numeric)
                    or lt == rt
                    or (lt.kind is Kind.REF and rt.kind is Kind.NULL)
                    or (lt.kind is Kind.NULL and rt.kind is Kind.REF)
                )
                if not ok:
                    self.sink.error(E_TYPE, f"cannot compare {lt} with {rt}", e.pos)
                return BOOL
            if op in ("&&", "||"):
                if lt.kind is not Kind.BOOL or rt.kind is not Kind.BOOL:
                    self.sink.error(E_TYPE, f"'{op}' needs bool operands, got {lt} and {rt}", e.pos)
                return BOOL
            raise AssertionError(op)
        raise AssertionError(type(e))

    def _resolve_name(self, e: Name, ctx: _Ctx) -> Type:
        bound = ctx.scope.lookup(e.ident)
        if bound is not None:
            kind, ty = bound
            if kind == "acc_w":
                self.sink.error(
                    E_READ_ACC_IN_BLOCK1,
                    f"accumulator {e.ident!r} is write-only inside the loop body",
                    e.pos,
                )
            e.res = "acc" if kind in ("acc_w", "acc_r") else kind
            return ty
        f = ctx.cls.state_field(e.ident)
        if f is not None:
            e.res = "state"
            return f.ty
        ef = ctx.cls.effect_field(e.ident)
        if ef is not None:
            if not ctx.allow_effect_read:
                self.sink.error(E_READ_EFFECT, f"effect field {e.ident!r} is write-only during a tick", e.pos)
            e.res = "effect"
            return ef.ty
        if e.ident == BUILTIN_ID:
            e.res = "builtin"
            return INT
        if e.ident == BUILTIN_TICK and not ctx.constraint:
            e.res = "builtin"
            return INT
        if e.ident in self.class_names:
            e.res = "extent"
            return typesys.set_of(typesys.ref(e.ident))
        self.sink.error(E_UNKNOWN_NAME, f"unknown name {e.ident!r}", e.pos)
        e.res = "local"
        return NUMBER

    def _resolve_field(self, e: FieldAccess, ctx: _Ctx) -> Type:
        if isinstance(e.base, Name) and e.base.ident == "this":
            e.base.res = "this"
            e.base.ty = typesys.ref(ctx.cls.name)
            inner = Name(e.name, e.pos)
            ty = self._resolve_name(inner, ctx)
            e.res = (inner.res or "state", ctx.cls.name)
            return ty
        bt = self.resolve_expr(e.base, ctx)
        if bt.kind is not Kind.REF:
            self.sink.error(E_TYPE, f"'.{e.name}' needs a reference, got {bt}", e.pos)
            return NUMBER
        target = self.unit.class_def(bt.class_name or "")
        if target is None:
            self.sink.error(E_UNKNOWN_CLASS, f"unknown class {bt.class_name!r}", e.pos)
            return NUMBER
        if e.name == BUILTIN_ID:
            e.res = ("builtin", target.name)
            return INT
        f = target.state_field(e.name)
        if f is not None:
            e.res = ("state", target.name)
            return f.ty
        ef = target.effect_field(e.name)
        if ef is not None:
            if not ctx.allow_effect_read:
                self.sink.error(E_READ_EFFECT, f"effect field {target.name}.{e.name} is write-only during a tick", e.pos)
            e.res = ("effect", target.name)
            return ef.ty
        self.sink.error(E_UNKNOWN_NAME, f"class {target.name} has no field {e.name!r}", e.pos)
        e.res = ("state", target.name)
        return NUMBER

    # -- assignment targets ----------------------------------------------------

    def resolve_target(self, t: Expr, op: str, ctx: _Ctx) -> tuple[str, str, Type, Combinator] | None:
        """Returns (target_class, field_name, field_type, combinator) or None on error."""
        if isinstance(t, Name):
            bound = ctx.scope.lookup(t.ident)
            if bound is not None:
                kind, ty = bound
                if kind == "acc_w":
                    t.res = "acc"
                    t.ty = ty
                    comb = self._acc_combinators[t.ident]
                    return ("", t.ident, ty, comb)
                if kind == "acc_r":
                    self.sink.error(E_WRITE_ACC_IN_BLOCK2, f"accumulator {t.ident!r} is read-only after the loop", t.pos)
                    return None
                self.sink.error(E_TYPE, f"cannot assign an effect to {kind} {t.ident!r}", t.pos)
                return None
            if ctx.cls.state_field(t.ident) is not None or t.ident in RESERVED_FIELDS:
                self.sink.error(E_WRITE_STATE, f"state field {t.ident!r} can only change in the update phase", t.pos)
                return None
            ef = ctx.cls.effect_field(t.ident)
            if ef is None:
                self.sink.error(E_UNKNOWN_NAME, f"unknown effect field {t.ident!r}", t.pos)
                return None
            t.res = "effect"
            t.ty = ef.ty
            return (ctx.cls.name, ef.name, ef.ty, ef.combinator)
        if isinstance(t, FieldAccess):
            if isinstance(t.base, Name) and t.base.ident == "this":
                inner = Name(t.name, t.pos)
                out = self.resolve_target(inner, op, ctx)
                if out is not None:
                    t.res = ("effect", ctx.cls.name)
                    t.ty = inner.ty
                    t.base.res = "this"
                    t.base.ty = typesys.ref(ctx.cls.name)
                return out
            bt = self.resolve_expr(t.base, ctx)
            if bt.kind is not Kind.REF:
                self.sink.error(E_TYPE, f"effect target '.{t.name}' needs a reference, got {bt}", t.pos)
                return None
            target = self.unit.class_def(bt.class_name or "")
            if target is None:
                self.sink.error(E_UNKNOWN_CLASS, f"unknown class {bt.class_name!r}", t.pos)
                return None
            if target.state_field(t.name) is not None or t.name in RESERVED_FIELDS:
                self.sink.error(E_WRITE_STATE, f"state field {target.name}.{t.name} can only change in the update phase", t.pos)
                return None
            ef = target.effect_field(t.name)
            if ef is None:
                self.sink.error(E_UNKNOWN_NAME, f"class {target.name} has no effect field {t.name!r}", t.pos)
                return None
            t.res = ("effect", target.name)
            t.ty = ef.ty
            return (target.name, ef.name, ef.ty, ef.combinator)
        self.sink.error(E_TYPE, "invalid effect target", getattr(t, "pos", (1, 1)))
        return None

    # -- statements -------------------------------------------------------------

    def check_body(self, stmts: list[Stmt], ctx: _Ctx) -> None:
        scope = _Scope(ctx.scope)
        inner = _Ctx(
            cls=ctx.cls,
            scope=scope,
            in_handler=ctx.in_handler,
            in_atomic=ctx.in_atomic,
            in_block1=ctx.in_block1,
            in_accum=ctx.in_accum,
            allow_effect_read=ctx.allow_effect_read,
            constraint=ctx.constraint,
        )
        for s in stmts:
            self.check_stmt(s, inner)

    def _check_shadow(self, name: str, pos, ctx: _Ctx) -> None:
        if (
            ctx.scope.lookup(name) is not None
            or ctx.cls.state_field(name) is not None
            or ctx.cls.effect_field(name) is not None
            or name in RESERVED_FIELDS
            or name in self.class_names
        ):
            self.sink.error(E_SHADOW, f"name {name!r} is already in use", pos)

    def check_stmt(self, s: Stmt, ctx: _Ctx) -> None:
        if isinstance(s, Let):
            ty = self.resolve_expr(s.value, ctx)
            if ty.kind is Kind.NULL:
                self.sink.error(E_TYPE, "cannot infer a type for 'let ... = null'", s.pos)
            if isinstance(s.value, Name) and s.value.res == "extent":
                self.sink.error(E_EXTENT_USE, "a class extent can only be iterated by an accum loop", s.pos)
            self._check_shadow(s.name, s.pos, ctx)
            ctx.scope.bind(s.name, "local", ty)
            s.ty = ty
        elif isinstance(s, EffectAssign):
            info = self.resolve_target(s.target, s.op, ctx)
            vty = self.resolve_expr(s.value, ctx)
            if info is None:
                return
            _, fname, fty, comb = info
            if s.op == "<=":
                if fty.kind is not Kind.SET or comb is not Combinator.SET_UNION:
                    self.sink.error(E_TYPE, f"'<=' target {fname!r} must be a set effect with setUnion", s.pos)
                elif fty.element is not None and not assignable(vty, fty.element):
                    self.sink.error(E_TYPE, f"cannot insert {vty} into {fty}", s.pos)
            else:
                if comb is Combinator.COUNT:
                    pass  # count ignores the value
                elif not assignable(vty, fty):
                    self.sink.error(E_TYPE, f"cannot merge {vty} into {fname!r} of type {fty}", s.pos)
        elif isinstance(s, If):
            ct = self.resolve_expr(s.cond, ctx)
            if ct.kind is not Kind.BOOL:
                self.sink.error(E_TYPE, f"if condition must be bool, got {ct}", s.pos)
            self.check_body(s.then, ctx)
            self.check_body(s.els, ctx)
        elif isinstance(s, AccumLoop):
            self.check_accum(s, ctx)
        elif isinstance(s, WaitNextTick):
            if ctx.in_accum:
                self.sink.error(E_WAIT_IN_ACCUM, "waitNextTick is not allowed inside an accum loop", s.pos)
            elif ctx.in_atomic:
                self.sink.error(E_WAIT_IN_ATOMIC, "waitNextTick is not allowed inside an atomic block", s.pos)
            elif ctx.in_handler:
                self.sink.error(E_WAIT_IN_HANDLER, "waitNextTick is not allowed inside a handler", s.pos)
        elif isinstance(s, Atomic):
            if ctx.in_block1:
                self.sink.error(E_ATOMIC_IN_ACCUM, "atomic blocks are not allowed inside an accum loop body", s.pos)
            if ctx.in_atomic:
                self.sink.error(E_NESTED_ATOMIC, "atomic blocks cannot nest", s.pos)
            inner = _Ctx(ctx.cls, ctx.scope, ctx.in_handler, True, ctx.in_block1, ctx.in_accum,
                         ctx.allow_effect_read, ctx.constraint)
            self.check_body(s.body, inner)
        elif isinstance(s, Spawn):
            if ctx.in_atomic:
                self.sink.error(E_SPAWN_IN_ATOMIC, "spawn is not allowed inside an atomic block", s.pos)
            target = self.unit.class_def(s.class_name)
            if target is None:
                self.sink.error(E_UNKNOWN_CLASS, f"unknown class {s.class_name!r}", s.pos)
                return
            seen: set[str] = set()
            for fname, fexpr in s.fields:
                vty = self.resolve_expr(fexpr, ctx)
                if fname in seen:
                    self.sink.error(E_TYPE, f"duplicate spawn field {fname!r}", s.pos)
                seen.add(fname)
                f = target.state_field(fname)
                if f is None or f.synthetic:
                    self.sink.error(E_UNKNOWN_NAME, f"class {s.class_name} has no state field {fname!r}", s.pos)
                elif not assignable(vty, f.ty):
                    self.sink.error(E_TYPE, f"cannot initialize {fname!r}: {vty} vs {f.ty}", s.pos)
        elif isinstance(s, Destroy):
            if ctx.in_atomic:
                self.sink.error(E_SPAWN_IN_ATOMIC, "destroy is not allowed inside an atomic block", s.pos)
            if s.target is not None:
                ty = self.resolve_expr(s.target, ctx)
                if ty.kind is not Kind.REF:
                    self.sink.error(E_TYPE, f"destroy target must be a reference, got {ty}", s.pos)
        elif isinstance(s, Restart):
            if not ctx.in_handler:
                self.sink.error(E_RESTART_OUTSIDE_HANDLER, "restart is only allowed inside a handler", s.pos)
            elif self.unit.script_for(ctx.cls.name) is None:
                self.sink.error(E_RESTART_NO_SCRIPT, f"class {ctx.cls.name} has no script to restart", s.pos)
        else:
            raise AssertionError(type(s))

    def check_accum(self, s: AccumLoop, ctx: _Ctx) -> None:
        src_ty = self.resolve_expr(s.source, ctx)
        if isinstance(s.source, Name) and s.source.res == "extent":
            pass  # iterating a class extent
        elif src_ty.kind is not Kind.SET:
            self.sink.error(E_TYPE, f"accum source must be a set or class extent, got {src_ty}", s.pos)
            src_ty = typesys.set_of(s.var_type)
        elem = src_ty.element or s.var_type
        if s.var_type.kind is Kind.REF and self.unit.class_def(s.var_type.class_name or "") is None:
            self.sink.error(E_UNKNOWN_CLASS, f"unknown class {s.var_type.class_name!r}", s.pos)
        if elem != s.var_type and not assignable(elem, s.var_type):
            self.sink.error(E_TYPE, f"loop variable type {s.var_type} does not match element type {elem}", s.pos)
        acc_ok = self._check_combinator_type(s.combinator, s.acc_type, s.pos)
        self._check_shadow(s.var_name, s.pos, ctx)
        self._check_shadow(s.acc_name, s.pos, ctx)
        if s.var_name == s.acc_name:
            self.sink.error(E_SHADOW, "loop variable and accumulator share a name", s.pos)

        scope1 = _Scope(ctx.scope)
        scope1.bind(s.var_name, "loopvar", s.var_type)
        scope1.bind(s.acc_name, "acc_w", s.acc_type)
        if acc_ok:
            self._acc_combinators[s.acc_name] = s.combinator
        ctx1 = _Ctx(ctx.cls, scope1, ctx.in_handler, ctx.in_atomic, True, True,
                    ctx.allow_effect_read, ctx.constraint)
        for t in s.block1:
            self.check_stmt(t, ctx1)

        scope2 = _Scope(ctx.scope)
        scope2.bind(s.acc_name, "acc_r", s.acc_type)
        ctx2 = _Ctx(ctx.cls, scope2, ctx.in_handler, ctx.in_atomic, ctx.in_block1, True,
                    ctx.allow_effect_read, ctx.constraint)
        for t in s.block2:
            self.check_stmt(t, ctx2)

    def _check_combinator_type(self, comb: Combinator, ty: Type, pos) -> bool:
        ok = True
        if comb is Combinator.AVG and ty.kind is not Kind.NUMBER:
            ok = False
        elif comb is Combinator.COUNT and ty.kind is not Kind.INT:
            ok = False
        elif comb in (Combinator.SUM, Combinator.MIN, Combinator.MAX) and not ty.is_numeric:
            ok = False
        elif comb in (Combinator.OR, Combinator.AND) and ty.kind is not Kind.BOOL:
            ok = False
        elif comb is Combinator.SET_UNION and ty.kind is not Kind.SET:
            ok = False
        if not ok:
            self.sink.error(E_BAD_COMBINATOR, f"combinator {comb.value} cannot reduce {ty}", pos)
        return ok

    # -- class-level checks -----------------------------------------------------

    def check_class(self, c: ClassDef) -> None:
        for f in c.state_fields:
            if f.synthetic:
                continue
            if f.name in RESERVED_FIELDS:
                self.sink.error(E_RESERVED_NAME, f"{f.name!r} is a reserved built-in field", f.pos)
            self._check_type_known(f.ty, f.pos)
            if f.init is not None and self.const_value(f.init) is _NOT_CONST:
                self.sink.error(E_NONCONST_INIT, f"initializer of {f.name!r} must be a constant", f.pos)
            elif f.init is not None:
                v = self.const_value(f.init)
                if not self._const_assignable(v, f.ty):
                    self.sink.error(E_TYPE, f"initializer of {f.name!r} does not match {f.ty}", f.pos)
        for ef in c.effect_fields:
            if ef.synthetic:
                continue
            if ef.name in RESERVED_FIELDS:
                self.sink.error(E_RESERVED_NAME, f"{ef.name!r} is a reserved built-in field", ef.pos)
            self._check_type_known(ef.ty, ef.pos)
            self._check_combinator_type(ef.combinator, ef.ty, ef.pos)
        rule_targets: set[str] = set()
        for r in c.update_rules:
            if r.synthetic:
                continue
            f = c.state_field(r.target)
            if f is None or f.synthetic:
                self.sink.error(E_BAD_RULE_TARGET, f"update rule targets undeclared state field {r.target!r}", r.pos)
                continue
            if r.target in rule_targets:
                self.sink.error(E_BAD_RULE_TARGET, f"duplicate update rule for {r.target!r}", r.pos)
            rule_targets.add(r.target)
            ctx = _Ctx(c, _Scope(), allow_effect_read=True)
            vty = self.resolve_expr(r.value, ctx)
            if not assignable(vty, f.ty):
                self.sink.error(E_TYPE, f"update rule for {r.target!r}: {vty} is not assignable to {f.ty}", r.pos)
            for sub in walk_exprs(r.value):
                if (isinstance(sub, FieldAccess) and sub.res and sub.res[0] == "effect"
                        and not (isinstance(sub.base, Name) and sub.base.ident == "this")):
                    self.sink.error(E_READ_EFFECT,
                                    "update rules may only read this object's reduced effects", sub.pos)
        for e in c.constraints:
            ctx = _Ctx(c, _Scope(), constraint=True)
            ty = self.resolve_expr(e, ctx)
            if ty.kind is not Kind.BOOL:
                self.sink.error(E_TYPE, "constraints must be boolean expressions", getattr(e, "pos", c.pos))
            for sub in walk_exprs(e):
                if isinstance(sub, Name) and sub.res in ("extent", "builtin", "effect"):
                    self.sink.error(E_TYPE, "constraints may only read state fields of the object", sub.pos)

    def _check_type_known(self, ty: Type, pos) -> None:
        if ty.kind is Kind.REF and ty.class_name not in self.class_names:
            self.sink.error(E_UNKNOWN_CLASS, f"unknown class {ty.class_name!r}", pos)
        if ty.kind is Kind.SET and ty.element is not None:
            self._check_type_known(ty.element, pos)

    def const_value(self, e: Expr):
        if isinstance(e, Literal):
            if e.lit_type.kind is Kind.NULL:
                return 0
            return e.value
        if isinstance(e, Unary) and e.op == "-" and isinstance(e.operand, Literal):
            v = e.operand.value
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                return -v
        return _NOT_CONST

    def _const_assignable(self, v, ty: Type) -> bool:
        if ty.kind is Kind.NUMBER:
            return isinstance(v, (int, float)) and not isinstance(v, bool)
        if ty.kind is Kind.INT:
            return isinstance(v, int) and not isinstance(v, bool)
        if ty.kind is Kind.BOOL:
            return isinstance(v, bool)
        if ty.kind is Kind.STRING:
            return isinstance(v, str)
        if ty.kind is Kind.REF:
            return v == 0
        if ty.kind is Kind.SET:
            return v == 0 or v == frozenset()
        return False


_NOT_CONST = object()


def default_value(ty: Type):
    if ty.kind is Kind.NUMBER:
        return 0.0
    if ty.kind is Kind.INT:
        return 0
    if ty.kind is Kind.BOOL:
        return False
    if ty.kind is Kind.STRING:
        return ""
    if ty.kind is Kind.REF:
        return 0
    if ty.kind is Kind.SET:
        return frozenset()
    raise ValueError(str(ty))


# ---------------------------------------------------------------------------
# Synthesis and access checking entry point
# ---------------------------------------------------------------------------


def _synthesize_fields(unit: CompilationUnit) -> None:
    for c in unit.classes:
        if c.state_field(TXN_STATUS_FIELD) is None:
            c.state_fields.append(
                FieldDecl(TXN_STATUS_FIELD, INT, Literal(-1, INT), synthetic=True)
            )
        if unit.script_for(c.name) is not None and c.state_field(PC_FIELD) is None:
            c.state_fields.append(FieldDecl(PC_FIELD, INT, Literal(0, INT), synthetic=True))
            c.effect_fields.append(EffectDecl(PC_EFFECT, INT, Combinator.MAX, synthetic=True))
            rule = UpdateRule(PC_FIELD, Name(PC_EFFECT), synthetic=True)
            rule.value.res = "effect"
            rule.value.ty = INT
            c.update_rules.append(rule)


def check_access(unit: CompilationUnit) -> CompilationUnit:
    """Resolve names, type-check, and enforce the read/write discipline.

    Annotates nodes in place; raises CompileError on any violation.
    """
    checker = _Checker(unit)
    _synthesize_fields(unit)
    for c in unit.classes:
        checker.check_class(c)
    seen_script: dict[str, ScriptDef] = {}
    for s in unit.scripts:
        c = unit.class_def(s.class_name)
        if c is None:
            checker.sink.error(E_UNKNOWN_CLASS, f"script {s.name!r} targets unknown class {s.class_name!r}", s.pos)
            continue
        if s.class_name in seen_script:
            checker.sink.error(E_MULTIPLE_SCRIPTS, f"class {s.class_name} already has a script", s.pos)
            continue
        seen_script[s.class_name] = s
        checker.check_body(s.body, _Ctx(c, _Scope()))
    for h in unit.handlers:
        c = unit.class_def(h.class_name)
        if c is None:
            checker.sink.error(E_UNKNOWN_CLASS, f"handler targets unknown class {h.class_name!r}", h.pos)
            continue
        ctx = _Ctx(c, _Scope(), in_handler=True)
        ct = checker.resolve_expr(h.condition, ctx)
        if ct.kind is not Kind.BOOL:
            checker.sink.error(E_TYPE, "handler condition must be bool", h.pos)
        for sub in walk_exprs(h.condition):
            if isinstance(sub, Name) and sub.res == "effect":
                checker.sink.error(E_READ_EFFECT, "handler conditions read state only", sub.pos)
        checker.check_body(h.body, ctx)
        h.may_restart = any(isinstance(t, Restart) for t in walk_stmts(h.body))
    checker.sink.check()
    return unit


# ---------------------------------------------------------------------------
# Transaction wrapping
# ---------------------------------------------------------------------------


def constrained_fields(unit: CompilationUnit, cls: ClassDef) -> tuple[list[str], list[str]]:
    """State fields referenced by constraints, and the effect fields feeding them."""
    state: set[str] = set()
    for e in cls.constraints:
        for sub in walk_exprs(e):
            if isinstance(sub, Name) and sub.res == "state":
                state.add(sub.ident)
    effects: set[str] = set()
    for r in cls.update_rules:
        if r.target in state:
            for sub in walk_exprs(r.value):
                if isinstance(sub, Name) and sub.res == "effect":
                    effects.add(sub.ident)
                elif isinstance(sub, FieldAccess) and sub.res and sub.res[0] == "effect":
                    effects.add(sub.name)
    return sorted(state), sorted(effects)


def _target_field(assign: EffectAssign, self_class: str) -> tuple[str, str]:
    t = assign.target
    if isinstance(t, Name):
        return (self_class, t.ident)
    assert isinstance(t, FieldAccess) and t.res is not None
    return (t.res[1], t.name)


def _wrap_constrained(stmts: list[Stmt], self_class: str,
                      constrained: dict[str, set[str]], sink: DiagnosticSink,
                      in_atomic: bool = False, in_block1: bool = False) -> list[Stmt]:
    out: list[Stmt] = []
    for s in stmts:
        if (isinstance(s, EffectAssign) and not in_atomic
                and s.target.res is not None and s.target.res != "acc"):
            cls, fname = _target_field(s, self_class)
            if fname in constrained.get(cls, ()):  # feeds a constrained state variable
                if in_block1:
                    sink.error(E_CONSTRAINED_IN_ACCUM,
                               f"assignment to constrained effect {cls}.{fname} cannot appear "
                               f"inside an accum loop body; wrap the loop result instead", s.pos)
                    out.append(s)
                else:
                    out.append(Atomic([s], s.pos, synthetic=True))
                continue
            out.append(s)
        elif isinstance(s, If):
            s.then = _wrap_constrained(s.then, self_class, constrained, sink, in_atomic, in_block1)
            s.els = _wrap_constrained(s.els, self_class, constrained, sink, in_atomic, in_block1)
            out.append(s)
        elif isinstance(s, AccumLoop):
            s.block1 = _wrap_constrained(s.block1, self_class, constrained, sink, in_atomic, True)
            s.block2 = _wrap_constrained(s.block2, self_class, constrained, sink, in_atomic, in_block1)
            out.append(s)
        elif isinstance(s, Atomic):
            s.body = _wrap_constrained(s.body, self_class, constrained, sink, True, in_block1)
            out.append(s)
        else:
            out.append(s)
    return out


# ---------------------------------------------------------------------------
# Handler and multi-tick lowering
# ---------------------------------------------------------------------------


def lower_handlers(unit: CompilationUnit) -> CompilationUnit:
    """Rewrite restart primitives into pc-override emissions.

    Each handler then becomes the conditional prelude `if (cond) { body }`
    executed at the start of its class's per-tick program.
    """
    for h in unit.handlers:
        h.body = _lower_restarts(h.body)
    return unit


def _lower_restarts(stmts: list[Stmt]) -> list[Stmt]:
    out: list[Stmt] = []
    for s in stmts:
        if isinstance(s, Restart):
            emit = EffectAssign(Name(PC_EFFECT), Literal(0, INT), "<-", s.pos)
            emit.target.res = "effect"
            emit.target.ty = INT
            emit.value.ty = INT
            emit.override = True
            out.append(emit)
        elif isinstance(s, If):
            s.then = _lower_restarts(s.then)
            s.els = _lower_restarts(s.els)
            out.append(s)
        elif isinstance(s, Atomic):
            s.body = _lower_restarts(s.body)
            out.append(s)
        elif isinstance(s, AccumLoop):
            s.block1 = _lower_restarts(s.block1)
            s.block2 = _lower_restarts(s.block2)
            out.append(s)
        else:
            out.append(s)
    return out


def _pc_emit(value: int) -> EffectAssign:
    emit = EffectAssign(Name(PC_EFFECT), Literal(value, INT), "<-")
    emit.target.res = "effect"
    emit.target.ty = INT
    emit.value.ty = INT
    return emit


def _contains_wait(stmts: list[Stmt]) -> bool:
    return any(isinstance(s, WaitNextTick) for s in walk_stmts(stmts))


def lower_multitick(script: ScriptDef) -> LoweredScript:
    """Split a script at each waitNextTick into pc-dispatched segments.

    Statements following a waitNextTick inside a branch are duplicated into
    that branch's continuation (tail duplication), so every control path in
    every segment ends with exactly one pc emission.
    """
    segments: list[list[Stmt] | None] = [None]

    def new_segment() -> int:
        segments.append(None)
        return len(segments) - 1

    def compile_seq(stmts: list[Stmt], idx: int, cont) -> list[Stmt]:
        for i in range(idx, len(stmts)):
            s = stmts[i]
            if isinstance(s, WaitNextTick):
                seg = new_segment()
                segments[seg] = compile_seq(stmts, i + 1, cont)
                return list(stmts[idx:i]) + [_pc_emit(seg)]
            if isinstance(s, If) and (_contains_wait(s.then) or _contains_wait(s.els)):
                def rest(stmts=stmts, i=i, cont=cont):
                    return compile_seq(stmts, i + 1, cont)
                lowered = If(s.cond, compile_seq(s.then, 0, rest), compile_seq(s.els, 0, rest), s.pos)
                return list(stmts[idx:i]) + [lowered]
        return list(stmts[idx:]) + cont()

    entry = compile_seq(script.body, 0, lambda: [_pc_emit(0)])
    segments[0] = entry
    return LoweredScript(script.class_name, [seg for seg in segments if seg is not None])


def compose_tick_body(unit: CompilationUnit, cls: ClassDef,
                      lowered: LoweredScript | None) -> tuple[list[Stmt], int]:
    """Preludes (handlers, declaration order) followed by pc dispatch."""
    body: list[Stmt] = []
    for h in unit.handlers_for(cls.name):
        body.append(If(h.condition, list(h.body), [], h.pos))
    if lowered is None:
        return body, 0
    segs = lowered.segments
    if len(segs) == 1:
        body.extend(segs[0])
        return body, 1

    def dispatch(k: int) -> list[Stmt]:
        if k == len(segs) - 1:
            return list(segs[k])
        cond = Binary("==", Name(PC_FIELD), Literal(k, INT))
        cond.left.res = "state"
        cond.left.ty = INT
        cond.right.ty = INT
        cond.ty = BOOL
        return [If(cond, list(segs[k]), dispatch(k + 1))]

    body.extend(dispatch(0))
    return body, len(segs)


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


def _assign_ids(stmts: list[Stmt], counters: dict[str, int]) -> None:
    for s in walk_stmts(stmts):
        if isinstance(s, (EffectAssign, Spawn, Destroy)):
            if getattr(s, "stmt_id", -1) == -1:
                s.stmt_id = counters["stmt"]
                counters["stmt"] += 1
        if isinstance(s, Atomic) and s.site_id == -1:
            s.site_id = counters["site"]
            counters["site"] += 1


def analyze(source_or_unit: str | CompilationUnit) -> AnalyzedUnit:
    """Run the full frontend: parse (if needed), check, wrap, lower, compose."""
    if isinstance(source_or_unit, str):
        unit = parse_source(source_or_unit)
    else:
        unit = source_or_unit
    source_hash = hashlib.sha256(format_ast(unit).encode()).hexdigest()

    check_access(unit)

    sink = DiagnosticSink()
    constrained: dict[str, set[str]] = {}
    constrained_state: dict[str, list[str]] = {}
    for c in unit.classes:
        cs, ce = constrained_fields(unit, c)
        constrained_state[c.name] = cs
        constrained[c.name] = set(ce)
    for s in unit.scripts:
        s.body = _wrap_constrained(s.body, s.class_name, constrained, sink)
    for h in unit.handlers:
        h.body = _wrap_constrained(h.body, h.class_name, constrained, sink)
    sink.check()

    lower_handlers(unit)

    counters = {"stmt": 0, "site": 0}
    infos: dict[str, ClassInfo] = {}
    for c in unit.classes:
        script = unit.script_for(c.name)
        lowered = lower_multitick(script) if script is not None else None
        tick_body, nseg = compose_tick_body(unit, c, lowered)
        _assign_ids(tick_body, counters)
        sites = sorted({s.site_id for s in walk_stmts(tick_body) if isinstance(s, Atomic)})
        defaults: dict[str, object] = {}
        checker = _Checker(unit)
        for f in c.state_fields:
            if f.init is not None:
                v = checker.const_value(f.init)
                if v is _NOT_CONST:
                    v = default_value(f.ty)
            else:
                v = default_value(f.ty)
            if f.ty.kind is Kind.NUMBER:
                v = float(v)
            if f.ty.kind is Kind.SET and not isinstance(v, frozenset):
                v = frozenset()
            defaults[f.name] = v
        gating: dict[str, list[str]] = {}
        for r in c.update_rules:
            reads: list[str] = []
            for sub in walk_exprs(r.value):
                if isinstance(sub, Name) and sub.res == "effect":
                    ef = c.effect_field(sub.ident)
                    if ef is not None and not ef.combinator.has_identity:
                        reads.append(sub.ident)
            gating[r.target] = sorted(set(reads))
        infos[c.name] = ClassInfo(
            cdef=c,
            tick_body=tick_body,
            segment_count=nseg,
            has_script=script is not None,
            constrained_state=constrained_state[c.name],
            constrained_effects=sorted(constrained[c.name]),
            atomic_sites=sites,
            defaults=defaults,
            rule_gating_effects=gating,
        )
    return AnalyzedUnit(unit, infos, source_hash, counters["stmt"], counters["site"])
