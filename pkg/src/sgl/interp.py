"""Reference interpreter: a deliberately naive per-object, sequential
executor for analyzed units, sharing the engine's tick phases, reduction,
admission, and update components.

Scripts run object-at-a-time in ascending id order; accum loops iterate
their source set literally (ascending element order); every effect lands
in the same EffectBuffer the relational engine fills, so a divergence
between the two can only come from plan compilation or execution.

Statements and expressions compile once into Python closures; this keeps
the interpreter object-at-a-time (O(n^2) for extent loops) while avoiding
tree-walking overhead.
"""

from __future__ import annotations

from typing import Any, Callable

import numpy as np

from .analysis import AnalyzedUnit, BUILTIN_ID, BUILTIN_TICK
from .nodes import (
    AccumLoop,
    Atomic,
    Binary,
    Destroy,
    EffectAssign,
    Expr,
    FieldAccess,
    If,
    Let,
    Literal,
    Name,
    Spawn,
    Stmt,
    Unary,
    WaitNextTick,
)
from .reduction import EffectBuffer, fold_group
from .store import Snapshot
from .typesys import Kind

_I64_MASK = (1 << 64) - 1
_I64_SIGN = 1 << 63


def wrap64(v: int) -> int:
    """Two's-complement int64 wrap, matching the engine's numpy arithmetic."""
    v &= _I64_MASK
    return v - (1 << 64) if v >= _I64_SIGN else v


class Fault(Exception):
    def __init__(self, message: str, stmt: int = -1):
        super().__init__(message)
        self.message = message
        self.stmt = stmt


class _Ctx:
    """Per-tick interpreter state; `vars` re-binds per object."""

    def __init__(self, snap: Snapshot, tick: int):
        self.snap = snap
        self.tick = tick
        self.lists: dict[str, dict[str, list]] = {}
        self.ids: dict[str, list[int]] = {}
        self.pos: dict[str, dict[int, int]] = {}
        for cls in snap.classes():
            table = snap.table(cls)
            self.lists[cls] = {name: col.tolist() for name, col in table.columns.items()}
            ids = table.ids.tolist()
            self.ids[cls] = ids
            self.pos[cls] = {v: i for i, v in enumerate(ids)}
        self.vars: dict[str, Any] = {}
        self.self_id = 0
        self.cls = ""
        self.site = -1
        self.loop_stack: list = []
        self.staged: list = []  # ("eff", cls, field, target, value, site, override, stmt)
        self.acc_entries: dict[str, list] = {}

    def read(self, cls: str, obj: int, field: str, stmt: int = -1):
        idx = self.pos[cls].get(obj)
        if idx is None:
            raise Fault(f"dead reference into {cls}", stmt)
        return self.lists[cls][field][idx]


_EFn = Callable[[_Ctx], Any]
_SFn = Callable[[_Ctx], None]


class _Compiler:
    def __init__(self, analyzed: AnalyzedUnit, class_name: str):
        self.analyzed = analyzed
        self.class_name = class_name

    # -- expressions -------------------------------------------------------

    def expr(self, e: Expr) -> _EFn:
        if isinstance(e, Literal):
            v = 0 if e.lit_type.kind is Kind.NULL else e.value
            return lambda ctx: v
        if isinstance(e, Name):
            return self.name(e)
        if isinstance(e, FieldAccess):
            return self.field(e)
        if isinstance(e, Unary):
            a = self.expr(e.operand)
            if e.op == "-":
                if e.ty is not None and e.ty.kind is Kind.INT:
                    return lambda ctx: wrap64(-a(ctx))
                return lambda ctx: -a(ctx)
            return lambda ctx: not a(ctx)
        if isinstance(e, Binary):
            return self.binary(e)
        raise AssertionError(type(e))

    def name(self, e: Name) -> _EFn:
        ident = e.ident
        if e.res in ("state", "local", "acc", "loopvar"):
            return lambda ctx: ctx.vars[ident]
        if e.res == "builtin":
            if ident == BUILTIN_ID:
                return lambda ctx: ctx.self_id
            if ident == BUILTIN_TICK:
                return lambda ctx: ctx.tick
        raise AssertionError(f"unresolved name {ident!r} ({e.res})")

    def field(self, e: FieldAccess) -> _EFn:
        fname = e.name
        if isinstance(e.base, Name) and e.base.res == "this":
            inner = Name(fname, e.pos)
            inner.res = e.res[0] if e.res else "state"
            inner.ty = e.ty
            return self.name(inner)
        if isinstance(e.base, Name) and e.base.res == "loopvar":
            var = e.base.ident
            idx_key = f"{var}@idx"
            if fname == BUILTIN_ID:
                return lambda ctx: ctx.vars[var]
            assert e.res is not None
            cls = e.res[1]

            def read_loop(ctx: _Ctx):
                idx = ctx.vars.get(idx_key)
                if idx is not None:
                    return ctx.lists[cls][fname][idx]
                return ctx.read(cls, ctx.vars[var], fname)

            return read_loop
        base = self.expr(e.base)
        assert e.res is not None
        cls = e.res[1]
        if fname == BUILTIN_ID:
            return base
        return lambda ctx: ctx.read(cls, base(ctx), fname)

    def binary(self, e: Binary) -> _EFn:
        op = e.op
        a = self.expr(e.left)
        b = self.expr(e.right)
        if op == "&&":
            return lambda ctx: a(ctx) and b(ctx)
        if op == "||":
            return lambda ctx: a(ctx) or b(ctx)
        is_int = e.ty is not None and e.ty.kind is Kind.INT
        if op == "+":
            if is_int:
                return lambda ctx: wrap64(a(ctx) + b(ctx))
            return lambda ctx: a(ctx) + b(ctx)
        if op == "-":
            if is_int:
                return lambda ctx: wrap64(a(ctx) - b(ctx))
            return lambda ctx: a(ctx) - b(ctx)
        if op == "*":
            if is_int:
                return lambda ctx: wrap64(a(ctx) * b(ctx))
            return lambda ctx: a(ctx) * b(ctx)
        if op == "/":
            if is_int:
                def idiv(ctx):
                    d = b(ctx)
                    if d == 0:
                        raise Fault("division by zero")
                    return wrap64(a(ctx) // d)
                return idiv

            def fdiv(ctx):
                d = b(ctx)
                if d == 0:
                    raise Fault("division by zero")
                return a(ctx) / d
            return fdiv
        if op == "==":
            return lambda ctx: a(ctx) == b(ctx)
        if op == "!=":
            return lambda ctx: a(ctx) != b(ctx)
        if op == "<":
            return lambda ctx: a(ctx) < b(ctx)
        if op == "<=":
            return lambda ctx: a(ctx) <= b(ctx)
        if op == ">":
            return lambda ctx: a(ctx) > b(ctx)
        if op == ">=":
            return lambda ctx: a(ctx) >= b(ctx)
        raise AssertionError(op)

    # -- statements -----------------------------------------------------------

    def block(self, stmts: list[Stmt]) -> _SFn:
        fns = [self.stmt(s) for s in stmts]
        bound = [s.name for s in stmts if isinstance(s, Let)]

        def run(ctx: _Ctx) -> None:
            try:
                for fn in fns:
                    fn(ctx)
            finally:
                for name in bound:
                    ctx.vars.pop(name, None)

        return run

    def stmt(self, s: Stmt) -> _SFn:
        if isinstance(s, Let):
            value = self.expr(s.value)
            name = s.name
            return lambda ctx: ctx.vars.__setitem__(name, value(ctx))
        if isinstance(s, EffectAssign):
            return self.assign(s)
        if isinstance(s, If):
            cond = self.expr(s.cond)
            then = self.block(s.then)
            els = self.block(s.els)
            return lambda ctx: then(ctx) if cond(ctx) else els(ctx)
        if isinstance(s, AccumLoop):
            return self.accum(s)
        if isinstance(s, Atomic):
            body = self.block(s.body)
            site = s.site_id

            def run_atomic(ctx: _Ctx) -> None:
                prev = ctx.site
                ctx.site = site
                try:
                    body(ctx)
                finally:
                    ctx.site = prev
            return run_atomic
        if isinstance(s, Spawn):
            cls = s.class_name
            stmt_id = s.stmt_id
            fields = [(n, self.expr(v)) for n, v in s.fields]

            def run_spawn(ctx: _Ctx) -> None:
                vals = {n: fn(ctx) for n, fn in fields}
                ctx.staged.append(("spawn", ctx.self_id, stmt_id, tuple(ctx.loop_stack), cls, vals))
            return run_spawn
        if isinstance(s, Destroy):
            stmt_id = s.stmt_id
            if s.target is None:
                return lambda ctx: ctx.staged.append(("destroy", ctx.self_id, ctx.self_id, stmt_id))
            target = self.expr(s.target)
            return lambda ctx: ctx.staged.append(("destroy", target(ctx), ctx.self_id, stmt_id))
        if isinstance(s, WaitNextTick):
            raise AssertionError("waitNextTick survived lowering")
        raise AssertionError(type(s))

    def assign(self, s: EffectAssign) -> _SFn:
        value = self.expr(s.value)
        stmt_id = s.stmt_id
        override = s.override
        wrap = s.op == "<="
        if isinstance(s.target, Name) and s.target.res == "acc":
            acc = s.target.ident

            def run_acc(ctx: _Ctx) -> None:
                v = value(ctx)
                if wrap:
                    v = frozenset({v})
                order = ctx.loop_stack[-1] if ctx.loop_stack else 0
                ctx.acc_entries[acc].append((order, stmt_id, v))
            return run_acc
        if isinstance(s.target, Name):
            cls, fname = self.class_name, s.target.ident
            target: _EFn = lambda ctx: ctx.self_id
        else:
            res = s.target.res
            assert isinstance(res, tuple)
            cls, fname = res[1], s.target.name
            if isinstance(s.target.base, Name) and s.target.base.ident == "this":
                cls = self.class_name
                target = lambda ctx: ctx.self_id
            else:
                target = self.expr(s.target.base)

        def run_eff(ctx: _Ctx) -> None:
            v = value(ctx)
            if wrap:
                v = frozenset({v})
            ctx.staged.append(("eff", cls, fname, target(ctx), v, ctx.site, override, stmt_id))
        return run_eff

    def accum(self, s: AccumLoop) -> _SFn:
        block1 = self.block(s.block1)
        block2 = self.block(s.block2)
        comb = s.combinator
        acc = s.acc_name
        var = s.var_name
        idx_key = f"{var}@idx"
        has_identity = comb.has_identity
        acc_ty = s.acc_type
        is_extent = isinstance(s.source, Name) and s.source.res == "extent"
        extent_cls = s.source.ident if is_extent else None
        source = None if is_extent else self.expr(s.source)

        def run(ctx: _Ctx) -> None:
            ctx.acc_entries[acc] = []
            if is_extent:
                elems = ctx.ids[extent_cls]
            else:
                elems = sorted(source(ctx))
            for j, el in enumerate(elems):
                ctx.vars[var] = el
                if is_extent:
                    ctx.vars[idx_key] = j
                ctx.loop_stack.append(el)
                try:
                    block1(ctx)
                finally:
                    ctx.loop_stack.pop()
            ctx.vars.pop(var, None)
            ctx.vars.pop(idx_key, None)
            entries = ctx.acc_entries.pop(acc)
            if entries:
                ctx.vars[acc] = fold_group(comb, entries)
            elif has_identity:
                ctx.vars[acc] = comb.identity(acc_ty)
            else:
                return  # absent accumulator: block2 skipped for this object
            try:
                block2(ctx)
            finally:
                ctx.vars.pop(acc, None)

        return run


class _Program:
    def __init__(self, analyzed: AnalyzedUnit):
        self.bodies: dict[str, _SFn] = {}
        self.state_fields: dict[str, list[str]] = {}
        for cls, info in analyzed.classes.items():
            if info.tick_body:
                self.bodies[cls] = _Compiler(analyzed, cls).block(info.tick_body)
            self.state_fields[cls] = [f.name for f in info.cdef.state_fields]


def _program_for(world) -> _Program:
    prog = getattr(world, "_interp_program", None)
    if prog is None:
        prog = _Program(world.analyzed)
        world._interp_program = prog
    return prog


def interpret_effect_phase(world, snap: Snapshot, buffer: EffectBuffer,
                           reverse_objects: bool = False) -> None:
    """Run every object's script directly, staging effects per object so a
    fault retracts everything the object produced this tick.

    reverse_objects flips the iteration order; canonical reduction makes the
    result identical either way (the order-insensitivity witness).
    """
    prog = _program_for(world)
    ctx = _Ctx(snap, world.tick)
    for cls in world.analyzed.classes:
        body = prog.bodies.get(cls)
        if body is None:
            continue
        fields = prog.state_fields[cls]
        lists = ctx.lists[cls]
        sequence = list(enumerate(ctx.ids[cls]))
        if reverse_objects:
            sequence.reverse()
        for i, obj in sequence:
            ctx.vars = {f: lists[f][i] for f in fields}
            ctx.self_id = obj
            ctx.cls = cls
            ctx.site = -1
            ctx.loop_stack = []
            ctx.staged = []
            ctx.acc_entries = {}
            try:
                body(ctx)
            except Fault as f:
                buffer.add_fault(obj, cls, f.stmt, f.message)
                continue
            for entry in ctx.staged:
                if entry[0] == "eff":
                    _, ecls, fname, target, v, site, override, stmt_id = entry
                    buffer.add_entry(ecls, fname, int(target), obj, stmt_id, v,
                                     site=site, override=override)
                elif entry[0] == "spawn":
                    _, source, stmt_id, keys, scls, vals = entry
                    buffer.add_spawn(source, stmt_id, keys, scls, vals)
                else:
                    _, target, source, stmt_id = entry
                    buffer.add_destroy(int(target), source, stmt_id)


def interpret_tick(world) -> None:
    """Advance one tick with the per-object interpreter (oracle mode)."""
    from .runtime import run_tick

    prev = world.config.engine
    world.config.engine = "reference"
    try:
        run_tick(world)
    finally:
        world.config.engine = prev
