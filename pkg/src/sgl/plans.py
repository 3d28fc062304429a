"""Relational query plans and the script-to-plan compiler.

A class's per-tick program compiles to a DAG of relational operators:
TableScan / IndexRangeScan leaves, Select / Map / Project / ThetaJoin /
GroupAggregate interior nodes, and EffectEmit roots. No operator writes
state; every write is an EffectEmit into the tick's buffer.

Column namespace: every relation column is "<binding>.<field>" where the
binding is "self" for the object the script runs over, or the loop
variable name for joined extents. Let-bound locals get "let.<name>"
columns. Scalar reference reads (`c.health`) compile to gather expressions
evaluated inside Map, not to joins; accum-loop sources compile to joins.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field

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
from .diagnostics import CompileError, Diagnostic, E_UNCOMPILABLE
from .schema import PhysicalSchema
from .typesys import Combinator, Kind, Type


# ---------------------------------------------------------------------------
# Vectorized expressions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VE:
    pass


@dataclass(frozen=True)
class VConst(VE):
    value: object
    dtype: str  # f i b O


@dataclass(frozen=True)
class VCol(VE):
    key: str
    dtype: str


@dataclass(frozen=True)
class VTick(VE):
    dtype: str = "i"


@dataclass(frozen=True)
class VGather(VE):
    class_name: str
    field: str
    ref: VE
    dtype: str


@dataclass(frozen=True)
class VUn(VE):
    op: str
    a: VE
    dtype: str


@dataclass(frozen=True)
class VBin(VE):
    op: str
    a: VE
    b: VE
    dtype: str


def ve_text(e: VE) -> str:
    if isinstance(e, VConst):
        return repr(e.value)
    if isinstance(e, VCol):
        return e.key
    if isinstance(e, VTick):
        return "tick"
    if isinstance(e, VGather):
        return f"{ve_text(e.ref)}->{e.class_name}.{e.field}"
    if isinstance(e, VUn):
        return f"{e.op}({ve_text(e.a)})"
    if isinstance(e, VBin):
        return f"({ve_text(e.a)} {e.op} {ve_text(e.b)})"
    raise AssertionError(type(e))


def ve_columns(e: VE) -> set[str]:
    if isinstance(e, VCol):
        return {e.key}
    if isinstance(e, VGather):
        return ve_columns(e.ref)
    if isinstance(e, VUn):
        return ve_columns(e.a)
    if isinstance(e, VBin):
        return ve_columns(e.a) | ve_columns(e.b)
    return set()


def conjuncts(e: VE) -> list[VE]:
    if isinstance(e, VBin) and e.op == "&&":
        return conjuncts(e.a) + conjuncts(e.b)
    return [e]


def conjoin(parts: list[VE]) -> VE | None:
    if not parts:
        return None
    out = parts[0]
    for p in parts[1:]:
        out = VBin("&&", out, p, "b")
    return out


# ---------------------------------------------------------------------------
# Plan nodes
# ---------------------------------------------------------------------------


@dataclass
class PlanNode:
    node_id: int
    op: str
    children: list["PlanNode"] = dc_field(default_factory=list)
    params: dict = dc_field(default_factory=dict)
    slot: str = ""

    def child(self) -> "PlanNode":
        return self.children[0]


@dataclass
class QueryPlan:
    """One executable plan for one class: a DAG with EffectEmit roots."""

    class_name: str
    plan_id: str
    roots: list[PlanNode]
    base_scan: PlanNode
    profile: str = "logical"
    # slot -> expected output rows under this plan's assumed workload profile
    assumed_rows: dict[str, float] = dc_field(default_factory=dict)

    def nodes(self) -> list[PlanNode]:
        seen: dict[int, PlanNode] = {}

        def visit(n: PlanNode) -> None:
            if n.node_id in seen:
                return
            seen[n.node_id] = n
            for c in n.children:
                visit(c)

        for r in self.roots:
            visit(r)
        return [seen[k] for k in sorted(seen)]

    def to_document(self) -> dict:
        """Tree-structured JSON dump (stable across runs)."""

        def clean(v):
            if isinstance(v, VE):
                return ve_text(v)
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, dict):
                return {str(k): clean(x) for k, x in v.items()}
            if isinstance(v, (str, int, float, bool)) or v is None:
                return v
            return str(v)

        def node_doc(n: PlanNode) -> dict:
            doc: dict = {"op": n.op, "id": n.node_id, "slot": n.slot}
            params = {k: clean(v) for k, v in n.params.items()}
            if params:
                doc["params"] = params
            if n.children:
                doc["children"] = [node_doc(c) for c in n.children]
            return doc

        return {
            "class": self.class_name,
            "plan": self.plan_id,
            "profile": self.profile,
            "roots": [node_doc(r) for r in self.roots],
        }


def _dtype_of(ty: Type | None) -> str:
    if ty is None:
        return "f"
    if ty.kind is Kind.NUMBER:
        return "f"
    if ty.kind in (Kind.INT, Kind.REF):
        return "i"
    if ty.kind is Kind.BOOL:
        return "b"
    return "O"


# ---------------------------------------------------------------------------
# Compiler
# ---------------------------------------------------------------------------


@dataclass
class _Binding:
    kind: str  # "extent" | "set"
    var: str
    class_name: str | None  # element class for refs, None for scalar sets
    elem_dtype: str = "i"


class _PlanCompiler:
    def __init__(self, analyzed: AnalyzedUnit, schema: PhysicalSchema, class_name: str):
        self.analyzed = analyzed
        self.schema = schema
        self.class_name = class_name
        self.cdef = analyzed.unit.class_def(class_name)
        self.ids = itertools.count()
        self.roots: list[PlanNode] = []
        self.bindings: dict[str, _Binding] = {}
        self.locals: dict[str, VCol] = {}
        self.accs: dict[str, VCol] = {}
        self._acc_frames: dict[str, list] = {}
        self.let_counter = itertools.count()
        self.loop_counter = itertools.count()

    def node(self, op: str, children: list[PlanNode], **params) -> PlanNode:
        nid = next(self.ids)
        return PlanNode(nid, op, children, params, slot=f"{op.lower()}#{nid}")

    # -- expressions --------------------------------------------------------

    def compile_expr(self, e: Expr) -> VE:
        if isinstance(e, Literal):
            if e.lit_type.kind is Kind.NULL:
                return VConst(0, "i")
            dt = _dtype_of(e.lit_type)
            return VConst(e.value, dt)
        if isinstance(e, Name):
            return self._compile_name(e)
        if isinstance(e, FieldAccess):
            return self._compile_field(e)
        if isinstance(e, Unary):
            return VUn(e.op, self.compile_expr(e.operand), _dtype_of(e.ty))
        if isinstance(e, Binary):
            return VBin(e.op, self.compile_expr(e.left), self.compile_expr(e.right), _dtype_of(e.ty))
        raise AssertionError(type(e))

    def _compile_name(self, e: Name) -> VE:
        if e.res == "state":
            return VCol(f"self.{e.ident}", _dtype_of(e.ty))
        if e.res == "local":
            return self.locals[e.ident]
        if e.res == "acc":
            return self.accs[e.ident]
        if e.res == "loopvar":
            b = self.bindings[e.ident]
            if b.kind == "extent":
                return VCol(f"{e.ident}.{BUILTIN_ID}", "i")
            return VCol(e.ident, b.elem_dtype)
        if e.res == "builtin":
            if e.ident == BUILTIN_ID:
                return VCol(f"self.{BUILTIN_ID}", "i")
            if e.ident == BUILTIN_TICK:
                return VTick()
        raise CompileError([Diagnostic("error", E_UNCOMPILABLE,
                                       f"no relational translation for {e.ident!r} ({e.res})", *e.pos)])

    def _compile_field(self, e: FieldAccess) -> VE:
        if isinstance(e.base, Name) and e.base.res == "this":
            inner = Name(e.name, e.pos)
            inner.res = e.res[0] if e.res else "state"
            inner.ty = e.ty
            return self._compile_name(inner)
        if isinstance(e.base, Name) and e.base.res == "loopvar":
            b = self.bindings[e.base.ident]
            if b.kind == "extent":
                if e.name == BUILTIN_ID:
                    return VCol(f"{e.base.ident}.{BUILTIN_ID}", "i")
                return VCol(f"{e.base.ident}.{e.name}", _dtype_of(e.ty))
            # set-element loop variable: dereference by id
            ref = VCol(e.base.ident, "i")
            if e.name == BUILTIN_ID:
                return ref
            assert b.class_name is not None
            return VGather(b.class_name, e.name, ref, _dtype_of(e.ty))
        base_ve = self.compile_expr(e.base)
        assert e.res is not None
        target_class = e.res[1]
        if e.name == BUILTIN_ID:
            return base_ve
        return VGather(target_class, e.name, base_ve, _dtype_of(e.ty))

    # -- statements -----------------------------------------------------------

    def compile_class(self, tick_body: list[Stmt]) -> QueryPlan:
        base = self.node("TableScan", [], class_name=self.class_name, binding="self")
        cursor = base
        self.compile_block(tick_body, cursor, site=-1, keys=["self.id"])
        return QueryPlan(self.class_name, "logical", self.roots, base)

    def compile_block(self, stmts: list[Stmt], cursor: PlanNode, site: int, keys: list[str]) -> PlanNode:
        """Compile statements against the cursor; returns the cursor extended
        with any let columns (branch-scoped cursors never escape)."""
        saved_locals = dict(self.locals)
        for s in stmts:
            cursor = self.compile_stmt(s, cursor, site, keys)
        self.locals = saved_locals
        return cursor

    def compile_stmt(self, s: Stmt, cursor: PlanNode, site: int, keys: list[str]) -> PlanNode:
        if isinstance(s, Let):
            ve = self.compile_expr(s.value)
            col = f"let{next(self.let_counter)}.{s.name}"
            cursor = self.node("Map", [cursor], outputs=[(col, ve)])
            self.locals[s.name] = VCol(col, _dtype_of(s.ty))
            return cursor
        if isinstance(s, EffectAssign):
            self.compile_assign(s, cursor, site, keys)
            return cursor
        if isinstance(s, If):
            cond = self.compile_expr(s.cond)
            then_cursor = self.node("Select", [cursor], pred=cond)
            self.compile_block(s.then, then_cursor, site, keys)
            if s.els:
                else_cursor = self.node("Select", [cursor], pred=VUn("!", cond, "b"))
                self.compile_block(s.els, else_cursor, site, keys)
            return cursor
        if isinstance(s, AccumLoop):
            self.compile_accum(s, cursor, site, keys)
            return cursor
        if isinstance(s, Atomic):
            self.compile_block(s.body, cursor, s.site_id, keys)
            return cursor
        if isinstance(s, Spawn):
            fields = [(n, self.compile_expr(v)) for n, v in s.fields]
            emit = self.node("EffectEmit", [cursor], kind="spawn", spawn_class=s.class_name,
                             fields=fields, stmt_id=s.stmt_id, keys=list(keys))
            self.roots.append(emit)
            return cursor
        if isinstance(s, Destroy):
            target = self.compile_expr(s.target) if s.target is not None else VCol("self.id", "i")
            emit = self.node("EffectEmit", [cursor], kind="destroy", target=target,
                             stmt_id=s.stmt_id)
            self.roots.append(emit)
            return cursor
        if isinstance(s, WaitNextTick):
            raise CompileError([Diagnostic("error", E_UNCOMPILABLE,
                                           "waitNextTick survived lowering (compiler bug)", *s.pos)])
        raise AssertionError(type(s))

    def compile_assign(self, s: EffectAssign, cursor: PlanNode, site: int, keys: list[str]) -> None:
        value = self.compile_expr(s.value)
        if s.target.res == "acc" or (isinstance(s.target, Name) and s.target.res == "acc"):
            frame = self._acc_frames[s.target.ident]
            frame.append((cursor, value, s.stmt_id, s.op == "<="))
            return
        # resolve target object and effect field
        if isinstance(s.target, Name):
            target_ve: VE = VCol("self.id", "i")
            cls, fname = self.class_name, s.target.ident
        else:
            res = s.target.res
            assert isinstance(res, tuple)
            cls, fname = res[1], s.target.name
            if isinstance(s.target.base, Name) and s.target.base.ident == "this":
                target_ve = VCol("self.id", "i")
                cls = self.class_name
            else:
                target_ve = self.compile_expr(s.target.base)
        mapped = self.node("Map", [cursor], outputs=[("emit.target", target_ve), ("emit.value", value)])
        projected = self.node("Project", [mapped], columns=["emit.target", "emit.value"] + list(keys))
        emit = self.node(
            "EffectEmit", [projected],
            kind="insert" if s.op == "<=" else "effect",
            target_class=cls, field=fname,
            target=VCol("emit.target", "i"),
            value=VCol("emit.value", _dtype_of(s.value.ty) if s.op != "<=" else "O"),
            stmt_id=s.stmt_id, site=site, override=s.override,
        )
        self.roots.append(emit)

    def compile_accum(self, s: AccumLoop, cursor: PlanNode, site: int, keys: list[str]) -> None:
        loop_id = next(self.loop_counter)
        var = s.var_name
        if isinstance(s.source, Name) and s.source.res == "extent":
            inner_cls = s.source.ident
            inner = self.node("TableScan", [], class_name=inner_cls, binding=var)
            join = self.node("ThetaJoin", [cursor, inner], binding=var,
                             inner_class=inner_cls, pred=None, kind="extent")
            elem_binding = _Binding("extent", var, inner_cls)
        else:
            src_ve = self.compile_expr(s.source)
            elem_ty = (s.source.ty.element if s.source.ty and s.source.ty.kind is Kind.SET else None)
            elem_cls = elem_ty.class_name if elem_ty is not None and elem_ty.kind is Kind.REF else None
            join = self.node("ThetaJoin", [cursor], binding=var, pred=None,
                             kind="set", source=src_ve, elem_dtype=_dtype_of(elem_ty))
            elem_binding = _Binding("set", var, elem_cls, _dtype_of(elem_ty))

        self.bindings[var] = elem_binding
        inner_keys = keys + ([f"{var}.id"] if elem_binding.kind == "extent" else [var])
        frames = dict(self._acc_frames)
        self._acc_frames = dict(frames)
        self._acc_frames[s.acc_name] = []
        self.compile_block(s.block1, join, site, inner_keys)
        entries = self._acc_frames.pop(s.acc_name)
        self._acc_frames = frames
        del self.bindings[var]

        acc_col = f"acc{loop_id}.{s.acc_name}"
        present_col = f"acc{loop_id}.present"
        inputs = [self.node("Map", [node], outputs=[("acc.value", ve)], stmt_id=stmt,
                            wrap_set=wrap)
                  for (node, ve, stmt, wrap) in entries]
        agg = self.node(
            "GroupAggregate", [cursor] + inputs,
            combinator=s.combinator.value,
            group_keys=list(keys),
            order_key=inner_keys[-1],
            value_col="acc.value",
            out_col=acc_col,
            present_col=present_col,
            acc_dtype=_dtype_of(s.acc_type),
        )
        cursor2: PlanNode = agg
        if not s.combinator.has_identity:
            cursor2 = self.node("Select", [agg], pred=VCol(present_col, "b"))
        self.accs[s.acc_name] = VCol(acc_col, _dtype_of(s.acc_type))
        self.compile_block(s.block2, cursor2, site, keys)
        del self.accs[s.acc_name]


def compile_scalar_expr(e: Expr, class_name: str) -> VE:
    """Compile an update-rule or constraint expression.

    State fields read as "self.<name>" columns, reduced effect fields as
    "eff.<name>" columns; remote state reads become gathers.
    """
    if isinstance(e, Literal):
        if e.lit_type.kind is Kind.NULL:
            return VConst(0, "i")
        return VConst(e.value, _dtype_of(e.lit_type))
    if isinstance(e, Name):
        if e.res == "state":
            return VCol(f"self.{e.ident}", _dtype_of(e.ty))
        if e.res == "effect":
            return VCol(f"eff.{e.ident}", _dtype_of(e.ty))
        if e.res == "builtin":
            if e.ident == BUILTIN_ID:
                return VCol("self.id", "i")
            return VTick()
        raise CompileError([Diagnostic("error", E_UNCOMPILABLE,
                                       f"{e.ident!r} cannot appear here", *e.pos)])
    if isinstance(e, FieldAccess):
        if isinstance(e.base, Name) and e.base.res == "this":
            inner = Name(e.name, e.pos)
            inner.res = e.res[0] if e.res else "state"
            inner.ty = e.ty
            return compile_scalar_expr(inner, class_name)
        base = compile_scalar_expr(e.base, class_name)
        assert e.res is not None
        if e.name == BUILTIN_ID:
            return base
        return VGather(e.res[1], e.name, base, _dtype_of(e.ty))
    if isinstance(e, Unary):
        return VUn(e.op, compile_scalar_expr(e.operand, class_name), _dtype_of(e.ty))
    if isinstance(e, Binary):
        return VBin(e.op, compile_scalar_expr(e.left, class_name),
                    compile_scalar_expr(e.right, class_name), _dtype_of(e.ty))
    raise AssertionError(type(e))


def compile_to_plan(analyzed: AnalyzedUnit, schema: PhysicalSchema) -> dict[str, QueryPlan]:
    """One logical plan per class with a per-tick program."""
    plans: dict[str, QueryPlan] = {}
    for cls, info in analyzed.classes.items():
        if not info.tick_body:
            continue
        compiler = _PlanCompiler(analyzed, schema, cls)
        plans[cls] = compiler.compile_class(info.tick_body)
    return plans
