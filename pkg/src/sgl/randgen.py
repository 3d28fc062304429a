"""Randomized program and world generation for the oracle harness.

Programs are built as ASTs that satisfy the access discipline by
construction, rendered through the canonical formatter, and re-parsed, so
every generated case also exercises the full text pipeline. The generator
reports which language features each case uses so a harness can assert
coverage across a batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import typesys
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
    UpdateRule,
    WaitNextTick,
)
from .typesys import BOOL, Combinator, INT, NUMBER


@dataclass
class GeneratedCase:
    source: str
    world: dict
    features: set[str] = dc_field(default_factory=set)


def _lit(v) -> Literal:
    if isinstance(v, bool):
        return Literal(v, BOOL)
    if isinstance(v, int):
        return Literal(v, INT) if v >= 0 else Literal(v, INT)
    return Literal(abs(float(v)), NUMBER)


def _num(v: float) -> Expr:
    lit = Literal(abs(float(v)), NUMBER)
    return Unary_minus(lit) if v < 0 else lit


def Unary_minus(e: Expr) -> Expr:
    from .nodes import Unary

    return Unary("-", e)


class _Gen:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.features: set[str] = set()

    def choice(self, seq):
        return seq[int(self.rng.integers(0, len(seq)))]

    def chance(self, p: float) -> bool:
        return bool(self.rng.random() < p)

    # -- expressions over state fields ------------------------------------------

    def num_expr(self, fields: list[str], depth: int = 0, loop_var: str | None = None,
                 loop_fields: list[str] | None = None) -> Expr:
        r = self.rng.random()
        if depth >= 2 or r < 0.35:
            if fields and self.chance(0.7):
                return Name(self.choice(fields))
            return _num(round(float(self.rng.uniform(-4, 4)), 3))
        if loop_var is not None and loop_fields and r < 0.5:
            return FieldAccess(Name(loop_var), self.choice(loop_fields))
        op = self.choice(["+", "-", "*", "/"])
        left = self.num_expr(fields, depth + 1, loop_var, loop_fields)
        if op == "*":
            return Binary("*", left, _num(round(float(self.rng.uniform(-1.5, 1.5)), 3)))
        if op == "/":
            if self.chance(0.8):
                # guarded: divisor strictly positive
                divisor = Binary("+", Binary("*", self.num_expr(fields, 2), self.num_expr(fields, 2)),
                                 _num(round(float(self.rng.uniform(0.5, 2.0)), 3)))
            else:
                self.features.add("fault-risk")
                divisor = self.num_expr(fields, depth + 1, loop_var, loop_fields)
            return Binary("/", left, divisor)
        return Binary(op, left, self.num_expr(fields, depth + 1, loop_var, loop_fields))

    def bool_expr(self, fields: list[str], loop_var: str | None = None,
                  loop_fields: list[str] | None = None) -> Expr:
        op = self.choice(["<", "<=", ">", ">=", "==", "!="])
        e = Binary(op, self.num_expr(fields, 1, loop_var, loop_fields),
                   self.num_expr(fields, 1, loop_var, loop_fields))
        if self.chance(0.3):
            e = Binary(self.choice(["&&", "||"]),
                       e, self.bool_expr(fields, loop_var, loop_fields))
        return e


def random_case(seed: int, max_objects: int = 80) -> GeneratedCase:
    """One random analyzed-unit-to-be plus a matching world document."""
    g = _Gen(seed)
    rng = g.rng

    n_num = int(rng.integers(2, 5))
    num_fields = [f"f{i}" for i in range(n_num)]
    state = [FieldDecl(f, NUMBER, _num(round(float(rng.uniform(1, 8)), 3))) for f in num_fields]
    effects: list[EffectDecl] = []
    rules: list[UpdateRule] = []
    constraints: list[Expr] = []

    n_eff = int(rng.integers(2, 5))
    eff_specs = []
    for i in range(n_eff):
        comb = g.choice([Combinator.SUM, Combinator.AVG, Combinator.MIN, Combinator.MAX,
                         Combinator.SUM, Combinator.AVG])
        effects.append(EffectDecl(f"e{i}", NUMBER, comb))
        eff_specs.append((f"e{i}", comb))
    # each effect drives at most one rule on its matching state field
    for i, (ename, comb) in enumerate(eff_specs):
        if i < n_num:
            target = num_fields[i]
            kind = g.choice(["add", "set", "mix"])
            read = Name(ename)
            if kind == "add":
                rules.append(UpdateRule(target, Binary("+", Name(target), read)))
            elif kind == "set":
                rules.append(UpdateRule(target, read))
            else:
                rules.append(UpdateRule(target, Binary("+", Binary("*", Name(target), _num(0.5)), read)))

    use_txn = g.chance(0.3)
    if use_txn:
        g.features.add("txn")
        state.append(FieldDecl("money", NUMBER, _num(round(float(rng.uniform(5, 20)), 2))))
        effects.append(EffectDecl("spend", NUMBER, Combinator.SUM))
        rules.append(UpdateRule("money", Binary("-", Name("money"), Name("spend"))))
        constraints.append(Binary(">", Name("money"), _lit(0.0)))

    use_sets = g.chance(0.35)
    if use_sets:
        g.features.add("sets")
        state.append(FieldDecl("friends", typesys.set_of(typesys.ref("C0")), None))
        effects.append(EffectDecl("met", typesys.set_of(typesys.ref("C0")), Combinator.SET_UNION))
        rules.append(UpdateRule("friends", Name("met")))

    use_ref = g.chance(0.5)
    if use_ref:
        g.features.add("refs")
        state.append(FieldDecl("buddy", typesys.ref("C0"), None))

    cdef = ClassDef("C0", state, effects, rules, constraints)

    # -- script ------------------------------------------------------------------
    body: list = []
    eff_names = [e for e, _ in eff_specs]

    def emit_stmt(loop_var=None, loop_fields=None) -> EffectAssign:
        target = Name(g.choice(eff_names))
        return EffectAssign(target, g.num_expr(num_fields, 0, loop_var, loop_fields), "<-")

    body.append(emit_stmt())
    if g.chance(0.7):
        body.append(If(g.bool_expr(num_fields), [emit_stmt()], [emit_stmt()] if g.chance(0.5) else []))

    if use_ref and g.chance(0.6):
        g.features.add("remote-emit")
        target = FieldAccess(Name("buddy"), g.choice(eff_names))
        body.append(If(Binary("!=", Name("buddy"), Literal(None, typesys.NULL)),
                       [EffectAssign(target, g.num_expr(num_fields), "<-")], []))

    use_accum = g.chance(0.75)
    if use_accum:
        g.features.add("accum")
        comb = g.choice([Combinator.SUM, Combinator.COUNT, Combinator.MIN, Combinator.AVG])
        acc_ty = INT if comb is Combinator.COUNT else NUMBER
        rad = round(float(rng.uniform(1.0, 4.0)), 2)
        guard = Binary(
            "&&",
            Binary("!=", FieldAccess(Name("w"), "id"), Name("id")),
            Binary(
                "&&",
                Binary("&&",
                       Binary(">=", FieldAccess(Name("w"), "f0"), Binary("-", Name("f0"), _num(rad))),
                       Binary("<=", FieldAccess(Name("w"), "f0"), Binary("+", Name("f0"), _num(rad)))),
                Binary("&&",
                       Binary(">=", FieldAccess(Name("w"), "f1"), Binary("-", Name("f1"), _num(rad))),
                       Binary("<=", FieldAccess(Name("w"), "f1"), Binary("+", Name("f1"), _num(rad)))),
            ),
        )
        inner: list = [EffectAssign(Name("acc"), g.num_expr(num_fields, 1, "w", num_fields)
                                    if comb is not Combinator.COUNT else _lit(1), "<-")]
        if use_sets and g.chance(0.5):
            inner.append(EffectAssign(Name("met"), Name("w"), "<="))
        if g.chance(0.3):
            g.features.add("loop-remote-emit")
            inner.append(EffectAssign(FieldAccess(Name("w"), g.choice(eff_names)),
                                      g.num_expr(num_fields, 1), "<-"))
        block1 = [If(guard, inner, [])]
        block2 = [EffectAssign(Name(g.choice(eff_names)), Name("acc"), "<-")] \
            if comb is not Combinator.COUNT else \
            [If(Binary(">", Name("acc"), _lit(0)),
                [EffectAssign(Name(g.choice(eff_names)), _lit(1.0), "<-")], [])]
        body.append(AccumLoop("acc", acc_ty, comb, "w", typesys.ref("C0"), Name("C0"),
                              block1, block2))

    if use_sets and g.chance(0.6):
        g.features.add("set-iteration")
        body.append(AccumLoop(
            "nf", INT, Combinator.COUNT, "fr", typesys.ref("C0"), Name("friends"),
            [EffectAssign(Name("nf"), FieldAccess(Name("fr"), "f0"), "<-")],
            [If(Binary(">", Name("nf"), _lit(1)), [emit_stmt()], [])]))

    if use_txn:
        body.append(If(g.bool_expr(num_fields),
                       [Atomic([EffectAssign(Name("spend"),
                                             _num(round(float(rng.uniform(0.5, 3.0)), 2)), "<-")])],
                       []))

    n_waits = int(rng.integers(0, 4)) if g.chance(0.6) else 0
    if n_waits:
        g.features.add("wait")
        for _ in range(n_waits):
            pos = int(rng.integers(0, len(body) + 1))
            body.insert(pos, WaitNextTick())
        if g.chance(0.4):
            # a wait inside a branch: pc value depends on the branch taken
            g.features.add("wait-in-branch")
            body.insert(int(rng.integers(0, len(body) + 1)),
                        If(g.bool_expr(num_fields),
                           [emit_stmt(), WaitNextTick(), emit_stmt()],
                           [emit_stmt()]))

    use_spawn = g.chance(0.2)
    if use_spawn:
        g.features.add("spawn")
        body.append(If(Binary("&&", Binary("==", Name("id"), _lit(1)),
                              Binary("<", Name("tick"), _lit(2))),
                       [Spawn("C0", [("f0", _num(2.5)), ("f1", _num(3.5))])], []))
    use_destroy = g.chance(0.2)
    if use_destroy:
        g.features.add("destroy")
        body.append(If(Binary("&&", Binary("==", Name("id"), _lit(2)),
                              Binary("==", Name("tick"), _lit(3))),
                       [Destroy(None)], []))

    scripts = [ScriptDef("behave", "C0", body)]

    handlers: list[HandlerDef] = []
    if g.chance(0.45):
        g.features.add("handler")
        hbody: list = [EffectAssign(Name(g.choice(eff_names)), g.num_expr(num_fields), "<-")]
        if n_waits and g.chance(0.4):
            g.features.add("restart")
            hbody.append(Restart())
        handlers.append(HandlerDef("C0", g.bool_expr(num_fields), hbody))

    unit = CompilationUnit([cdef], scripts, handlers)
    source = format_ast(unit)

    n_objects = int(rng.integers(8, max_objects + 1))
    objs = []
    for i in range(n_objects):
        fields = {f: round(float(rng.uniform(0, 14)), 3) for f in num_fields}
        if use_txn:
            fields["money"] = round(float(rng.uniform(4, 25)), 2)
        if use_ref:
            fields["buddy"] = int(rng.integers(0, n_objects + 1))  # 0 is null
        if use_sets:
            k = int(rng.integers(0, 4))
            fields["friends"] = sorted(set(int(rng.integers(1, n_objects + 1)) for _ in range(k)))
        objs.append({"class": "C0", "id": i + 1, "fields": fields})
    world = {"objects": objs}
    return GeneratedCase(source, world, g.features)
