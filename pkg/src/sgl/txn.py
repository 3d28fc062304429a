"""Transaction admission: accept or abort the tick's atomic blocks so that
no declared constraint is violated.

Admission is greedy and deterministic: transactions are considered in
ascending (issuing object id, atomic site id) order; a candidate commits
iff, with all previously committed transactions plus the candidate applied
through the combinators and the owned-field update rules, every constraint
holds on every live object of every class the candidate touches. Aborted
transactions contribute nothing to reduction (all-or-nothing).

There is no isolation beyond admission: committed transactions still
combine concurrent writes through their effect combinators.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .analysis import AnalyzedUnit
from .executor import Rel, _ExecCtx, eval_ve
from .formatter import format_expr
from .plans import compile_scalar_expr, VE
from .reduction import EffectBuffer, ReducedEffects, reduce_entries


@dataclass
class TransactionRecord:
    source: int  # issuing object id
    site: int  # atomic block site id
    tick: int
    status: str = "pending"  # pending | committed | aborted
    touched: list[int] = dc_field(default_factory=list)
    touched_classes: list[str] = dc_field(default_factory=list)
    violated: str | None = None

    @property
    def txn_id(self) -> tuple[int, int]:
        return (self.source, self.site)


@dataclass
class AdmissionResult:
    records: list[TransactionRecord]
    committed: set[tuple[int, int]]
    aborted: set[tuple[int, int]]
    # issuing object -> 1 (all committed) | 0 (any aborted); non-issuers absent
    statuses: dict[int, int]


@dataclass
class ClassConstraintRules:
    """Compiled admission machinery for one constrained class."""

    class_name: str
    constrained_state: list[str]
    constrained_effects: list[str]
    rules: list[tuple[str, VE, list[str]]]  # (target, value, gating effects)
    constraints: list[tuple[str, VE]]  # (text, predicate)


def compile_constraint_machinery(analyzed: AnalyzedUnit) -> dict[str, ClassConstraintRules]:
    out: dict[str, ClassConstraintRules] = {}
    for cls, info in analyzed.classes.items():
        if not info.cdef.constraints:
            continue
        rules = []
        for r in info.cdef.update_rules:
            if r.target in info.constrained_state:
                rules.append((r.target, compile_scalar_expr(r.value, cls),
                              info.rule_gating_effects.get(r.target, [])))
        constraints = [(format_expr(e), compile_scalar_expr(e, cls)) for e in info.cdef.constraints]
        out[cls] = ClassConstraintRules(cls, info.constrained_state, info.constrained_effects,
                                        rules, constraints)
    return out


def _collect_txns(buffer: EffectBuffer, tick: int) -> list[TransactionRecord]:
    found: dict[tuple[int, int], TransactionRecord] = {}
    for (cls, field), chunks in buffer.chunks.items():
        for ch in chunks:
            sites = ch["site"]
            mask = sites >= 0
            if not mask.any():
                continue
            for src, site, tgt in zip(ch["source"][mask], sites[mask], ch["target"][mask]):
                key = (int(src), int(site))
                rec = found.get(key)
                if rec is None:
                    rec = TransactionRecord(key[0], key[1], tick)
                    found[key] = rec
                if int(tgt) not in rec.touched:
                    rec.touched.append(int(tgt))
                if cls not in rec.touched_classes:
                    rec.touched_classes.append(cls)
    return [found[k] for k in sorted(found)]


def _state_rel(snap, cls: str) -> Rel:
    ids = snap.ids(cls)
    cols = {"self.id": ids}
    for name, col in snap.table(cls).columns.items():
        cols[f"self.{name}"] = col
    return Rel(cols, ["self.id"], len(ids))


def _tentative_state(cls_rules: ClassConstraintRules, snap, buffer: EffectBuffer,
                     specs: dict, excluded: set[tuple[int, int]], tick: int) -> Rel:
    """Post-update values of the constrained fields with `excluded` txns removed."""
    cls = cls_rules.class_name
    rel = _state_rel(snap, cls)
    ids = rel.cols["self.id"]
    n = rel.n
    cols = dict(rel.cols)
    presence: dict[str, np.ndarray] = {}
    for ef in cls_rules.constrained_effects:
        spec = specs[(cls, ef)]
        arrays = buffer.field_arrays(cls, ef, exclude_sites=excluded)
        if arrays is None or len(arrays["target"]) == 0:
            red = ReducedEffects({}, {(cls, ef): spec})
        else:
            red_ids, red_vals = reduce_entries(arrays, spec.combinator, spec.ty)
            red = ReducedEffects({(cls, ef): (red_ids, red_vals)}, {(cls, ef): spec})
        vals, present = red.aligned(cls, ef, ids)
        cols[f"eff.{ef}"] = vals
        presence[ef] = present
    scratch = EffectBuffer()
    ctx = _ExecCtx(snap, None, tick, scratch, {}, cls, None)
    full = Rel(cols, ["self.id"], n)
    post = dict(cols)
    for target, ve, gating in cls_rules.rules:
        gate = np.ones(n, dtype=bool)
        for ef in gating:
            gate &= presence[ef]
        before = set(scratch.fault_sources)
        vals = eval_ve(ve, full, ctx, gate)
        new_faults = scratch.fault_sources - before
        faulted = np.isin(ids, np.asarray(sorted(new_faults), dtype=np.int64)) \
            if new_faults else np.zeros(n, dtype=bool)
        old = cols[f"self.{target}"]
        apply_mask = gate & ~faulted
        new = old.copy()
        if new.dtype == object:
            for i in np.nonzero(apply_mask)[0]:
                new[i] = vals[i]
        else:
            new[apply_mask] = np.asarray(vals, dtype=new.dtype)[apply_mask]
        post[f"self.{target}"] = new
    return Rel(post, ["self.id"], n)


def _violations(cls_rules: ClassConstraintRules, rel: Rel, snap, tick: int) -> list[tuple[int, str]]:
    out: list[tuple[int, str]] = []
    scratch = EffectBuffer()
    ctx = _ExecCtx(snap, None, tick, scratch, {}, cls_rules.class_name, None)
    for text, pred in cls_rules.constraints:
        scratch.fault_sources.clear()
        ok = np.asarray(eval_ve(pred, rel, ctx, None), dtype=bool)
        if scratch.fault_sources:
            # a constraint that faults counts as violated for those objects
            bad = np.isin(rel.cols["self.id"],
                          np.asarray(sorted(scratch.fault_sources), dtype=np.int64))
            ok = ok & ~bad
        for obj in rel.cols["self.id"][~ok]:
            out.append((int(obj), text))
    return out


def admit(buffer: EffectBuffer, snap, analyzed: AnalyzedUnit,
          machinery: dict[str, ClassConstraintRules], specs: dict, tick: int) -> AdmissionResult:
    """Greedy admission in ascending txn id order; maximal under that order."""
    records = _collect_txns(buffer, tick)
    if not records:
        return AdmissionResult([], set(), set(), {})
    all_ids = {r.txn_id for r in records}
    committed: set[tuple[int, int]] = set()
    aborted: set[tuple[int, int]] = set()
    for rec in records:
        candidate = committed | {rec.txn_id}
        excluded = all_ids - candidate
        ok = True
        violated = None
        for cls in rec.touched_classes:
            cls_rules = machinery.get(cls)
            if cls_rules is None:
                continue  # no constraints on this class
            rel = _tentative_state(cls_rules, snap, buffer, specs, excluded, tick)
            bad = _violations(cls_rules, rel, snap, tick)
            if bad:
                ok = False
                violated = f"{bad[0][1]} (object {bad[0][0]})"
                break
        if ok:
            committed.add(rec.txn_id)
            rec.status = "committed"
        else:
            aborted.add(rec.txn_id)
            rec.status = "aborted"
            rec.violated = violated
    statuses: dict[int, int] = {}
    for rec in records:
        prev = statuses.get(rec.source, 1)
        statuses[rec.source] = prev & (1 if rec.status == "committed" else 0)
    return AdmissionResult(records, committed, aborted, statuses)


def txn_status_column(result: AdmissionResult, ids: np.ndarray) -> np.ndarray:
    col = np.full(len(ids), -1, dtype=np.int64)
    if result.statuses:
        for i, obj in enumerate(ids):
            s = result.statuses.get(int(obj))
            if s is not None:
                col[i] = s
    return col


def check_constraints(snap, analyzed: AnalyzedUnit,
                      machinery: dict[str, ClassConstraintRules] | None = None) -> list[tuple[int, str]]:
    """All (object, constraint) pairs that evaluate false at a tick boundary.

    Must be empty after every admitted tick; also used to reject worlds that
    violate constraints at load time.
    """
    if machinery is None:
        machinery = compile_constraint_machinery(analyzed)
    out: list[tuple[int, str]] = []
    for cls, cls_rules in machinery.items():
        rel = _state_rel(snap, cls)
        out.extend(_violations(cls_rules, rel, snap, snap.tick))
    return sorted(out)
