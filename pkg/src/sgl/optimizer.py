"""Physical plan selection: select fusion/pushdown, index binding, and
workload-adaptive plan switching.

Each logical plan yields a small set of physical plans optimized for the
two shipped workload profiles: "uniform" (spread-out positions, selective
range predicates, index joins win) and "clustered" (dense positions,
unselective predicates, vectorized nested-loop scans win). Per-operator
output cardinalities observed at runtime decay exponentially and a
hysteresis rule switches the active plan when the observed join fan-out
deviates from the active plan's assumed profile by a factor of >= 4 for
>= 3 consecutive ticks (both thresholds configurable).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field as dc_field

from .plans import (
    PlanNode,
    QueryPlan,
    VBin,
    VCol,
    VConst,
    VE,
    conjoin,
    conjuncts,
    ve_columns,
)
from .typesys import Combinator

_COMB_BY_NAME = {c.value: c for c in Combinator}

UNIFORM_ASSUMED = 4.0  # assumed matches per object under the uniform profile
CLUSTERED_FRACTION = 0.5  # assumed fraction of the extent matched when clustered


# ---------------------------------------------------------------------------
# Workload statistics
# ---------------------------------------------------------------------------


@dataclass
class WorkloadStats:
    """Per-operator decayed output cardinalities; O(1) work per operator."""

    decayed: dict[str, float] = dc_field(default_factory=dict)
    last: dict[str, int] = dc_field(default_factory=dict)
    extents: dict[str, int] = dc_field(default_factory=dict)
    ticks: int = 0

    def observe(self, counts: dict[str, int], alpha: float = 0.5) -> None:
        for slot, n in counts.items():
            prev = self.decayed.get(slot)
            self.decayed[slot] = float(n) if prev is None else alpha * n + (1 - alpha) * prev
            self.last[slot] = int(n)
        self.ticks += 1


def collect_stats(stats: WorkloadStats, observed: dict[str, int], alpha: float = 0.5) -> WorkloadStats:
    """Fold one tick's per-operator cardinalities into the decayed averages."""
    stats.observe(observed, alpha)
    return stats


# ---------------------------------------------------------------------------
# Plan cloning and rewriting
# ---------------------------------------------------------------------------


class _Cloner:
    def __init__(self, counter):
        self.counter = counter
        self.memo: dict[int, PlanNode] = {}

    def clone(self, n: PlanNode) -> PlanNode:
        got = self.memo.get(n.node_id)
        if got is not None:
            return got
        new = PlanNode(next(self.counter), n.op, [self.clone(c) for c in n.children],
                       dict(n.params), n.slot)
        self.memo[n.node_id] = new
        return new


def _consumer_counts(roots: list[PlanNode]) -> dict[int, int]:
    counts: dict[int, int] = {}
    seen: set[int] = set()

    def visit(n: PlanNode) -> None:
        for c in n.children:
            counts[c.node_id] = counts.get(c.node_id, 0) + 1
        if n.node_id in seen:
            return
        seen.add(n.node_id)
        for c in n.children:
            visit(c)

    for r in roots:
        counts[r.node_id] = counts.get(r.node_id, 0)
        visit(r)
    return counts


def _fuse_selects(roots: list[PlanNode], consumers: dict[int, int]) -> list[PlanNode]:
    """Merge single-consumer Select chains into the extent join below them,
    enabling chunked theta-join execution without materializing the cross
    product."""
    rewritten: dict[int, PlanNode] = {}

    def visit(n: PlanNode) -> PlanNode:
        got = rewritten.get(n.node_id)
        if got is not None:
            return got
        n.children = [visit(c) for c in n.children]
        out = n
        if (
            n.op == "Select"
            and n.children
            and n.children[0].op == "ThetaJoin"
            and n.children[0].params.get("kind") == "extent"
            and consumers.get(n.children[0].node_id, 0) <= 1
        ):
            join = n.children[0]
            pred = n.params["pred"]
            join.params["pred"] = pred if join.params.get("pred") is None \
                else VBin("&&", join.params["pred"], pred, "b")
            out = join
        rewritten[n.node_id] = out
        return out

    return [visit(r) for r in roots]


def _pushdown_inner(roots: list[PlanNode], counter) -> None:
    """Move conjuncts that reference only the inner extent below the join."""
    seen: set[int] = set()

    def visit(n: PlanNode) -> None:
        if n.node_id in seen:
            return
        seen.add(n.node_id)
        for c in n.children:
            visit(c)
        if n.op == "ThetaJoin" and n.params.get("kind") == "extent" and n.params.get("pred") is not None:
            binding = n.params["binding"]
            prefix = f"{binding}."
            inner_only: list[VE] = []
            rest: list[VE] = []
            for c in conjuncts(n.params["pred"]):
                cols = ve_columns(c)
                if cols and all(col.startswith(prefix) for col in cols):
                    inner_only.append(c)
                else:
                    rest.append(c)
            if inner_only:
                inner_scan = n.children[1]
                sel = PlanNode(next(counter), "Select", [inner_scan],
                               {"pred": conjoin(inner_only)}, slot=f"pushdown#{n.slot}")
                n.children[1] = sel
                n.params["pred"] = conjoin(rest)

    for r in roots:
        visit(r)


_CMP_FLIP = {">=": "<=", "<=": ">=", ">": "<", "<": ">"}


def _extract_bounds(pred: VE, binding: str) -> tuple[dict[str, dict], list[VE]]:
    """Split a join predicate into per-column box bounds on the inner binding
    and a residual. Strict bounds stay in the residual (the index query is
    inclusive) but still narrow the box."""
    prefix = f"{binding}."
    bounds: dict[str, dict] = {}
    residual: list[VE] = []
    for c in conjuncts(pred):
        handled = False
        if isinstance(c, VBin) and c.op in (">=", "<=", ">", "<", "=="):
            lhs, rhs, op = c.a, c.b, c.op
            if not (isinstance(lhs, VCol) and lhs.key.startswith(prefix)):
                if isinstance(rhs, VCol) and rhs.key.startswith(prefix):
                    lhs, rhs, op = rhs, lhs, _CMP_FLIP.get(c.op, c.op)
            if (
                isinstance(lhs, VCol)
                and lhs.key.startswith(prefix)
                and lhs.dtype == "f"
                and not any(col.startswith(prefix) for col in ve_columns(rhs))
            ):
                col = lhs.key[len(prefix):]
                entry = bounds.setdefault(col, {"lo": [], "hi": [], "strict": False})
                if op == "==":
                    entry["lo"].append(rhs)
                    entry["hi"].append(rhs)
                    handled = True
                elif op in (">=", ">"):
                    entry["lo"].append(rhs)
                    handled = op == ">="
                    entry["strict"] = entry["strict"] or op == ">"
                elif op in ("<=", "<"):
                    entry["hi"].append(rhs)
                    handled = op == "<="
                    entry["strict"] = entry["strict"] or op == "<"
        if not handled:
            residual.append(c)
    return bounds, residual


def _bind_indexes(roots: list[PlanNode], counter) -> bool:
    """Replace eligible extent joins with index range-scan joins."""
    bound = False
    rewritten: dict[int, PlanNode] = {}

    def visit(n: PlanNode) -> PlanNode:
        nonlocal bound
        got = rewritten.get(n.node_id)
        if got is not None:
            return got
        n.children = [visit(c) for c in n.children]
        out = n
        if n.op == "ThetaJoin" and n.params.get("kind") == "extent" and n.params.get("pred") is not None:
            binding = n.params["binding"]
            bounds, residual = _extract_bounds(n.params["pred"], binding)
            usable = {c: b for c, b in bounds.items() if b["lo"] and b["hi"]}
            if usable:
                dims = sorted(usable)[:4]
                lo = [_combine(usable[c]["lo"], "max") for c in dims]
                hi = [_combine(usable[c]["hi"], "min") for c in dims]
                # conjuncts only partially absorbed stay in the residual
                extra = [c for col, b in bounds.items() if col not in dims
                         for c in _rebuild_conjuncts(col, b, binding)]
                idx = PlanNode(next(counter), "IndexRangeScan", [n.children[0]], {
                    "kind": "index",
                    "binding": binding,
                    "inner_class": n.params["inner_class"],
                    "dims": dims,
                    "lo": lo,
                    "hi": hi,
                    "residual": conjoin(residual + extra),
                }, slot=n.slot)
                bound = True
                out = idx
        rewritten[n.node_id] = out
        return out

    new_roots = [visit(r) for r in roots]
    roots[:] = new_roots
    return bound


def _combine(ves: list[VE], mode: str) -> VE:
    # Multiple bounds on one column: the index box must not exclude matches,
    # so take the single bound when unique; otherwise fall back to the first
    # (the residual keeps exactness).
    return ves[0]


def _rebuild_conjuncts(col: str, b: dict, binding: str) -> list[VE]:
    out: list[VE] = []
    for lo in b["lo"]:
        out.append(VBin(">=", VCol(f"{binding}.{col}", "f"), lo, "b"))
    for hi in b["hi"]:
        out.append(VBin("<=", VCol(f"{binding}.{col}", "f"), hi, "b"))
    return out


def _join_slots(plan: QueryPlan) -> list[tuple[str, str, str]]:
    """(join slot, outer child slot, inner class) for every join in the plan."""
    out = []
    for n in plan.nodes():
        if n.op in ("ThetaJoin", "IndexRangeScan") and n.params.get("kind") in ("extent", "index"):
            out.append((n.slot, n.children[0].slot, n.params["inner_class"]))
    return out


def _prefix_ok(ve: VE | None, allowed: tuple[str, ...]) -> bool:
    if ve is None:
        return True
    return all(any(col.startswith(p) for p in allowed) for col in ve_columns(ve))


def _nodes_below(n: PlanNode, stop: PlanNode | None = None) -> set[int]:
    seen: set[int] = set()

    def visit(x: PlanNode) -> None:
        if x.node_id in seen:
            return
        seen.add(x.node_id)
        for c in x.children:
            visit(c)

    visit(n)
    return seen


def _decorrelate(roots: list[PlanNode], counter) -> bool:
    """Join-order alternative for nested loops: when an inner aggregation's
    predicate and value depend only on the two joined extents (not on the
    object running the script), compute (w1 x w2) once, aggregate per w1,
    and join the result back onto the correlated cursor. This replaces the
    left-deep ((self x w1) x w2) order with (self x (w1 x w2))."""
    all_nodes: dict[int, PlanNode] = {}
    def collect(n: PlanNode) -> None:
        if n.node_id in all_nodes:
            return
        all_nodes[n.node_id] = n
        for c in n.children:
            collect(c)

    for r in roots:
        collect(r)

    emit_subtrees: set[int] = set()
    for r in roots:
        if r.op == "EffectEmit":
            emit_subtrees |= _nodes_below(r)

    changed = False
    for g in list(all_nodes.values()):
        if g.op != "GroupAggregate" or len(g.params.get("group_keys", [])) != 2:
            continue
        w1_key = g.params["group_keys"][1]
        if not w1_key.endswith(".id"):
            continue
        w1 = w1_key[:-3]
        allowed = (f"{w1}.",)
        # find w1's class from the extent join that introduced it
        w1_cls = None
        for n in all_nodes.values():
            if n.op == "ThetaJoin" and n.params.get("binding") == w1 \
                    and n.params.get("kind") == "extent":
                w1_cls = n.params.get("inner_class")
        if w1_cls is None:
            continue
        rebuilt_inputs = []
        ok = True
        for inp in g.children[1:]:
            chain: list[PlanNode] = []
            cur = inp
            join = None
            while True:
                if cur.op == "Map":
                    chain.append(cur)
                    cur = cur.children[0]
                elif cur.op == "Select":
                    chain.append(cur)
                    cur = cur.children[0]
                elif cur.op == "ThetaJoin" and cur.params.get("kind") == "extent":
                    join = cur
                    break
                else:
                    ok = False
                    break
            if not ok or join is None:
                ok = False
                break
            w2 = join.params["binding"]
            inner_allowed = allowed + (f"{w2}.",)
            if join.node_id in emit_subtrees or any(c.node_id in emit_subtrees for c in chain):
                ok = False
                break
            if not _prefix_ok(join.params.get("pred"), inner_allowed):
                ok = False
                break
            for c in chain:
                if c.op == "Select" and not _prefix_ok(c.params["pred"], inner_allowed):
                    ok = False
                    break
                if c.op == "Map" and not all(_prefix_ok(ve, inner_allowed)
                                             for _, ve in c.params["outputs"]):
                    ok = False
                    break
            if not ok:
                break
            rebuilt_inputs.append((chain, join))
        if not ok or not rebuilt_inputs:
            continue

        scan_w1 = PlanNode(next(counter), "TableScan", [],
                           {"class_name": w1_cls, "binding": w1}, slot=f"decorr-scan#{g.slot}")
        new_inputs = []
        for chain, join in rebuilt_inputs:
            new_join = PlanNode(next(counter), join.op, [scan_w1] + join.children[1:],
                                dict(join.params), join.slot)
            cur = new_join
            for c in reversed(chain):
                cur = PlanNode(next(counter), c.op, [cur], dict(c.params), c.slot)
            new_inputs.append(cur)
        comb = _COMB_BY_NAME[g.params["combinator"]]
        agg_b = PlanNode(next(counter), "GroupAggregate", [scan_w1] + new_inputs, {
            "combinator": g.params["combinator"],
            "group_keys": [w1_key],
            "order_key": g.params["order_key"],
            "value_col": g.params["value_col"],
            "out_col": g.params["out_col"],
            "present_col": g.params["present_col"],
            "acc_dtype": g.params["acc_dtype"],
        }, slot=f"decorr-agg#{g.slot}")
        carrier: PlanNode = agg_b
        if not comb.has_identity:
            carrier = PlanNode(next(counter), "Select", [agg_b],
                               {"pred": VCol(g.params["present_col"], "b")},
                               slot=f"decorr-present#{g.slot}")
        bridge = PlanNode(next(counter), "Map", [carrier], {
            "outputs": [(g.params["value_col"],
                         VCol(g.params["out_col"], g.params["acc_dtype"]))],
            "stmt_id": -2,
        }, slot=f"decorr-bridge#{g.slot}")
        base = g.children[0]
        g.children = [base, bridge]
        g.params = dict(g.params)
        g.params["group_keys"] = [w1_key]
        g.params["order_key"] = w1_key
        g.params["combinator"] = ("setUnion" if g.params["acc_dtype"] == "O"
                                  else "max")
        changed = True
    return changed


# ---------------------------------------------------------------------------
# optimize() and plan sets
# ---------------------------------------------------------------------------


def optimize(logical: QueryPlan, profile: str = "uniform",
             id_start: int = 10_000, decorrelate: bool = False) -> QueryPlan:
    """Produce one physical plan for a workload profile.

    uniform: bind multi-attribute range predicates to k-d tree index scans.
    clustered: keep fused vectorized nested-loop joins (falls back to this
    left-deep scan plan when nothing is index-eligible). With decorrelate,
    self-independent nested aggregations compute (w1 x w2) first and join
    the per-w1 result back (the alternative join order).
    """
    counter = itertools.count(id_start)
    cloner = _Cloner(counter)
    roots = [cloner.clone(r) for r in logical.roots]
    base = cloner.memo[logical.base_scan.node_id]
    consumers = _consumer_counts(roots)
    roots = _fuse_selects(roots, consumers)
    _pushdown_inner(roots, counter)
    plan_id = f"scan-{profile}"
    if decorrelate:
        if not _decorrelate(roots, counter):
            return None  # shape not present; no distinct plan
        plan_id = f"decorrelated-{profile}"
    elif profile == "uniform":
        if _bind_indexes(roots, counter):
            plan_id = f"indexed-{profile}"
    plan = QueryPlan(logical.class_name, plan_id, roots, base, profile)
    for join_slot, outer_slot, inner_cls in _join_slots(plan):
        if profile == "clustered":
            plan.assumed_rows[join_slot] = -CLUSTERED_FRACTION  # negative: fraction of extent
        else:
            plan.assumed_rows[join_slot] = UNIFORM_ASSUMED
    return plan


@dataclass
class PlanSet:
    """Semantically equivalent physical plans plus switch hysteresis state."""

    class_name: str
    plans: dict[str, QueryPlan]
    active: str
    hysteresis_factor: float = 4.0
    hysteresis_ticks: int = 3
    streak: int = 0
    pinned: str | None = None
    switches: list[tuple[int, str, str]] = dc_field(default_factory=list)  # (tick, from, to)

    def plan(self) -> QueryPlan:
        return self.plans[self.pinned or self.active]


def build_plan_set(logical: QueryPlan, hysteresis_factor: float = 4.0,
                   hysteresis_ticks: int = 3) -> PlanSet:
    indexed = optimize(logical, "uniform", id_start=10_000)
    plans = {indexed.plan_id: indexed}
    if any(n.op in ("ThetaJoin", "IndexRangeScan") for n in indexed.nodes()):
        scan = optimize(logical, "clustered", id_start=20_000)
        plans[scan.plan_id] = scan
        decorr = optimize(logical, "uniform", id_start=30_000, decorrelate=True)
        if decorr is not None:
            plans[decorr.plan_id] = decorr
    active = indexed.plan_id
    return PlanSet(logical.class_name, plans, active,
                   hysteresis_factor, hysteresis_ticks)


def _assumed_fanout(plan: QueryPlan, slot: str, extent: int) -> float:
    a = plan.assumed_rows.get(slot, UNIFORM_ASSUMED)
    if a < 0:
        return max(1.0, -a * extent)
    return max(1.0, a)


def _deviation(plan: QueryPlan, stats: WorkloadStats) -> float:
    worst = 1.0
    for join_slot, outer_slot, inner_cls in _join_slots(plan):
        out_rows = stats.decayed.get(join_slot)
        outer_rows = stats.decayed.get(outer_slot)
        if out_rows is None or not outer_rows:
            continue
        fanout = max(out_rows / max(outer_rows, 1.0), 1e-9)
        assumed = _assumed_fanout(plan, join_slot, stats.extents.get(inner_cls, 0))
        ratio = max(fanout / assumed, assumed / fanout)
        worst = max(worst, ratio)
    return worst


def select_plan(plan_set: PlanSet, stats: WorkloadStats) -> str:
    """Hysteresis-gated plan switching; returns the active plan id.

    Switches only when the active plan's assumed join fan-out is off by
    >= hysteresis_factor for >= hysteresis_ticks consecutive ticks, and only
    to the plan whose assumption best matches the observation.
    """
    if plan_set.pinned is not None:
        return plan_set.pinned
    if len(plan_set.plans) < 2:
        return plan_set.active
    active_plan = plan_set.plans[plan_set.active]
    dev = _deviation(active_plan, stats)
    if dev >= plan_set.hysteresis_factor:
        plan_set.streak += 1
    else:
        plan_set.streak = 0
    if plan_set.streak >= plan_set.hysteresis_ticks:
        best_id, best_score = plan_set.active, math.inf
        for pid, plan in plan_set.plans.items():
            score = math.log(max(_deviation(plan, stats), 1.0))
            if score < best_score - 1e-12:
                best_id, best_score = pid, score
        if best_id != plan_set.active:
            plan_set.active = best_id
            plan_set.streak = 0
    return plan_set.active
