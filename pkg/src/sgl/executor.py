"""Set-at-a-time plan execution over a snapshot.

Expressions evaluate vectorized over relation columns. Runtime faults
(division by zero, dead-reference reads) never abort the engine: the
faulting rows are recorded per source object, garbage values stay confined
behind the boolean masks that guarded them, and the runtime retracts every
entry of a faulted object after the effect phase.

Short-circuit semantics match the per-object interpreter exactly: the right
operand of && / || only raises faults for rows where the left operand did
not already decide the result.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .plans import PlanNode, QueryPlan, VBin, VCol, VConst, VE, VGather, VTick, VUn
from .reduction import EffectBuffer, fold_sorted
from .store import Snapshot, Store
from .typesys import Combinator

_DTYPES = {"f": np.float64, "i": np.int64, "b": np.bool_}


@dataclass
class Rel:
    cols: dict[str, np.ndarray]
    keys: list[str]
    n: int

    def filtered(self, mask: np.ndarray) -> "Rel":
        return Rel({k: v[mask] for k, v in self.cols.items()}, list(self.keys), int(mask.sum()))


class _ExecCtx:
    def __init__(self, snap: Snapshot, store: Store | None, tick: int,
                 buffer: EffectBuffer, stats: dict[str, int], class_name: str,
                 chunk: tuple[int, int] | None):
        self.snap = snap
        self.store = store
        self.tick = tick
        self.buffer = buffer
        self.stats = stats
        self.class_name = class_name
        self.chunk = chunk
        self.memo: dict[int, Rel] = {}
        self.current_stmt = -1

    def fault_rows(self, rel: Rel, mask: np.ndarray, message: str) -> None:
        if not mask.any():
            return
        sources = rel.cols["self.id"][mask]
        for s in np.unique(sources):
            self.buffer.add_fault(int(s), self.class_name, self.current_stmt, message)


# ---------------------------------------------------------------------------
# Expression evaluation
# ---------------------------------------------------------------------------


def _full(n: int, value, dtype: str) -> np.ndarray:
    if dtype == "O":
        out = np.empty(n, dtype=object)
        out[:] = [value] * n
        return out
    return np.full(n, value, dtype=_DTYPES[dtype])


def eval_ve(ve: VE, rel: Rel, ctx: _ExecCtx, active: np.ndarray | None) -> np.ndarray:
    if isinstance(ve, VConst):
        return _full(rel.n, ve.value, ve.dtype)
    if isinstance(ve, VCol):
        return rel.cols[ve.key]
    if isinstance(ve, VTick):
        return np.full(rel.n, ctx.tick, dtype=np.int64)
    if isinstance(ve, VGather):
        return _eval_gather(ve, rel, ctx, active)
    if isinstance(ve, VUn):
        a = eval_ve(ve.a, rel, ctx, active)
        if ve.op == "-":
            with np.errstate(all="ignore"):
                return -a
        return ~np.asarray(a, dtype=bool)
    if isinstance(ve, VBin):
        return _eval_bin(ve, rel, ctx, active)
    raise AssertionError(type(ve))


def _eval_gather(ve: VGather, rel: Rel, ctx: _ExecCtx, active: np.ndarray | None) -> np.ndarray:
    refs = np.asarray(eval_ve(ve.ref, rel, ctx, active), dtype=np.int64)
    snap = ctx.snap
    n = rel.n
    if snap.count(ve.class_name) == 0:
        bad = np.ones(n, dtype=bool) if active is None else active.copy()
        ctx.fault_rows(rel, bad, f"dead reference into {ve.class_name}")
        col = snap.column(ve.class_name, ve.field)
        return _full(n, _zero_like(col, ve.dtype), ve.dtype)
    pos, valid = snap.gather_positions(ve.class_name, refs)
    bad = ~valid if active is None else (~valid & active)
    if bad.any():
        ctx.fault_rows(rel, bad, f"dead reference into {ve.class_name}")
    col = snap.column(ve.class_name, ve.field)
    return col[pos]


def _zero_like(col: np.ndarray, dtype: str):
    if dtype == "O":
        return None if col.dtype == object else 0
    return _DTYPES[dtype](0)


def _eval_bin(ve: VBin, rel: Rel, ctx: _ExecCtx, active: np.ndarray | None) -> np.ndarray:
    op = ve.op
    if op == "&&":
        a = np.asarray(eval_ve(ve.a, rel, ctx, active), dtype=bool)
        act_b = a.copy() if active is None else (active & a)
        b = np.asarray(eval_ve(ve.b, rel, ctx, act_b), dtype=bool)
        return a & b
    if op == "||":
        a = np.asarray(eval_ve(ve.a, rel, ctx, active), dtype=bool)
        act_b = ~a if active is None else (active & ~a)
        b = np.asarray(eval_ve(ve.b, rel, ctx, act_b), dtype=bool)
        return a | b
    a = eval_ve(ve.a, rel, ctx, active)
    b = eval_ve(ve.b, rel, ctx, active)
    if op == "/":
        bad = b == 0
        bad_active = bad if active is None else (bad & active)
        if bad_active.any():
            ctx.fault_rows(rel, np.asarray(bad_active, dtype=bool), "division by zero")
        safe_b = np.where(bad, 1, b)
        with np.errstate(all="ignore"):
            if ve.dtype == "i":
                return np.floor_divide(a, safe_b)
            return np.asarray(a, dtype=np.float64) / np.asarray(safe_b, dtype=np.float64)
    with np.errstate(all="ignore"):
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "==":
            return _eq(a, b)
        if op == "!=":
            return ~_eq(a, b)
        if op == "<":
            return a < b
        if op == "<=":
            return a <= b
        if op == ">":
            return a > b
        if op == ">=":
            return a >= b
    raise AssertionError(op)


def _eq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = a == b
    return np.asarray(out, dtype=bool)


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

# Pair count processed per nested-loop chunk; bounds working-set memory.
_JOIN_CHUNK_PAIRS = 1 << 21


def _exec_node(node: PlanNode, ctx: _ExecCtx) -> Rel:
    got = ctx.memo.get(node.node_id)
    if got is not None:
        return got
    fn = _OPS[node.op]
    rel = fn(node, ctx)
    ctx.memo[node.node_id] = rel
    ctx.stats[node.slot] = ctx.stats.get(node.slot, 0) + rel.n
    return rel


def _exec_scan(node: PlanNode, ctx: _ExecCtx) -> Rel:
    cls = node.params["class_name"]
    binding = node.params["binding"]
    snap = ctx.snap
    ids = snap.ids(cls)
    lo, hi = 0, len(ids)
    if binding == "self" and ctx.chunk is not None:
        lo, hi = ctx.chunk
    cols = {f"{binding}.id": ids[lo:hi]}
    table = snap.table(cls)
    for name, col in table.columns.items():
        cols[f"{binding}.{name}"] = col[lo:hi]
    return Rel(cols, [f"{binding}.id"], hi - lo)


def _exec_map(node: PlanNode, ctx: _ExecCtx) -> Rel:
    rel = _exec_node(node.child(), ctx)
    cols = dict(rel.cols)
    ctx.current_stmt = node.params.get("stmt_id", -1)
    for name, ve in node.params["outputs"]:
        col = eval_ve(ve, rel, ctx, None)
        if node.params.get("wrap_set"):  # set-insert into an accumulator
            wrapped = np.empty(rel.n, dtype=object)
            for i in range(rel.n):
                wrapped[i] = frozenset({_pyval(col[i])})
            col = wrapped
        cols[name] = col
    return Rel(cols, rel.keys, rel.n)


def _exec_select(node: PlanNode, ctx: _ExecCtx) -> Rel:
    rel = _exec_node(node.child(), ctx)
    ctx.current_stmt = -1
    mask = np.asarray(eval_ve(node.params["pred"], rel, ctx, None), dtype=bool)
    return rel.filtered(mask)


def _exec_project(node: PlanNode, ctx: _ExecCtx) -> Rel:
    rel = _exec_node(node.child(), ctx)
    want = list(dict.fromkeys(node.params["columns"] + ["self.id"] + rel.keys))
    cols = {k: rel.cols[k] for k in want if k in rel.cols}
    return Rel(cols, rel.keys, rel.n)


def _exec_join(node: PlanNode, ctx: _ExecCtx) -> Rel:
    kind = node.params["kind"]
    if kind == "set":
        return _exec_set_join(node, ctx)
    if kind == "index":
        return _exec_index_join(node, ctx)
    return _exec_nested_join(node, ctx)


def _exec_nested_join(node: PlanNode, ctx: _ExecCtx) -> Rel:
    outer = _exec_node(node.children[0], ctx)
    inner = _exec_node(node.children[1], ctx)
    binding = node.params["binding"]
    pred = node.params.get("pred")
    n_o, n_i = outer.n, inner.n
    keys = outer.keys + [f"{binding}.id"]
    if n_o == 0 or n_i == 0:
        cols = {k: v[:0] for k, v in outer.cols.items()}
        cols.update({k: v[:0] for k, v in inner.cols.items()})
        return Rel(cols, keys, 0)
    chunk_rows = max(1, _JOIN_CHUNK_PAIRS // n_i)
    parts: list[Rel] = []
    for start in range(0, n_o, chunk_rows):
        stop = min(start + chunk_rows, n_o)
        m = stop - start
        oi = np.repeat(np.arange(start, stop), n_i)
        ii = np.tile(np.arange(n_i), m)
        cols = {k: v[oi] for k, v in outer.cols.items()}
        cols.update({k: v[ii] for k, v in inner.cols.items()})
        part = Rel(cols, keys, m * n_i)
        if pred is not None:
            mask = np.asarray(eval_ve(pred, part, ctx, None), dtype=bool)
            part = part.filtered(mask)
        parts.append(part)
    return _concat_rels(parts, keys)


def _concat_rels(parts: list[Rel], keys: list[str]) -> Rel:
    nonzero = [p for p in parts if p.n > 0]
    if not nonzero:
        return parts[0]
    if len(nonzero) == 1:
        return nonzero[0]
    cols = {k: np.concatenate([p.cols[k] for p in nonzero]) for k in nonzero[0].cols}
    return Rel(cols, keys, sum(p.n for p in nonzero))


def _exec_set_join(node: PlanNode, ctx: _ExecCtx) -> Rel:
    outer = _exec_node(node.children[0], ctx)
    binding = node.params["binding"]
    src = eval_ve(node.params["source"], outer, ctx, None)
    counts = np.fromiter((len(s) for s in src), dtype=np.int64, count=outer.n)
    rep = np.repeat(np.arange(outer.n), counts)
    elems: list = []
    for s in src:
        elems.extend(sorted(s))
    cols = {k: v[rep] for k, v in outer.cols.items()}
    dt = node.params.get("elem_dtype", "i")
    if dt == "O":
        arr = np.empty(len(elems), dtype=object)
        arr[:] = elems
    else:
        arr = np.asarray(elems, dtype=_DTYPES[dt]) if elems else np.empty(0, dtype=_DTYPES[dt])
    cols[binding] = arr
    return Rel(cols, outer.keys + [binding], len(rep))


def _exec_index_join(node: PlanNode, ctx: _ExecCtx) -> Rel:
    outer = _exec_node(node.children[0], ctx)
    binding = node.params["binding"]
    inner_cls = node.params["inner_class"]
    dims = node.params["dims"]  # list of inner field names
    if outer.n == 0:
        table = ctx.snap.table(inner_cls)
        cols = {k: v[:0] for k, v in outer.cols.items()}
        cols[f"{binding}.id"] = ctx.snap.ids(inner_cls)[:0]
        for name, col in table.columns.items():
            cols[f"{binding}.{name}"] = col[:0]
        return Rel(cols, outer.keys + [f"{binding}.id"], 0)
    assert ctx.store is not None, "index joins need a store for index access"
    index = ctx.store.get_index(inner_cls, tuple(dims))
    lows = [np.asarray(eval_ve(ve, outer, ctx, None), dtype=np.float64) for ve in node.params["lo"]]
    highs = [np.asarray(eval_ve(ve, outer, ctx, None), dtype=np.float64) for ve in node.params["hi"]]
    snap = ctx.snap
    inner_ids = snap.ids(inner_cls)
    matches: list[np.ndarray] = []
    counts = np.zeros(outer.n, dtype=np.int64)
    lo_vec = np.stack(lows, axis=1) if lows else np.zeros((outer.n, 0))
    hi_vec = np.stack(highs, axis=1) if highs else np.zeros((outer.n, 0))
    for i in range(outer.n):
        found = index.query(lo_vec[i], hi_vec[i])
        matches.append(found)
        counts[i] = len(found)
    rep = np.repeat(np.arange(outer.n), counts)
    wanted = np.concatenate(matches) if matches else np.empty(0, dtype=np.int64)
    pos = np.searchsorted(inner_ids, wanted)
    cols = {k: v[rep] for k, v in outer.cols.items()}
    table = snap.table(inner_cls)
    cols[f"{binding}.id"] = wanted
    for name, col in table.columns.items():
        cols[f"{binding}.{name}"] = col[pos]
    keys = outer.keys + [f"{binding}.id"]
    rel = Rel(cols, keys, len(rep))
    residual = node.params.get("residual")
    if residual is not None:
        mask = np.asarray(eval_ve(residual, rel, ctx, None), dtype=bool)
        rel = rel.filtered(mask)
    return rel


_COMBS = {c.value: c for c in Combinator}


def _exec_group_aggregate(node: PlanNode, ctx: _ExecCtx) -> Rel:
    base = _exec_node(node.children[0], ctx)
    group_keys: list[str] = node.params["group_keys"]
    comb = _COMBS[node.params["combinator"]]
    acc_dtype = node.params["acc_dtype"]
    order_key = node.params["order_key"]
    value_col = node.params["value_col"]

    key_parts: list[list[np.ndarray]] = [[] for _ in group_keys]
    order_parts: list[np.ndarray] = []
    stmt_parts: list[np.ndarray] = []
    value_parts: list[np.ndarray] = []
    for inp in node.children[1:]:
        rel = _exec_node(inp, ctx)
        if rel.n == 0:
            continue
        for i, gk in enumerate(group_keys):
            key_parts[i].append(rel.cols[gk])
        order_parts.append(np.asarray(rel.cols[order_key]) if order_key in rel.cols
                           else np.zeros(rel.n, dtype=np.int64))
        stmt_parts.append(np.full(rel.n, inp.params.get("stmt_id", -1), dtype=np.int64))
        value_parts.append(rel.cols[value_col])

    n_base = base.n
    out_cols = dict(base.cols)
    ident, has_ident = _acc_identity(comb, acc_dtype, n_base)
    present = np.zeros(n_base, dtype=bool)
    out = ident

    if value_parts:
        keys_arr = [np.concatenate(p) for p in key_parts]
        order_arr = np.concatenate(order_parts)
        stmt_arr = np.concatenate(stmt_parts)
        values = np.concatenate(value_parts)
        sort_keys = [stmt_arr, order_arr] + list(reversed(keys_arr))
        if values.dtype.kind in ("f", "i", "b"):
            sort_keys.insert(0, values)
        order = np.lexsort(sort_keys)
        keys_sorted = [k[order] for k in keys_arr]
        values_sorted = values[order]
        boundary = np.zeros(len(order), dtype=bool)
        boundary[0] = True
        for k in keys_sorted:
            boundary[1:] |= k[1:] != k[:-1]
        starts = np.nonzero(boundary)[0]
        reduced = fold_sorted(comb, values_sorted, starts, None)
        group_map: dict[tuple, int] = {}
        for gi, si in enumerate(starts):
            group_map[tuple(int(k[si]) for k in keys_sorted)] = gi
        base_keys = [np.asarray(base.cols[gk]) for gk in group_keys]
        if out.dtype == object:
            for ri in range(n_base):
                gi = group_map.get(tuple(int(k[ri]) for k in base_keys))
                if gi is not None:
                    present[ri] = True
                    out[ri] = reduced[gi]
        else:
            idx = np.array(
                [group_map.get(tuple(int(k[ri]) for k in base_keys), -1) for ri in range(n_base)],
                dtype=np.int64,
            )
            hit = idx >= 0
            present[hit] = True
            if hit.any():
                out[hit] = reduced[idx[hit]].astype(out.dtype, copy=False)

    out_cols[node.params["out_col"]] = out
    out_cols[node.params["present_col"]] = np.ones(n_base, dtype=bool) if has_ident else present
    return Rel(out_cols, base.keys, n_base)


def _acc_identity(comb: Combinator, dtype: str, n: int) -> tuple[np.ndarray, bool]:
    if comb is Combinator.SET_UNION:
        out = np.empty(n, dtype=object)
        out[:] = [frozenset()] * n
        return out, True
    if comb.has_identity:
        from .typesys import INT, NUMBER, BOOL

        ty = {"f": NUMBER, "i": INT, "b": BOOL}[dtype]
        return _full(n, comb.identity(ty), dtype), True
    return _full(n, 0, dtype), False


def _exec_emit(node: PlanNode, ctx: _ExecCtx) -> Rel:
    rel = _exec_node(node.child(), ctx)
    kind = node.params["kind"]
    ctx.current_stmt = node.params.get("stmt_id", -1)
    if rel.n == 0:
        return rel
    sources = rel.cols["self.id"]
    if kind == "destroy":
        targets = np.asarray(eval_ve(node.params["target"], rel, ctx, None), dtype=np.int64)
        for t, s in zip(targets, sources):
            ctx.buffer.add_destroy(int(t), int(s), node.params["stmt_id"])
        return rel
    if kind == "spawn":
        key_cols = [rel.cols[k] for k in node.params["keys"] if k != "self.id" and k in rel.cols]
        field_vals = {name: eval_ve(ve, rel, ctx, None) for name, ve in node.params["fields"]}
        order = np.lexsort([np.asarray(k) for k in reversed(key_cols)] + [sources]) \
            if key_cols else np.argsort(sources, kind="stable")
        for ri in order:
            keys = tuple(_pyval(k[ri]) for k in key_cols)
            fields = {name: _pyval(v[ri]) for name, v in field_vals.items()}
            ctx.buffer.add_spawn(int(sources[ri]), node.params["stmt_id"], keys,
                                 node.params["spawn_class"], fields)
        return rel
    targets = np.asarray(eval_ve(node.params["target"], rel, ctx, None), dtype=np.int64)
    values = eval_ve(node.params["value"], rel, ctx, None)
    if kind == "insert":
        wrapped = np.empty(rel.n, dtype=object)
        for i in range(rel.n):
            wrapped[i] = frozenset({_pyval(values[i])})
        values = wrapped
    site = node.params.get("site", -1)
    overrides = np.ones(rel.n, dtype=bool) if node.params.get("override") else None
    ctx.buffer.add_chunk(
        node.params["target_class"], node.params["field"],
        targets, sources, np.full(rel.n, node.params["stmt_id"], dtype=np.int64),
        values,
        sites=np.full(rel.n, site, dtype=np.int64) if site >= 0 else None,
        overrides=overrides,
    )
    return rel


def _pyval(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


_OPS = {
    "TableScan": _exec_scan,
    "Map": _exec_map,
    "Select": _exec_select,
    "Project": _exec_project,
    "ThetaJoin": _exec_join,
    "IndexRangeScan": _exec_index_join,
    "GroupAggregate": _exec_group_aggregate,
    "EffectEmit": _exec_emit,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def execute_plan(plan: QueryPlan, snap: Snapshot, workers: int = 1,
                 store: Store | None = None, tick: int | None = None,
                 stats: dict[str, int] | None = None) -> EffectBuffer:
    """Run every EffectEmit root; the reduced result is identical for any
    worker count because reduction is canonical."""
    tick = snap.tick if tick is None else tick
    stats_out = stats if stats is not None else {}
    n = snap.count(plan.class_name)
    buffer = EffectBuffer()
    if workers <= 1 or n < 2 * workers:
        ctx = _ExecCtx(snap, store, tick, buffer, stats_out, plan.class_name, None)
        for root in plan.roots:
            _exec_node(root, ctx)
        return buffer
    bounds = [(i * n // workers, (i + 1) * n // workers) for i in range(workers)]
    bounds = [(lo, hi) for lo, hi in bounds if hi > lo]
    chunk_stats: list[dict[str, int]] = [dict() for _ in bounds]
    chunk_buffers: list[EffectBuffer] = [EffectBuffer() for _ in bounds]

    def run_chunk(i: int) -> None:
        ctx = _ExecCtx(snap, store, tick, chunk_buffers[i], chunk_stats[i], plan.class_name, bounds[i])
        for root in plan.roots:
            _exec_node(root, ctx)

    with ThreadPoolExecutor(max_workers=len(bounds)) as pool:
        list(pool.map(run_chunk, range(len(bounds))))
    for i in range(len(bounds)):
        buffer.merge(chunk_buffers[i])
        for slot, count in chunk_stats[i].items():
            stats_out[slot] = stats_out.get(slot, 0) + count
    return buffer
