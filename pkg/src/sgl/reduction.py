"""Effect buffers and canonical, order-independent reduction.

Entries are reduced in ascending (target id, source id, statement id, value)
order regardless of how or where they were produced, which makes the result
identical for any worker count and for both execution engines. avg is
carried as a (sum, count) pair and divided exactly once at the end.

The relational engine and the reference interpreter share this module; a
divergence between them can therefore only originate in plan compilation
or execution, never in reduction.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .typesys import Combinator, Kind, Type


@dataclass(frozen=True)
class CombSpec:
    combinator: Combinator
    ty: Type  # declared effect field type


@dataclass
class FaultRecord:
    source: int
    class_name: str
    stmt_id: int
    message: str


class EffectBuffer:
    """Append-only multiset of effect entries produced during a tick.

    Scalar appends serve the interpreter, array appends the vectorized
    engine; both end up in the same chunk lists.
    """

    def __init__(self) -> None:
        # (class, field) -> list of chunk dicts with parallel arrays
        self.chunks: dict[tuple[str, str], list[dict]] = {}
        # spawn record: (source, stmt, keys, class, {field: value})
        self.spawns: list[tuple[int, int, tuple, str, dict]] = []
        # destroy record: (target, source, stmt)
        self.destroys: list[tuple[int, int, int]] = []
        self.faults: list[FaultRecord] = []
        self.fault_sources: set[int] = set()

    # -- appends ---------------------------------------------------------------

    def add_chunk(self, class_name: str, field: str, targets, sources, stmts,
                  values, sites=None, overrides=None) -> None:
        n = len(targets)
        if n == 0:
            return
        chunk = {
            "target": np.asarray(targets, dtype=np.int64),
            "source": np.asarray(sources, dtype=np.int64),
            "stmt": np.asarray(stmts, dtype=np.int64),
            "value": values if isinstance(values, np.ndarray) else _object_array(values),
            "site": np.asarray(sites, dtype=np.int64) if sites is not None else np.full(n, -1, dtype=np.int64),
            "override": np.asarray(overrides, dtype=bool) if overrides is not None else np.zeros(n, dtype=bool),
        }
        self.chunks.setdefault((class_name, field), []).append(chunk)

    def add_entry(self, class_name: str, field: str, target: int, source: int,
                  stmt: int, value, site: int = -1, override: bool = False) -> None:
        self.add_chunk(class_name, field, [target], [source], [stmt],
                       _object_array([value]) if not isinstance(value, (int, float, bool, np.generic)) else np.asarray([value]),
                       [site], [override])

    def add_spawn(self, source: int, stmt: int, keys: tuple, class_name: str, fields: dict) -> None:
        self.spawns.append((source, stmt, keys, class_name, fields))

    def add_destroy(self, target: int, source: int, stmt: int) -> None:
        self.destroys.append((int(target), int(source), int(stmt)))

    def add_fault(self, source: int, class_name: str, stmt_id: int, message: str) -> None:
        self.faults.append(FaultRecord(int(source), class_name, stmt_id, message))
        self.fault_sources.add(int(source))

    # -- combination --------------------------------------------------------------

    def merge(self, other: "EffectBuffer") -> None:
        for key, chunks in other.chunks.items():
            self.chunks.setdefault(key, []).extend(chunks)
        self.spawns.extend(other.spawns)
        self.destroys.extend(other.destroys)
        self.faults.extend(other.faults)
        self.fault_sources.update(other.fault_sources)

    def retract_faulted(self) -> None:
        """A faulting object's script emits nothing this tick."""
        if not self.fault_sources:
            return
        dead = np.fromiter(self.fault_sources, dtype=np.int64, count=len(self.fault_sources))
        for key, chunks in self.chunks.items():
            kept = []
            for ch in chunks:
                mask = ~np.isin(ch["source"], dead)
                if mask.all():
                    kept.append(ch)
                elif mask.any():
                    kept.append({k: v[mask] for k, v in ch.items()})
            self.chunks[key] = kept
        self.spawns = [s for s in self.spawns if s[0] not in self.fault_sources]
        self.destroys = [d for d in self.destroys if d[1] not in self.fault_sources]

    def field_arrays(self, class_name: str, field: str, exclude_sites: set[int] | None = None):
        """Concatenated entry arrays for one effect field, optionally dropping
        entries whose (source, site) transaction key was aborted."""
        chunks = self.chunks.get((class_name, field), [])
        if not chunks:
            return None
        cat = {
            k: (np.concatenate([c[k] for c in chunks]) if len(chunks) > 1 else chunks[0][k])
            for k in ("target", "source", "stmt", "value", "site", "override")
        }
        if exclude_sites:
            keep = np.ones(len(cat["target"]), dtype=bool)
            for i in range(len(keep)):
                if cat["site"][i] >= 0 and (int(cat["source"][i]), int(cat["site"][i])) in exclude_sites:
                    keep[i] = False
            cat = {k: v[keep] for k, v in cat.items()}
        return cat

    def fields(self) -> list[tuple[str, str]]:
        return sorted(self.chunks)

    def entry_count(self) -> int:
        return sum(len(c["target"]) for chunks in self.chunks.values() for c in chunks)


def _object_array(values) -> np.ndarray:
    arr = np.empty(len(values), dtype=object)
    for i, v in enumerate(values):
        arr[i] = v
    return arr


# ---------------------------------------------------------------------------
# Canonical reduction
# ---------------------------------------------------------------------------


def canonical_order(target, source, stmt, value) -> np.ndarray:
    """Total order: ascending (target, source, stmt, value); the value key is
    used only where it is sortable and bit-relevant (float payloads)."""
    keys = [stmt, source, target]
    if isinstance(value, np.ndarray) and value.dtype.kind in ("f", "i", "b"):
        keys.insert(0, value)
    return np.lexsort(keys)


def fold_sorted(comb: Combinator, values: np.ndarray, starts: np.ndarray, ty: Type):
    """Reduce pre-sorted values per segment; segments start at `starts`."""
    ends = np.empty_like(starts)
    ends[:-1] = starts[1:]
    ends[-1] = len(values)
    if comb is Combinator.SUM:
        return np.add.reduceat(values, starts)
    if comb is Combinator.COUNT:
        return (ends - starts).astype(np.int64)
    if comb is Combinator.MIN:
        return np.minimum.reduceat(values, starts)
    if comb is Combinator.MAX:
        return np.maximum.reduceat(values, starts)
    if comb is Combinator.OR:
        return np.logical_or.reduceat(values, starts)
    if comb is Combinator.AND:
        return np.logical_and.reduceat(values, starts)
    if comb is Combinator.AVG:
        sums = np.add.reduceat(values, starts)
        counts = (ends - starts).astype(np.float64)
        return sums / counts
    if comb is Combinator.SET_UNION:
        out = np.empty(len(starts), dtype=object)
        for i, (a, b) in enumerate(zip(starts, ends)):
            acc = frozenset()
            for j in range(a, b):
                acc = acc | values[j]
            out[i] = acc
        return out
    raise AssertionError(comb)


def fold_group(comb: Combinator, entries: list[tuple]) -> object:
    """Reduce one accumulator group: entries are (element_order, stmt, value).

    Matches the engine's GroupAggregate ordering exactly: ascending
    (element, statement, value), with the value key applied only to
    numeric/bool payloads.
    """
    values_list = [e[2] for e in entries]
    first = values_list[0]
    if isinstance(first, (bool, np.bool_)):
        values = np.asarray(values_list, dtype=bool)
    elif isinstance(first, (int, float, np.integer, np.floating)) and not isinstance(first, bool):
        values = np.asarray(values_list)
    else:
        values = _object_array(values_list)
    order = np.asarray([e[0] for e in entries], dtype=np.int64)
    stmt = np.asarray([e[1] for e in entries], dtype=np.int64)
    keys = [stmt, order]
    if values.dtype.kind in ("f", "i", "b"):
        keys.insert(0, values)
    perm = np.lexsort(keys)
    reduced = fold_sorted(comb, values[perm], np.array([0]), None)
    v = reduced[0]
    return v.item() if isinstance(v, np.generic) else v


def reduce_entries(arrays: dict, comb: Combinator, ty: Type) -> tuple[np.ndarray, np.ndarray]:
    """Canonical reduction of one field's entries -> (target ids, values).

    Override-lane entries (the restart channel of the program counter) win
    over normal entries for the same target; within a lane the combinator
    applies in canonical order.
    """
    target = arrays["target"]
    if len(target) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    override = arrays["override"]
    if override.any():
        norm_ids, norm_vals = _reduce_lane(
            {k: v[~override] for k, v in arrays.items()}, comb, ty)
        over_ids, over_vals = _reduce_lane(
            {k: v[override] for k, v in arrays.items()}, comb, ty)
        mask = ~np.isin(norm_ids, over_ids)
        ids = np.concatenate([norm_ids[mask], over_ids])
        vals = np.concatenate([norm_vals[mask], over_vals])
        order = np.argsort(ids, kind="stable")
        return ids[order], vals[order]
    return _reduce_lane(arrays, comb, ty)


def _reduce_lane(arrays: dict, comb: Combinator, ty: Type) -> tuple[np.ndarray, np.ndarray]:
    target = arrays["target"]
    if len(target) == 0:
        return np.empty(0, dtype=np.int64), arrays["value"][:0]
    order = canonical_order(target, arrays["source"], arrays["stmt"], arrays["value"])
    t_sorted = target[order]
    v_sorted = arrays["value"][order]
    ids, starts = np.unique(t_sorted, return_index=True)
    vals = fold_sorted(comb, v_sorted, starts, ty)
    return ids, vals


@dataclass
class ReducedEffects:
    """Per effect field: one combinator-reduced value per target object id."""

    data: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = dc_field(default_factory=dict)
    specs: dict[tuple[str, str], CombSpec] = dc_field(default_factory=dict)

    def get(self, class_name: str, field: str) -> tuple[np.ndarray, np.ndarray]:
        return self.data.get((class_name, field), (np.empty(0, dtype=np.int64), np.empty(0)))

    def aligned(self, class_name: str, field: str, row_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Reduced values aligned to `row_ids` plus a presence mask.

        Rows with no entries take the combinator identity when one exists;
        otherwise the value slot is meaningless and present is False.
        """
        spec = self.specs[(class_name, field)]
        ids, vals = self.get(class_name, field)
        n = len(row_ids)
        present = np.zeros(n, dtype=bool)
        out = _identity_column(spec, n)
        if len(ids):
            pos = np.searchsorted(ids, row_ids)
            pos_clip = np.minimum(pos, len(ids) - 1)
            hit = ids[pos_clip] == row_ids
            present[hit] = True
            if out.dtype == object:
                idx = np.nonzero(hit)[0]
                for i in idx:
                    out[i] = vals[pos_clip[i]]
            else:
                out[hit] = vals[pos_clip[hit]].astype(out.dtype, copy=False)
        return out, present


def _identity_column(spec: CombSpec, n: int) -> np.ndarray:
    comb, ty = spec.combinator, spec.ty
    if ty.kind is Kind.SET:
        col = np.empty(n, dtype=object)
        col[:] = [frozenset()] * n
        return col
    if comb.has_identity:
        ident = comb.identity(ty)
    else:
        ident = 0  # placeholder; present mask gates every read
    if ty.kind is Kind.NUMBER:
        return np.full(n, float(ident), dtype=np.float64)
    if ty.kind is Kind.INT:
        return np.full(n, int(ident), dtype=np.int64)
    if ty.kind is Kind.BOOL:
        return np.full(n, bool(ident), dtype=bool)
    col = np.empty(n, dtype=object)
    col[:] = [ident] * n
    return col


def reduce_effects(buffer: EffectBuffer, specs: dict[tuple[str, str], CombSpec],
                   aborted_txns: set[tuple[int, int]] | None = None) -> ReducedEffects:
    """Reduce a complete tick's buffer; entries of aborted transactions are
    excluded before any combinator sees them (all-or-nothing admission)."""
    out = ReducedEffects(specs=dict(specs))
    for key in buffer.fields():
        spec = specs.get(key)
        if spec is None:
            raise KeyError(f"effect entries for unknown field {key}")
        arrays = buffer.field_arrays(key[0], key[1], exclude_sites=aborted_txns)
        if arrays is None or len(arrays["target"]) == 0:
            continue
        ids, vals = reduce_entries(arrays, spec.combinator, spec.ty)
        out.data[key] = (ids, vals)
    return out
