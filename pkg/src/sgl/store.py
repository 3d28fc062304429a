"""Columnar main-memory tables for state and effect relations.

The store owns the mutable current image of the world. A Snapshot taken at
a tick boundary wraps the then-current arrays; commits always build fresh
arrays, never mutate shared ones, so snapshots stay valid.

Set-typed state fields are held per row as frozensets in an object column;
the (owner_id, element) child tables the schema declares are materialized
from them after every commit so debugger views stay relational.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .rangeindex import RangeIndex, build_range_index
from .schema import PhysicalSchema, np_dtype
from .typesys import Kind, Type


@dataclass
class ColumnTable:
    name: str
    key: str
    ids: np.ndarray  # int64, strictly ascending
    columns: dict[str, np.ndarray]

    @property
    def n(self) -> int:
        return len(self.ids)

    def rows(self) -> list[dict]:
        out = []
        for i in range(self.n):
            row = {self.key: int(self.ids[i])}
            for name, col in self.columns.items():
                row[name] = _to_python(col[i])
            out.append(row)
        return out


def _to_python(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, frozenset):
        return sorted(v)
    return v


def _empty_column(dtype: str) -> np.ndarray:
    return np.empty(0, dtype=object if dtype == "object" else dtype)


def _coerce_column(values: list, ty: Type) -> np.ndarray:
    dtype = np_dtype(ty)
    if dtype == "object":
        arr = np.empty(len(values), dtype=object)
        for i, v in enumerate(values):
            arr[i] = v
        return arr
    return np.asarray(values, dtype=dtype)


class Snapshot:
    """Immutable view of all state tables as of a tick boundary."""

    def __init__(self, tick: int, state: dict[str, ColumnTable]):
        self.tick = tick
        self._state = state
        self._pos_maps: dict[str, dict[int, int]] = {}

    def classes(self) -> list[str]:
        return list(self._state)

    def ids(self, class_name: str) -> np.ndarray:
        return self._state[class_name].ids

    def column(self, class_name: str, field: str) -> np.ndarray:
        return self._state[class_name].columns[field]

    def table(self, class_name: str) -> ColumnTable:
        return self._state[class_name]

    def count(self, class_name: str) -> int:
        return self._state[class_name].n

    def pos_map(self, class_name: str) -> dict[int, int]:
        """Object id -> row position; built lazily, shared by both engines."""
        m = self._pos_maps.get(class_name)
        if m is None:
            ids = self._state[class_name].ids
            m = {int(v): i for i, v in enumerate(ids)}
            self._pos_maps[class_name] = m
        return m

    def gather_positions(self, class_name: str, wanted: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Row positions for `wanted` ids plus a validity mask (dead/null -> False)."""
        ids = self._state[class_name].ids
        pos = np.searchsorted(ids, wanted)
        pos_clip = np.minimum(pos, max(len(ids) - 1, 0))
        valid = (len(ids) > 0) & (wanted > 0)
        if len(ids) > 0:
            valid = valid & (ids[pos_clip] == wanted)
        else:
            valid = np.zeros(len(wanted), dtype=bool)
        return pos_clip, valid


class Store:
    """Mutable world image plus index cache and schema."""

    def __init__(self, schema: PhysicalSchema, rebuild_threshold: float = 0.25):
        self.schema = schema
        self.rebuild_threshold = rebuild_threshold
        self.state: dict[str, ColumnTable] = {}
        self.set_fields: dict[str, dict[str, Type]] = {}
        self.effect_tables: dict[str, ColumnTable] = {}
        self.child_tables: dict[str, ColumnTable] = {}
        self.next_id = 1
        self.trace: Callable[[dict], None] | None = None
        self._indexes: dict[tuple[str, tuple[str, ...]], RangeIndex] = {}
        for cls in schema.classes:
            spec = schema.state_table(cls)
            cols = {c.name: _empty_column(c.dtype) for c in spec.columns}
            sets: dict[str, Type] = {}
            for name, t in schema.tables.items():
                if t.kind == "set" and t.class_name == cls:
                    assert t.field is not None
                    sets[t.field] = Type(Kind.SET, element=t.columns[0].ty)
                    cols[t.field] = _empty_column("object")
                    self.child_tables[name] = ColumnTable(
                        name, "owner_id", np.empty(0, dtype=np.int64),
                        {"element": _empty_column(t.columns[0].dtype)},
                    )
            self.set_fields[cls] = sets
            self.state[cls] = ColumnTable(spec.name, "id", np.empty(0, dtype=np.int64), cols)
        for name, t in schema.tables.items():
            if t.kind == "effect":
                self.effect_tables[name] = ColumnTable(
                    name, "id", np.empty(0, dtype=np.int64),
                    {t.columns[0].name: _empty_column(t.columns[0].dtype)},
                )

    # -- snapshots ------------------------------------------------------------

    def snapshot(self, tick: int = 0) -> Snapshot:
        return Snapshot(tick, dict(self.state))

    def table(self, name: str) -> ColumnTable:
        spec = self.schema.tables.get(name)
        if spec is None:
            raise KeyError(name)
        if spec.kind == "state":
            return self.state[spec.class_name]
        if spec.kind == "effect":
            return self.effect_tables[name]
        return self.child_tables[name]

    # -- loading ----------------------------------------------------------------

    def insert_row(self, class_name: str, obj_id: int, fields: dict) -> None:
        """Test/loader convenience: append one row (id must exceed all existing)."""
        self._append_rows(class_name, [(obj_id, fields)])

    def _append_rows(self, class_name: str, rows: list[tuple[int, dict]]) -> None:
        if not rows:
            return
        table = self.state[class_name]
        cdef_defaults = self.schema.defaults.get(class_name, {})
        new_ids = np.concatenate([table.ids, np.array([r[0] for r in rows], dtype=np.int64)])
        new_cols: dict[str, np.ndarray] = {}
        for name, col in table.columns.items():
            ty = self._column_type(class_name, name)
            tail = []
            for _, fields in rows:
                v = fields.get(name, cdef_defaults.get(name))
                if v is None:
                    v = _default_for(ty)
                tail.append(_coerce_value(v, ty))
            new_cols[name] = np.concatenate([col, _coerce_column(tail, ty)])
        self.state[class_name] = ColumnTable(table.name, "id", new_ids, new_cols)
        self.next_id = max(self.next_id, int(new_ids.max()) + 1)
        self._refresh_child_tables(class_name)

    def _column_type(self, class_name: str, field: str) -> Type:
        sets = self.set_fields[class_name]
        if field in sets:
            return sets[field]
        spec = self.schema.state_table(class_name).column(field)
        assert spec is not None, field
        return spec.ty

    def _refresh_child_tables(self, class_name: str) -> None:
        table = self.state[class_name]
        for fname, fty in self.set_fields[class_name].items():
            tname = f"{class_name}_{fname}"
            owners: list[int] = []
            elements: list = []
            col = table.columns[fname]
            for i in range(table.n):
                for el in sorted(col[i]):
                    owners.append(int(table.ids[i]))
                    elements.append(el)
            elem_ty = fty.element or Type(Kind.INT)
            self.child_tables[tname] = ColumnTable(
                tname, "owner_id",
                np.asarray(owners, dtype=np.int64),
                {"element": _coerce_column(elements, elem_ty)},
            )

    # -- commit ------------------------------------------------------------------

    def commit_class(
        self,
        class_name: str,
        new_columns: dict[str, np.ndarray],
        spawns: list[tuple[int, dict]],
        destroy_ids: set[int],
    ) -> None:
        """Replace state columns, then apply destroys and spawns atomically.

        `new_columns` are full arrays aligned with the pre-commit rows.
        """
        table = self.state[class_name]
        old_ids = table.ids
        old_columns = table.columns
        cols = dict(table.columns)
        cols.update(new_columns)
        if destroy_ids:
            keep = ~np.isin(old_ids, np.fromiter(destroy_ids, dtype=np.int64, count=len(destroy_ids)))
            ids = old_ids[keep]
            cols = {k: v[keep] for k, v in cols.items()}
        else:
            ids = old_ids.copy()
            cols = {k: v.copy() for k, v in cols.items()}
        self.state[class_name] = ColumnTable(table.name, "id", ids, cols)
        if spawns:
            self._append_rows(class_name, spawns)
        else:
            self._refresh_child_tables(class_name)
        self._maintain_indexes(class_name, old_ids, old_columns, new_columns, spawns, destroy_ids)

    def _maintain_indexes(self, class_name, old_ids, old_columns, new_columns, spawns, destroy_ids) -> None:
        for (cls, dims), index in list(self._indexes.items()):
            if cls != class_name:
                continue
            changed = np.zeros(len(old_ids), dtype=bool)
            for d in dims:
                if d in new_columns:
                    changed |= old_columns[d] != new_columns[d]
            n_changed = int(changed.sum()) + len(spawns) + len(destroy_ids)
            if len(old_ids) == 0 or n_changed / max(len(old_ids), 1) > self.rebuild_threshold:
                del self._indexes[(cls, dims)]  # rebuilt lazily on next use
                continue
            removed = old_ids[changed]
            removed = np.concatenate(
                [removed, np.fromiter(destroy_ids, dtype=np.int64, count=len(destroy_ids))]
            )
            table = self.state[class_name]
            live_changed = np.isin(table.ids, old_ids[changed])
            if spawns:
                spawn_ids = np.array([s[0] for s in spawns], dtype=np.int64)
                live_changed |= np.isin(table.ids, spawn_ids)
            add_ids = table.ids[live_changed]
            pts = np.column_stack([np.asarray(table.columns[d], dtype=np.float64)[live_changed] for d in dims])
            index.repair(removed, add_ids, pts)

    def get_index(self, class_name: str, dims: tuple[str, ...]) -> RangeIndex:
        key = (class_name, dims)
        index = self._indexes.get(key)
        if index is None:
            index = build_range_index(self.state[class_name], list(dims))
            self._indexes[key] = index
        return index

    def set_effect_rows(self, class_name: str, field: str, ids: np.ndarray, values) -> None:
        """Publish this tick's reduced effect rows into the effect table."""
        tname = f"{class_name}_eff_{field}"
        spec = self.schema.tables[tname]
        col = spec.columns[0]
        if col.ty.kind is Kind.SET or spec.columns[0].name == "element":
            owners: list[int] = []
            elements: list = []
            for i, obj in enumerate(ids):
                for el in sorted(values[i]):
                    owners.append(int(obj))
                    elements.append(el)
            self.effect_tables[tname] = ColumnTable(
                tname, "id", np.asarray(owners, dtype=np.int64),
                {"element": _coerce_column(elements, col.ty.element or col.ty)},
            )
        else:
            self.effect_tables[tname] = ColumnTable(
                tname, "id", np.asarray(ids, dtype=np.int64),
                {"val": np.asarray(values, dtype=col.dtype)},
            )


def _default_for(ty: Type):
    if ty.kind is Kind.NUMBER:
        return 0.0
    if ty.kind in (Kind.INT, Kind.REF):
        return 0
    if ty.kind is Kind.BOOL:
        return False
    if ty.kind is Kind.STRING:
        return ""
    if ty.kind is Kind.SET:
        return frozenset()
    raise ValueError(str(ty))


def _coerce_value(v, ty: Type):
    if ty.kind is Kind.NUMBER:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise TypeError(f"expected a number, got {v!r}")
        return float(v)
    if ty.kind in (Kind.INT, Kind.REF):
        if isinstance(v, bool) or not isinstance(v, int):
            raise TypeError(f"expected an integer, got {v!r}")
        return int(v)
    if ty.kind is Kind.BOOL:
        if not isinstance(v, bool):
            raise TypeError(f"expected a bool, got {v!r}")
        return v
    if ty.kind is Kind.STRING:
        if not isinstance(v, str):
            raise TypeError(f"expected a string, got {v!r}")
        return v
    if ty.kind is Kind.SET:
        if isinstance(v, frozenset):
            return v
        if isinstance(v, (list, set, tuple)):
            elem = ty.element
            return frozenset(_coerce_value(e, elem) if elem else e for e in v)
        raise TypeError(f"expected a set, got {v!r}")
    raise ValueError(str(ty))


def apply_row_updates(store: Store, class_name: str,
                      updates: list[tuple[int, str, object]],
                      spawns: list[tuple[int, dict]] | None = None,
                      destroys=()) -> Store:
    """Row-level update application (update phase only).

    Updates land atomically with respect to the next snapshot; destroyed
    rows are removed and spawned rows inserted. An update to a destroyed or
    unknown id is dropped with a trace record, not an error: simultaneity
    within a tick makes such races legal program behavior.
    """
    table = store.state[class_name]
    destroyed = {int(d) for d in destroys}
    pos = {int(v): i for i, v in enumerate(table.ids)}
    new_cols: dict[str, np.ndarray] = {}
    for obj, col, value in updates:
        obj = int(obj)
        if obj in destroyed or obj not in pos:
            if store.trace is not None:
                store.trace({"kind": "droppedUpdate", "class": class_name,
                             "object": obj, "column": col})
            continue
        arr = new_cols.get(col)
        if arr is None:
            arr = table.columns[col].copy()
            new_cols[col] = arr
        arr[pos[obj]] = _coerce_value(value, store._column_type(class_name, col))
    store.commit_class(class_name, new_cols, list(spawns or []), destroyed)
    return store


def create_tables(schema: PhysicalSchema, rebuild_threshold: float = 0.25) -> Store:
    """Empty tables for every state, effect, and set child table."""
    seen = set()
    for name in schema.tables:
        if name in seen:
            raise ValueError(f"duplicate table name {name!r}")
        seen.add(name)
    return Store(schema, rebuild_threshold)


def load_world(store: Store, world: dict) -> Store:
    """Populate state tables from a world document.

    Format: {"classes": {Cls: {"defaults": {...}}}, "objects":
    [{"class": ..., "id": N, "fields": {...}}]}. Objects load in ascending
    id order; unset fields take their declared initializers.
    """
    overrides = world.get("classes", {})
    for cls, o in overrides.items():
        if cls not in store.schema.classes:
            raise ValueError(f"unknown class {cls!r} in overrides")
    objects = sorted(world.get("objects", []), key=lambda o: o.get("id", 0))
    seen: set[int] = set()
    per_class: dict[str, list[tuple[int, dict]]] = {}
    for obj in objects:
        cls = obj.get("class")
        if cls not in store.schema.classes:
            raise ValueError(f"unknown class {cls!r}")
        obj_id = obj.get("id")
        if not isinstance(obj_id, int) or obj_id <= 0:
            raise ValueError(f"object id must be a positive integer, got {obj_id!r}")
        if obj_id in seen:
            raise ValueError(f"duplicate object id {obj_id}")
        seen.add(obj_id)
        fields = dict(overrides.get(cls, {}).get("defaults", {}))
        fields.update(obj.get("fields", {}))
        known = set(store.state[cls].columns)
        for f in fields:
            if f not in known:
                raise ValueError(f"class {cls} has no field {f!r}")
        per_class.setdefault(cls, []).append((obj_id, fields))
    for cls, rows in per_class.items():
        store._append_rows(cls, sorted(rows))
    return store
