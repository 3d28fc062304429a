"""Physical schema derivation: one state table per class, one table per
effect variable, one child table per set-typed state field.

The (class, field) -> (table, column) map is exported for the debugger.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

from .nodes import ClassDef, Literal, Unary
from .typesys import Kind, Type


def np_dtype(ty: Type) -> str:
    if ty.kind is Kind.NUMBER:
        return "float64"
    if ty.kind in (Kind.INT, Kind.REF):
        return "int64"
    if ty.kind is Kind.BOOL:
        return "bool"
    return "object"  # string, set


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    ty: Type
    dtype: str


@dataclass
class TableSpec:
    name: str
    kind: str  # "state" | "effect" | "set"
    class_name: str
    key: str  # "id" for state/effect, "owner_id" for set child tables
    columns: list[ColumnSpec]
    field: str | None = None  # effect/set tables: the SGL field they store

    def column(self, name: str) -> ColumnSpec | None:
        for c in self.columns:
            if c.name == name:
                return c
        return None


@dataclass
class PhysicalSchema:
    tables: dict[str, TableSpec] = dc_field(default_factory=dict)
    # (class, field) -> (table, column)
    field_map: dict[tuple[str, str], tuple[str, str]] = dc_field(default_factory=dict)
    classes: list[str] = dc_field(default_factory=list)
    # per class: declared initializer (or the type default) of every state field
    defaults: dict[str, dict[str, object]] = dc_field(default_factory=dict)

    def state_table(self, class_name: str) -> TableSpec:
        return self.tables[f"{class_name}_state"]

    def effect_table(self, class_name: str, field: str) -> TableSpec:
        return self.tables[f"{class_name}_eff_{field}"]

    def set_table(self, class_name: str, field: str) -> TableSpec:
        return self.tables[f"{class_name}_{field}"]

    def mapping_document(self) -> dict:
        """JSON-ready relation/attribute map, served by GET /schema."""
        return {
            "classes": {
                cls: {
                    field: {"table": tbl, "column": col}
                    for (c, field), (tbl, col) in sorted(self.field_map.items())
                    if c == cls
                }
                for cls in self.classes
            },
            "tables": {
                name: {
                    "kind": t.kind,
                    "class": t.class_name,
                    "key": t.key,
                    "columns": [c.name for c in t.columns],
                }
                for name, t in sorted(self.tables.items())
            },
        }


def type_default(ty: Type):
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


def _init_value(f) -> object:
    """Initializers are restricted to constants (validated by the analyzer)."""
    e = f.init
    v = None
    if isinstance(e, Literal):
        v = 0 if e.lit_type.kind is Kind.NULL else e.value
    elif isinstance(e, Unary) and e.op == "-" and isinstance(e.operand, Literal):
        inner = e.operand.value
        if isinstance(inner, (int, float)) and not isinstance(inner, bool):
            v = -inner
    if v is None:
        v = type_default(f.ty)
    if f.ty.kind is Kind.NUMBER:
        v = float(v)
    if f.ty.kind is Kind.SET and not isinstance(v, frozenset):
        v = frozenset()
    return v


def derive_schema(classes: list[ClassDef]) -> PhysicalSchema:
    """Map every declared field to exactly one (table, column)."""
    schema = PhysicalSchema()
    for c in classes:
        schema.classes.append(c.name)
        schema.defaults[c.name] = {
            f.name: (_init_value(f) if f.init is not None else type_default(f.ty))
            for f in c.state_fields
        }
        state_cols: list[ColumnSpec] = []
        for f in c.state_fields:
            if f.ty.kind is Kind.SET:
                tname = f"{c.name}_{f.name}"
                elem = f.ty.element or Type(Kind.INT)
                schema.tables[tname] = TableSpec(
                    tname, "set", c.name, "owner_id",
                    [ColumnSpec("element", elem, np_dtype(elem))], f.name,
                )
                schema.field_map[(c.name, f.name)] = (tname, "element")
            else:
                state_cols.append(ColumnSpec(f.name, f.ty, np_dtype(f.ty)))
                schema.field_map[(c.name, f.name)] = (f"{c.name}_state", f.name)
        sname = f"{c.name}_state"
        schema.tables[sname] = TableSpec(sname, "state", c.name, "id", state_cols)
        for ef in c.effect_fields:
            tname = f"{c.name}_eff_{ef.name}"
            if ef.ty.kind is Kind.SET:
                elem = ef.ty.element or Type(Kind.INT)
                cols = [ColumnSpec("element", elem, np_dtype(elem))]
                col_name = "element"
            else:
                cols = [ColumnSpec("val", ef.ty, np_dtype(ef.ty))]
                col_name = "val"
            schema.tables[tname] = TableSpec(tname, "effect", c.name, "id", cols, ef.name)
            schema.field_map[(c.name, ef.name)] = (tname, col_name)
    return schema
