"""Value types and effect combinators.

Scalar types are number (float64), int (int64), bool and string; compound
types are ref<Class> and set<T>. Refs are stored as object ids (int64, 0 is
the null reference).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class Kind(Enum):
    NUMBER = "number"
    INT = "int"
    BOOL = "bool"
    STRING = "string"
    REF = "ref"
    SET = "set"
    NULL = "null"  # type of the null literal, assignable to any ref


@dataclass(frozen=True)
class Type:
    kind: Kind
    class_name: str | None = None  # REF only
    element: "Type | None" = None  # SET only

    def __str__(self) -> str:
        if self.kind is Kind.REF:
            return f"ref<{self.class_name}>"
        if self.kind is Kind.SET:
            return f"set<{self.element}>"
        return self.kind.value

    @property
    def is_numeric(self) -> bool:
        return self.kind in (Kind.NUMBER, Kind.INT)


NUMBER = Type(Kind.NUMBER)
INT = Type(Kind.INT)
BOOL = Type(Kind.BOOL)
STRING = Type(Kind.STRING)
NULL = Type(Kind.NULL)


def ref(class_name: str) -> Type:
    return Type(Kind.REF, class_name=class_name)


def set_of(element: Type) -> Type:
    return Type(Kind.SET, element=element)


def assignable(value: Type, target: Type) -> bool:
    """True if a value of type `value` may be supplied where `target` is expected.

    int widens to number; null is assignable to any ref.
    """
    if value == target:
        return True
    if value.kind is Kind.INT and target.kind is Kind.NUMBER:
        return True
    if value.kind is Kind.NULL and target.kind is Kind.REF:
        return True
    return False


class Combinator(Enum):
    """Associative, commutative merge functions for concurrent effect writes."""

    SUM = "sum"
    AVG = "avg"
    MIN = "min"
    MAX = "max"
    COUNT = "count"
    OR = "or"
    AND = "and"
    SET_UNION = "setUnion"

    @property
    def has_identity(self) -> bool:
        """Combinators with an identity reduce an empty entry set to it;
        the rest (avg/min/max) leave the effect absent."""
        return self in (
            Combinator.SUM,
            Combinator.COUNT,
            Combinator.OR,
            Combinator.AND,
            Combinator.SET_UNION,
        )

    def identity(self, value_type: Type):
        if self is Combinator.SUM:
            return 0 if value_type.kind is Kind.INT else 0.0
        if self is Combinator.COUNT:
            return 0
        if self is Combinator.OR:
            return False
        if self is Combinator.AND:
            return True
        if self is Combinator.SET_UNION:
            return frozenset()
        raise ValueError(f"{self.value} has no identity")


COMBINATOR_NAMES = {c.value: c for c in Combinator}


def combinator_accepts(comb: Combinator, value_type: Type) -> bool:
    """Which element types a combinator may reduce."""
    if comb in (Combinator.SUM, Combinator.AVG, Combinator.MIN, Combinator.MAX):
        return value_type.is_numeric
    if comb is Combinator.COUNT:
        return True
    if comb in (Combinator.OR, Combinator.AND):
        return value_type.kind is Kind.BOOL
    if comb is Combinator.SET_UNION:
        return value_type.kind is Kind.SET
    return False
