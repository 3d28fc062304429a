"""Structured trace log: effect provenance, transaction outcomes, faults,
plan switches, and component updates, strictly ordered by (tick, sequence).

Records are plain dicts rendered as newline-delimited JSON. Effect logging
is off by default (it is the expensive kind) and enabled per class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from typing import IO

from .reduction import CombSpec, EffectBuffer, reduce_entries

KINDS = ("effectEntry", "txnOutcome", "fault", "planSwitch", "componentUpdate", "header")


@dataclass
class TraceRecord:
    tick: int
    seq: int
    kind: str
    payload: dict

    def to_json(self) -> str:
        return json.dumps({"tick": self.tick, "seq": self.seq, "kind": self.kind,
                           **self.payload}, default=_jsonable, sort_keys=True)


def _jsonable(v):
    if isinstance(v, frozenset):
        return sorted(v)
    if hasattr(v, "item"):
        return v.item()
    raise TypeError(f"not JSON-serializable: {type(v)}")


@dataclass
class TraceLog:
    records: list[TraceRecord] = dc_field(default_factory=list)
    effect_classes: frozenset[str] = frozenset()
    _seq: int = 0

    def add(self, tick: int, kind: str, payload: dict) -> TraceRecord:
        assert kind in KINDS, kind
        rec = TraceRecord(tick, self._seq, kind, payload)
        self._seq += 1
        self.records.append(rec)
        return rec

    def log_effects(self, tick: int, buffer: EffectBuffer,
                    aborted: set[tuple[int, int]]) -> None:
        """One effectEntry record per buffer entry for enabled classes,
        including aborted-transaction entries (flagged, excluded from
        reduction)."""
        if not self.effect_classes:
            return
        for (cls, field) in buffer.fields():
            if cls not in self.effect_classes:
                continue
            arrays = buffer.field_arrays(cls, field)
            if arrays is None:
                continue
            for i in range(len(arrays["target"])):
                site = int(arrays["site"][i])
                src = int(arrays["source"][i])
                self.add(tick, "effectEntry", {
                    "class": cls,
                    "field": field,
                    "target": int(arrays["target"][i]),
                    "source": src,
                    "stmt": int(arrays["stmt"][i]),
                    "value": _payload_value(arrays["value"][i]),
                    "site": site,
                    "aborted": site >= 0 and (src, site) in aborted,
                })

    def write(self, sink: IO[str]) -> None:
        for rec in self.records:
            sink.write(rec.to_json())
            sink.write("\n")


def _payload_value(v):
    if isinstance(v, frozenset):
        return sorted(v)
    if hasattr(v, "item"):
        return v.item()
    return v


def effects_of(trace: TraceLog, object_id: int, tick: int,
               specs: dict[tuple[str, str], CombSpec] | None = None) -> list[dict]:
    """Every effect entry targeting `object_id` at `tick`, with provenance and
    pre-reduction values, plus the recomputed reduced value per field.

    Aborted-transaction entries are present and flagged but excluded from
    the reduced value. Unknown object or tick yields an empty list.
    """
    entries = [r for r in trace.records
               if r.kind == "effectEntry" and r.tick == tick
               and r.payload["target"] == object_id]
    out = [dict(r.payload, tick=r.tick, seq=r.seq) for r in entries]
    if specs:
        by_field: dict[tuple[str, str], list[dict]] = {}
        for e in out:
            by_field.setdefault((e["class"], e["field"]), []).append(e)
        for key, group in by_field.items():
            spec = specs.get(key)
            if spec is None:
                continue
            live = [e for e in group if not e["aborted"]]
            reduced = None
            if live:
                import numpy as np

                arrays = {
                    "target": np.asarray([e["target"] for e in live], dtype=np.int64),
                    "source": np.asarray([e["source"] for e in live], dtype=np.int64),
                    "stmt": np.asarray([e["stmt"] for e in live], dtype=np.int64),
                    "value": _entry_values(live, spec),
                    "override": np.zeros(len(live), dtype=bool),
                }
                ids, vals = reduce_entries(arrays, spec.combinator, spec.ty)
                reduced = _payload_value(vals[0])
            for e in group:
                e["reduced"] = reduced
    return out


def _entry_values(entries: list[dict], spec: CombSpec):
    import numpy as np

    vals = [e["value"] for e in entries]
    if spec.ty.kind.value == "set":
        arr = np.empty(len(vals), dtype=object)
        arr[:] = [frozenset(v) if isinstance(v, list) else v for v in vals]
        return arr
    return np.asarray(vals)
