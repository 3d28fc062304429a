"""Resumable checkpoints: versioned JSON with a checksum.

A checkpoint is self-contained at a tick boundary: full state-table
contents, the tick counter, RNG state, id allocator, plan-selection state,
and decayed workload statistics, keyed to the compiled unit's hash. A
restore followed by N ticks is bit-identical to running N ticks without
the interruption.
"""

from __future__ import annotations

import hashlib
import json
from typing import IO

from .optimizer import WorkloadStats
from .runtime import EngineConfig, World, build_world

FORMAT_VERSION = 1


def _table_doc(world: World, cls: str) -> dict:
    table = world.store.state[cls]
    columns = {}
    for name, col in table.columns.items():
        if col.dtype == object:
            columns[name] = [sorted(v) if isinstance(v, frozenset) else v for v in col]
        else:
            columns[name] = col.tolist()
    return {"ids": table.ids.tolist(), "columns": columns}


def checkpoint_document(world: World) -> dict:
    payload = {
        "version": FORMAT_VERSION,
        "unit_hash": world.analyzed.source_hash,
        "tick": world.tick,
        "seed": world.config.seed,
        "rng_state": world.rng.bit_generator.state,
        "next_id": world.store.next_id,
        "tables": {cls: _table_doc(world, cls) for cls in world.analyzed.classes},
        "plan_state": {
            cls: {"active": ps.active, "streak": ps.streak, "switches": ps.switches}
            for cls, ps in world.plan_sets.items()
        },
        "stats": {
            cls: {"decayed": st.decayed, "last": st.last,
                  "extents": st.extents, "ticks": st.ticks}
            for cls, st in world.stats.items()
        },
    }
    payload["checksum"] = _digest(payload)
    return payload


def _digest(payload: dict) -> str:
    body = {k: v for k, v in payload.items() if k != "checksum"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def checkpoint(world: World, sink: IO[str]) -> dict:
    """Write a checkpoint; returns {tick, checksum} metadata."""
    doc = checkpoint_document(world)
    json.dump(doc, sink)
    return {"tick": doc["tick"], "checksum": doc["checksum"]}


def restore_document(doc: dict, source_or_analyzed, config: EngineConfig | None = None,
                     trace=None) -> World:
    """Rebuild a world from a checkpoint document.

    Fails on version mismatch, compiled-unit hash mismatch, or checksum
    corruption.
    """
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"checkpoint format version {doc.get('version')} != {FORMAT_VERSION}")
    if doc.get("checksum") != _digest(doc):
        raise ValueError("checkpoint checksum mismatch (corrupt file)")
    world = build_world(source_or_analyzed, None, config, trace=trace)
    if doc.get("unit_hash") != world.analyzed.source_hash:
        raise ValueError("checkpoint was taken against a different compiled unit")
    for cls, tdoc in doc["tables"].items():
        if cls not in world.store.state:
            raise ValueError(f"checkpoint references unknown class {cls!r}")
        rows = []
        columns = tdoc["columns"]
        for i, obj in enumerate(tdoc["ids"]):
            rows.append((int(obj), {name: col[i] for name, col in columns.items()}))
        world.store._append_rows(cls, rows)
        for obj in tdoc["ids"]:
            world.id_class[int(obj)] = cls
    world.tick = int(doc["tick"])
    world.store.next_id = int(doc["next_id"])
    world.rng.bit_generator.state = doc["rng_state"]
    for cls, ps_doc in doc.get("plan_state", {}).items():
        ps = world.plan_sets.get(cls)
        if ps is not None and ps_doc["active"] in ps.plans:
            ps.active = ps_doc["active"]
            ps.streak = int(ps_doc["streak"])
            ps.switches = [tuple(s) for s in ps_doc.get("switches", [])]
    for cls, st_doc in doc.get("stats", {}).items():
        world.stats[cls] = WorkloadStats(
            decayed=dict(st_doc.get("decayed", {})),
            last={k: int(v) for k, v in st_doc.get("last", {}).items()},
            extents={k: int(v) for k, v in st_doc.get("extents", {}).items()},
            ticks=int(st_doc.get("ticks", 0)),
        )
    return world


def restore(source: IO[str] | dict, source_or_analyzed, config: EngineConfig | None = None,
            trace=None) -> World:
    doc = source if isinstance(source, dict) else json.load(source)
    return restore_document(doc, source_or_analyzed, config, trace)
