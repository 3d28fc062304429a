"""The tick runtime: query/effect/update phases, update components, and
world assembly.

A tick runs as:

1. Query + effect phase. A snapshot of the state tables is taken; every
   class's compiled plan (or the reference interpreter) runs over it and
   appends to one effect buffer. Scripts observe only the snapshot, so
   actions within a tick are simultaneous and the phase parallelizes
   without synchronization.
2. Transaction admission, then canonical reduction of the buffer.
3. Update phase. Each registered update component computes next-tick
   values for the state fields it owns; ownership is strictly partitioned,
   so component order cannot matter. Spawns and destroys apply last, and
   the tick counter increments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .analysis import AnalyzedUnit, PC_FIELD, TXN_STATUS_FIELD, analyze
from .diagnostics import CompileError, Diagnostic, E_UNPARTITIONED_STATE
from .executor import Rel, _ExecCtx, eval_ve, execute_plan
from .optimizer import PlanSet, WorkloadStats, build_plan_set, select_plan
from .plans import compile_scalar_expr, compile_to_plan, VE
from .reduction import CombSpec, EffectBuffer, ReducedEffects, reduce_effects
from .schema import PhysicalSchema, derive_schema
from .store import Store, Snapshot, create_tables, load_world
from .tracelog import TraceLog
from .txn import (
    AdmissionResult,
    ClassConstraintRules,
    admit,
    check_constraints,
    compile_constraint_machinery,
    txn_status_column,
)
from .typesys import Kind


@dataclass
class EngineConfig:
    workers: int = 1
    engine: str = "relational"  # or "reference"
    seed: int = 0
    hysteresis_factor: float = 4.0
    hysteresis_ticks: int = 3
    decay_alpha: float = 0.5
    index_rebuild_threshold: float = 0.25
    pin_plan: str | None = None
    effect_logging: tuple[str, ...] = ()
    # {"class": ..., "x": ..., "y": ..., "vx": ..., "vy": ..., "bounds": [x0,y0,x1,y1]}
    physics: dict | None = None

    @classmethod
    def from_document(cls, doc: dict) -> "EngineConfig":
        cfg = cls()
        for key in ("workers", "engine", "seed", "hysteresis_factor", "hysteresis_ticks",
                    "decay_alpha", "index_rebuild_threshold", "pin_plan", "physics"):
            if key in doc:
                setattr(cfg, key, doc[key])
        if "effect_logging" in doc:
            cfg.effect_logging = tuple(doc["effect_logging"])
        return cfg

    def to_document(self) -> dict:
        return {
            "workers": self.workers,
            "engine": self.engine,
            "seed": self.seed,
            "hysteresis_factor": self.hysteresis_factor,
            "hysteresis_ticks": self.hysteresis_ticks,
            "decay_alpha": self.decay_alpha,
            "index_rebuild_threshold": self.index_rebuild_threshold,
            "pin_plan": self.pin_plan,
            "effect_logging": list(self.effect_logging),
            "physics": self.physics,
        }


# ---------------------------------------------------------------------------
# Update components
# ---------------------------------------------------------------------------


class UpdateComponent:
    """Owns a disjoint set of state fields and computes their next values."""

    name = "component"

    def owned(self, class_name: str) -> list[str]:
        raise NotImplementedError

    def update(self, world: "World", snap: Snapshot, reduced: ReducedEffects,
               class_name: str) -> dict[str, np.ndarray]:
        raise NotImplementedError


@dataclass
class _CompiledRule:
    target: str
    ve: VE
    gating: list[str]  # identity-less effect fields read; absent -> rule skipped
    effect_reads: list[str]


def _compile_rules(analyzed: AnalyzedUnit) -> dict[str, list[_CompiledRule]]:
    from .nodes import walk_exprs, Name

    out: dict[str, list[_CompiledRule]] = {}
    for cls, info in analyzed.classes.items():
        rules = []
        for r in info.cdef.update_rules:
            reads = sorted({sub.ident for sub in walk_exprs(r.value)
                            if isinstance(sub, Name) and sub.res == "effect"})
            rules.append(_CompiledRule(r.target, compile_scalar_expr(r.value, cls),
                                       info.rule_gating_effects.get(r.target, []), reads))
        out[cls] = rules
    return out


def eval_rules(world: "World", snap: Snapshot, reduced: ReducedEffects, class_name: str,
               rules: list[_CompiledRule]) -> tuple[dict[str, np.ndarray], list[int]]:
    """Evaluate update rules vectorized; per-object faults keep the previous
    value for that object and are reported back."""
    ids = snap.ids(class_name)
    n = len(ids)
    cols: dict[str, np.ndarray] = {"self.id": ids}
    for name, col in snap.table(class_name).columns.items():
        cols[f"self.{name}"] = col
    presence: dict[str, np.ndarray] = {}
    needed = sorted({ef for r in rules for ef in r.effect_reads})
    for ef in needed:
        vals, present = reduced.aligned(class_name, ef, ids)
        cols[f"eff.{ef}"] = vals
        presence[ef] = present
    rel = Rel(cols, ["self.id"], n)
    scratch = EffectBuffer()
    ctx = _ExecCtx(snap, world.store, world.tick, scratch, {}, class_name, None)
    out: dict[str, np.ndarray] = {}
    fault_ids: list[int] = []
    for rule in rules:
        gate = np.ones(n, dtype=bool)
        for ef in rule.gating:
            gate &= presence[ef]
        before = set(scratch.fault_sources)
        vals = eval_ve(rule.ve, rel, ctx, gate)
        new_faults = scratch.fault_sources - before
        faulted = np.isin(ids, np.asarray(sorted(new_faults), dtype=np.int64)) \
            if new_faults else np.zeros(n, dtype=bool)
        fault_ids.extend(int(i) for i in ids[faulted & gate])
        old = cols[f"self.{rule.target}"]
        apply_mask = gate & ~faulted
        new = old.copy()
        if new.dtype == object:
            for i in np.nonzero(apply_mask)[0]:
                new[i] = vals[i]
        else:
            new[apply_mask] = np.asarray(vals, dtype=new.dtype)[apply_mask]
        out[rule.target] = new
    return out, fault_ids


class ExpressionComponent(UpdateComponent):
    """The default updater: applies declared update rules to every state
    field no other component owns; unruled fields keep their values."""

    name = "expression"

    def __init__(self, analyzed: AnalyzedUnit, claimed: dict[str, set[str]]):
        self._rules = _compile_rules(analyzed)
        self._owned: dict[str, list[str]] = {}
        for cls, info in analyzed.classes.items():
            taken = claimed.get(cls, set())
            self._owned[cls] = [f.name for f in info.cdef.state_fields if f.name not in taken]

    def owned(self, class_name: str) -> list[str]:
        return self._owned.get(class_name, [])

    def update(self, world, snap, reduced, class_name):
        mine = set(self._owned.get(class_name, ()))
        rules = [r for r in self._rules.get(class_name, []) if r.target in mine]
        if not rules:
            return {}
        out, faults = eval_rules(world, snap, reduced, class_name, rules)
        for obj in faults:
            world._trace_fault(obj, class_name, "update rule fault; value kept")
        return out


class TxnComponent(UpdateComponent):
    """Owns every constrained state field plus lastTxnStatus; applies the
    constrained fields' update rules to the admitted effect values."""

    name = "transactions"

    def __init__(self, analyzed: AnalyzedUnit, machinery: dict[str, ClassConstraintRules]):
        self._rules = _compile_rules(analyzed)
        self._machinery = machinery
        self._owned: dict[str, list[str]] = {}
        for cls, info in analyzed.classes.items():
            fields = list(info.constrained_state)
            fields.append(TXN_STATUS_FIELD)
            self._owned[cls] = fields

    def owned(self, class_name: str) -> list[str]:
        return self._owned.get(class_name, [])

    def update(self, world, snap, reduced, class_name):
        constrained = set(self._owned.get(class_name, ())) - {TXN_STATUS_FIELD}
        rules = [r for r in self._rules.get(class_name, []) if r.target in constrained]
        out, faults = eval_rules(world, snap, reduced, class_name, rules) if rules else ({}, [])
        for obj in faults:
            world._trace_fault(obj, class_name, "update rule fault; value kept")
        result = world._admission
        if result is not None:
            out[TXN_STATUS_FIELD] = txn_status_column(result, snap.ids(class_name))
        else:
            out[TXN_STATUS_FIELD] = np.full(snap.count(class_name), -1, dtype=np.int64)
        return out


class PhysicsComponent(UpdateComponent):
    """Demo physics: integrates velocity intentions into positions, resolves
    same-cell collisions by displacing the later-id object to the nearest
    free cell, and clamps to the world bounds."""

    name = "physics"

    def __init__(self, class_name: str, x: str = "x", y: str = "y",
                 vx: str = "vx", vy: str = "vy",
                 bounds: tuple[float, float, float, float] = (0.0, 0.0, 256.0, 256.0)):
        self.class_name = class_name
        self.x, self.y, self.vx, self.vy = x, y, vx, vy
        self.bounds = tuple(float(b) for b in bounds)

    def owned(self, class_name: str) -> list[str]:
        return [self.x, self.y] if class_name == self.class_name else []

    def update(self, world, snap, reduced, class_name):
        if class_name != self.class_name:
            return {}
        x0, y0, x1, y1 = self.bounds
        ids = snap.ids(class_name)
        x = snap.column(class_name, self.x)
        y = snap.column(class_name, self.y)
        dvx, px = reduced.aligned(class_name, self.vx, ids)
        dvy, py = reduced.aligned(class_name, self.vy, ids)
        nx = np.clip(x + np.where(px, dvx, 0.0), x0, x1)
        ny = np.clip(y + np.where(py, dvy, 0.0), y0, y1)
        out_x = nx.copy()
        out_y = ny.copy()
        occupied: set[tuple[int, int]] = set()
        for i in range(len(ids)):  # ascending id: earlier objects win cells
            cx, cy = int(np.floor(nx[i])), int(np.floor(ny[i]))
            if (cx, cy) in occupied:
                cell = self._nearest_free(cx, cy, occupied)
                if cell is not None:
                    fx = float(nx[i]) - np.floor(nx[i])
                    fy = float(ny[i]) - np.floor(ny[i])
                    out_x[i] = min(max(cell[0] + fx, x0), x1)
                    out_y[i] = min(max(cell[1] + fy, y0), y1)
                    cx, cy = cell
            occupied.add((cx, cy))
        return {self.x: out_x, self.y: out_y}

    def _nearest_free(self, cx: int, cy: int, occupied: set) -> tuple[int, int] | None:
        x0, y0, x1, y1 = self.bounds
        max_r = int(max(x1 - x0, y1 - y0)) + 1
        for r in range(1, max_r):
            ring = []
            for dx in range(-r, r + 1):
                for dy in range(-r, r + 1):
                    if max(abs(dx), abs(dy)) != r:
                        continue
                    nx, ny = cx + dx, cy + dy
                    if x0 <= nx <= x1 and y0 <= ny <= y1 and (nx, ny) not in occupied:
                        ring.append((dx, dy))
            if ring:
                dx, dy = sorted(ring)[0]
                return (cx + dx, cy + dy)
        return None


# ---------------------------------------------------------------------------
# World
# ---------------------------------------------------------------------------


@dataclass
class World:
    analyzed: AnalyzedUnit
    schema: PhysicalSchema
    store: Store
    config: EngineConfig
    plan_sets: dict[str, PlanSet]
    components: list[UpdateComponent]
    comb_specs: dict[tuple[str, str], CombSpec]
    machinery: dict[str, ClassConstraintRules]
    stats: dict[str, WorkloadStats]
    rng: np.random.Generator
    trace: TraceLog | None = None
    tick: int = 0
    id_class: dict[int, str] = dc_field(default_factory=dict)
    ownership: dict[str, dict[str, str]] = dc_field(default_factory=dict)
    _admission: AdmissionResult | None = None

    def snapshot(self) -> Snapshot:
        return self.store.snapshot(self.tick)

    def _trace_fault(self, obj: int, cls: str, message: str, stmt: int = -1) -> None:
        if self.trace is not None:
            self.trace.add(self.tick, "fault", {
                "object": obj, "class": cls, "stmt": stmt, "message": message,
            })


def _comb_specs(analyzed: AnalyzedUnit) -> dict[tuple[str, str], CombSpec]:
    out = {}
    for cls, info in analyzed.classes.items():
        for ef in info.cdef.effect_fields:
            out[(cls, ef.name)] = CombSpec(ef.combinator, ef.ty)
    return out


def register_update_component(world: World, component: UpdateComponent) -> World:
    """Claim state fields for a component; claims must stay disjoint."""
    for cls in world.analyzed.classes:
        fields = component.owned(cls)
        claimed = world.ownership.setdefault(cls, {})
        for f in fields:
            if f in claimed:
                raise CompileError([Diagnostic(
                    "error", E_UNPARTITIONED_STATE,
                    f"state field {cls}.{f} claimed by both "
                    f"{claimed[f]!r} and {component.name!r}")])
            claimed[f] = component.name
    world.components.append(component)
    return world


def build_world(source_or_analyzed, world_doc: dict | None = None,
                config: EngineConfig | None = None,
                extra_components: list[UpdateComponent] | None = None,
                trace: TraceLog | None = None) -> World:
    """Compile, derive the schema, load the world, and wire the components."""
    config = config or EngineConfig()
    analyzed = source_or_analyzed if isinstance(source_or_analyzed, AnalyzedUnit) \
        else analyze(source_or_analyzed)
    schema = derive_schema(analyzed.unit.classes)
    store = create_tables(schema, config.index_rebuild_threshold)
    if world_doc is not None:
        load_world(store, world_doc)
    logical = compile_to_plan(analyzed, schema)
    plan_sets = {cls: build_plan_set(p, config.hysteresis_factor, config.hysteresis_ticks)
                 for cls, p in logical.items()}
    if config.pin_plan is not None:
        for ps in plan_sets.values():
            if config.pin_plan in ps.plans:
                ps.pinned = config.pin_plan
    machinery = compile_constraint_machinery(analyzed)
    world = World(
        analyzed=analyzed,
        schema=schema,
        store=store,
        config=config,
        plan_sets=plan_sets,
        components=[],
        comb_specs=_comb_specs(analyzed),
        machinery=machinery,
        stats={cls: WorkloadStats() for cls in analyzed.classes},
        rng=np.random.default_rng(config.seed),
        trace=trace,
    )
    if trace is not None:
        trace.effect_classes = frozenset(config.effect_logging)
    for cls in analyzed.classes:
        for obj in store.state[cls].ids:
            world.id_class[int(obj)] = cls
    # Component registration order: transactions, physics, expression
    # remainder. Ownership disjointness makes the order irrelevant.
    register_update_component(world, TxnComponent(analyzed, machinery))
    if config.physics:
        p = config.physics
        register_update_component(world, PhysicsComponent(
            p["class"], p.get("x", "x"), p.get("y", "y"),
            p.get("vx", "vx"), p.get("vy", "vy"),
            tuple(p.get("bounds", (0.0, 0.0, 256.0, 256.0)))))
    for comp in extra_components or []:
        register_update_component(world, comp)
    claimed = {cls: set(m) for cls, m in world.ownership.items()}
    register_update_component(world, ExpressionComponent(analyzed, claimed))
    if machinery:
        bad = check_constraints(store.snapshot(0), analyzed, machinery)
        if bad:
            raise ValueError(f"world violates constraints at load time: {bad[:5]}")
    return world


# ---------------------------------------------------------------------------
# The tick
# ---------------------------------------------------------------------------


def run_tick(world: World) -> World:
    """Advance the world exactly one tick."""
    snap = world.snapshot()
    buffer = EffectBuffer()

    if world.config.engine == "reference":
        from .interp import interpret_effect_phase

        interpret_effect_phase(world, snap, buffer)
    else:
        for cls in world.analyzed.classes:
            plan_set = world.plan_sets.get(cls)
            if plan_set is None or snap.count(cls) == 0:
                continue
            plan = plan_set.plan()
            observed: dict[str, int] = {}
            part = execute_plan(plan, snap, world.config.workers,
                                store=world.store, tick=world.tick, stats=observed)
            buffer.merge(part)
            stats = world.stats[cls]
            stats.extents.update({c: snap.count(c) for c in world.analyzed.classes})
            stats.observe(observed, world.config.decay_alpha)

    for f in buffer.faults:
        world._trace_fault(f.source, f.class_name, f.message, f.stmt_id)
    buffer.retract_faulted()

    world._admission = admit(buffer, snap, world.analyzed, world.machinery,
                             world.comb_specs, world.tick)
    aborted = world._admission.aborted
    if world.trace is not None:
        for rec in world._admission.records:
            world.trace.add(world.tick, "txnOutcome", {
                "object": rec.source, "site": rec.site, "status": rec.status,
                "touched": rec.touched, "violated": rec.violated,
            })
        world.trace.log_effects(world.tick, buffer, aborted)

    reduced = reduce_effects(buffer, world.comb_specs, aborted)
    _publish_effect_tables(world, reduced)

    destroys = _destroy_sets(world, buffer)
    spawn_rows = _spawn_rows(world, buffer)

    for cls in world.analyzed.classes:
        if snap.count(cls) == 0 and not spawn_rows.get(cls):
            continue
        new_columns: dict[str, np.ndarray] = {}
        for comp in world.components:
            updates = comp.update(world, snap, reduced, cls)
            for fname, col in updates.items():
                new_columns[fname] = col
            if world.trace is not None and updates:
                world.trace.add(world.tick, "componentUpdate", {
                    "component": comp.name, "class": cls, "fields": sorted(updates)})
        dead = destroys.get(cls, set())
        if world.trace is not None and dead:
            touched = {int(t) for key in reduced.data for t in reduced.data[key][0]}
            for obj in sorted(dead & touched):
                world.trace.add(world.tick, "fault", {
                    "object": obj, "class": cls, "stmt": -1,
                    "message": "update to destroyed object dropped"})
        world.store.commit_class(cls, new_columns, spawn_rows.get(cls, []), dead)

    world._admission = None
    if world.config.engine != "reference":
        _switch_plans(world)
    world.tick += 1
    return world


def _publish_effect_tables(world: World, reduced: ReducedEffects) -> None:
    for (cls, field), (ids, vals) in reduced.data.items():
        world.store.set_effect_rows(cls, field, ids, vals)


def _destroy_sets(world: World, buffer: EffectBuffer) -> dict[str, set[int]]:
    out: dict[str, set[int]] = {}
    for target, source, stmt in buffer.destroys:
        cls = world.id_class.get(target)
        if cls is None:
            world._trace_fault(source, "?", f"destroy of unknown object {target}", stmt)
            continue
        out.setdefault(cls, set()).add(target)
    for cls, dead in out.items():
        for obj in dead:
            world.id_class.pop(obj, None)
    return out


def _spawn_rows(world: World, buffer: EffectBuffer) -> dict[str, list[tuple[int, dict]]]:
    """Assign ids to spawn records in canonical order; new objects become
    visible at the next tick's snapshot."""
    out: dict[str, list[tuple[int, dict]]] = {}
    for source, stmt, keys, cls, fields in sorted(
            buffer.spawns, key=lambda s: (s[0], s[1], s[2])):
        new_id = world.store.next_id
        world.store.next_id += 1
        out.setdefault(cls, []).append((new_id, fields))
        world.id_class[new_id] = cls
    return out


def _switch_plans(world: World) -> None:
    for cls, plan_set in world.plan_sets.items():
        before = plan_set.active
        after = select_plan(plan_set, world.stats[cls])
        if after != before:
            plan_set.switches.append((world.tick, before, after))
            if world.trace is not None:
                world.trace.add(world.tick, "planSwitch", {
                    "class": cls, "from": before, "to": after})


def run_ticks(world: World, n: int) -> World:
    for _ in range(n):
        run_tick(world)
    return world


# ---------------------------------------------------------------------------
# Spec-named convenience surfaces
# ---------------------------------------------------------------------------


def expression_update(snap: Snapshot, reduced: ReducedEffects, analyzed: AnalyzedUnit,
                      class_name: str, targets: list[str] | None = None) -> dict[str, np.ndarray]:
    """Apply declared update rules for one class outside a full world run."""
    rules = _compile_rules(analyzed).get(class_name, [])
    if targets is not None:
        rules = [r for r in rules if r.target in targets]

    class _Shim:
        store = None
        tick = snap.tick

        @staticmethod
        def _trace_fault(*a, **k):
            pass

    out, _ = eval_rules(_Shim, snap, reduced, class_name, rules)
    return out


def physics_update(snap: Snapshot, reduced: ReducedEffects, component: PhysicsComponent,
                   class_name: str) -> dict[str, np.ndarray]:
    return component.update(None, snap, reduced, class_name)


def state_hash(world: World) -> str:
    """Order-stable digest of all state tables (for bit-exact comparisons)."""
    import hashlib

    h = hashlib.sha256()
    h.update(str(world.tick).encode())
    for cls in sorted(world.analyzed.classes):
        table = world.store.state[cls]
        h.update(cls.encode())
        h.update(table.ids.tobytes())
        for name in sorted(table.columns):
            col = table.columns[name]
            h.update(name.encode())
            if col.dtype == object:
                h.update(json.dumps([_stable(v) for v in col]).encode())
            else:
                h.update(col.tobytes())
    return h.hexdigest()


def _stable(v):
    if isinstance(v, frozenset):
        return sorted(v)
    if hasattr(v, "item"):
        return v.item()
    return v


def dump_state(world: World) -> dict:
    """Full-precision JSON-ready dump of every state table."""
    return {
        "tick": world.tick,
        "classes": {
            cls: [dict(row) for row in world.store.state[cls].rows()]
            for cls in world.analyzed.classes
        },
    }
