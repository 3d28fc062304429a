"""SGL: tick-based game scripting compiled to relational algebra.

Per-object scripts are analyzed, lowered to single-tick form, compiled to
relational query plans, and executed set-at-a-time over columnar tables.
A deliberately naive per-object interpreter provides the correctness oracle.
"""

from .diagnostics import CompileError, Diagnostic
from .lexer import Token, TokKind, tokenize
from .parser import parse_expression, parse_source, parse_unit
from .formatter import format_ast
from .analysis import AnalyzedUnit, analyze, check_access, lower_handlers, lower_multitick
from .schema import PhysicalSchema, derive_schema
from .store import ColumnTable, Snapshot, Store, create_tables, load_world
from .rangeindex import RangeIndex, build_range_index, range_query
from .reduction import CombSpec, EffectBuffer, ReducedEffects, reduce_effects
from .plans import QueryPlan, compile_to_plan
from .executor import execute_plan
from .optimizer import PlanSet, WorkloadStats, build_plan_set, collect_stats, optimize, select_plan
from .txn import admit, check_constraints
from .runtime import (
    EngineConfig,
    PhysicsComponent,
    UpdateComponent,
    World,
    build_world,
    dump_state,
    expression_update,
    physics_update,
    register_update_component,
    run_tick,
    run_ticks,
    state_hash,
)
from .interp import interpret_tick
from .tracelog import TraceLog, TraceRecord, effects_of

__version__ = "0.1.0"
