"""Command-line entry points: compile, run, debug, bench.

Exit codes: 0 ok, 1 diagnostics, 2 I/O or environment, 3 engine invariant
violation.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

from .analysis import analyze
from .checkpoint import checkpoint, restore
from .diagnostics import CompileError
from .plans import compile_to_plan
from .runtime import EngineConfig, build_world, dump_state, run_tick
from .scenarios import SCENARIOS
from .schema import derive_schema
from .tracelog import TraceLog

EXIT_OK = 0
EXIT_DIAGNOSTICS = 1
EXIT_IO = 2
EXIT_ENGINE = 3


def _read_sources(paths: list[str]) -> str:
    parts = []
    for p in paths:
        parts.append(Path(p).read_text())
    return "\n".join(parts)


def _load_json(path: str) -> dict:
    return json.loads(Path(path).read_text())


def _build_config(args) -> EngineConfig:
    cfg = EngineConfig()
    if getattr(args, "config", None):
        cfg = EngineConfig.from_document(_load_json(args.config))
    for attr, flag in (("engine", "engine"), ("workers", "workers"), ("seed", "seed"),
                       ("pin_plan", "pin_plan")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, attr, v)
    return cfg


def cmd_compile(args) -> int:
    try:
        source = _read_sources(args.sources)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        analyzed = analyze(source)
    except CompileError as exc:
        for d in exc.diagnostics:
            print(str(d), file=sys.stderr)
        return EXIT_DIAGNOSTICS
    schema = derive_schema(analyzed.unit.classes)
    if args.emit_schema:
        Path(args.emit_schema).write_text(json.dumps(schema.mapping_document(), indent=2, sort_keys=True))
    if args.emit_plan:
        plans = compile_to_plan(analyzed, schema)
        doc = {cls: plan.to_document() for cls, plan in plans.items()}
        Path(args.emit_plan).write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(f"ok: {len(analyzed.classes)} classes, {analyzed.stmt_count} statements")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        source = _read_sources(args.sources)
        world_doc = _load_json(args.world) if args.world else {"objects": []}
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    cfg = _build_config(args)
    trace = None
    if args.trace:
        trace = TraceLog()
    try:
        if args.restore:
            analyzed = analyze(source)
            with open(args.restore) as fh:
                world = restore(fh, analyzed, cfg, trace=trace)
        else:
            world = build_world(source, world_doc, cfg, trace=trace)
    except CompileError as exc:
        for d in exc.diagnostics:
            print(str(d), file=sys.stderr)
        return EXIT_DIAGNOSTICS
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIAGNOSTICS
    if trace is not None:
        trace.add(world.tick, "header", {
            "config": cfg.to_document(), "source_hash": world.analyzed.source_hash,
        })
    started = time.perf_counter()
    try:
        for i in range(args.ticks):
            run_tick(world)
            if args.checkpoint_at is not None and world.tick == args.checkpoint_at and args.checkpoint:
                with open(args.checkpoint, "w") as fh:
                    checkpoint(world, fh)
            if args.dump_state_every and world.tick % args.dump_state_every == 0:
                path = Path(args.dump_dir or ".") / f"state-{world.tick:06d}.json"
                path.write_text(json.dumps(dump_state(world), sort_keys=True))
    except CompileError as exc:
        print(f"engine invariant violation: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    elapsed = time.perf_counter() - started
    if args.dump_state:
        Path(args.dump_state).write_text(json.dumps(dump_state(world), sort_keys=True))
    if args.trace and trace is not None:
        with open(args.trace, "w") as fh:
            trace.write(fh)
    rate = args.ticks / elapsed if elapsed > 0 and args.ticks else float("inf")
    print(f"ran {args.ticks} ticks to tick {world.tick} ({rate:.1f} ticks/sec)")
    return EXIT_OK


def cmd_debug(args) -> int:
    from .debugserver import DebugSession, serve_debug_api

    try:
        source = _read_sources(args.sources)
        world_doc = _load_json(args.world) if args.world else {"objects": []}
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    cfg = _build_config(args)
    trace = TraceLog()
    try:
        world = build_world(source, world_doc, cfg, trace=trace)
    except CompileError as exc:
        for d in exc.diagnostics:
            print(str(d), file=sys.stderr)
        return EXIT_DIAGNOSTICS
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIAGNOSTICS
    session = DebugSession(world)
    try:
        server = serve_debug_api(session, args.port)
    except OSError as exc:
        print(f"error: cannot bind port {args.port}: {exc}", file=sys.stderr)
        return EXIT_IO
    host, port = server.server_address[:2]
    print(f"debug API listening on http://{host}:{port}/ (paused at tick {world.tick})")
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        if args.checkpoint_on_exit:
            with open(args.checkpoint_on_exit, "w") as fh:
                checkpoint(session.world, fh)
            print(f"checkpoint written to {args.checkpoint_on_exit}")
    return EXIT_OK


def cmd_bench(args) -> int:
    entry = SCENARIOS.get(args.scenario)
    if entry is None:
        print(f"error: unknown scenario {args.scenario!r}; one of {sorted(SCENARIOS)}",
              file=sys.stderr)
        return EXIT_IO
    source, world_gen = entry
    sizes = [int(s) for s in args.n.split(",")] if args.n else [100, 1000, 10000]
    print(f"{'n':>8} {'relational t/s':>15} {'reference t/s':>15} {'speedup':>8}")
    for n in sizes:
        world_doc = world_gen(n, args.seed)
        rel = _bench_engine(source, world_doc, "relational", args.ticks, args.workers or 1)
        ref_ticks = min(args.ticks, max(1, args.reference_ticks))
        ref = _bench_engine(source, world_doc, "reference", ref_ticks, 1)
        speedup = ref / rel if rel > 0 else float("inf")
        print(f"{n:>8} {1.0 / rel:>15.2f} {1.0 / ref:>15.2f} {speedup:>7.1f}x")
    return EXIT_OK


def _bench_engine(source: str, world_doc: dict, engine: str, ticks: int, workers: int) -> float:
    """Median seconds per tick."""
    cfg = EngineConfig(engine=engine, workers=workers)
    world = build_world(source, world_doc, cfg)
    samples = []
    for _ in range(ticks):
        t0 = time.perf_counter()
        run_tick(world)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgl", description="SGL compiler and engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="compile sources and emit artifacts")
    p.add_argument("sources", nargs="+")
    p.add_argument("--emit-plan", metavar="PATH")
    p.add_argument("--emit-schema", metavar="PATH")
    p.set_defaults(fn=cmd_compile)

    p = sub.add_parser("run", help="run a world for N ticks")
    p.add_argument("sources", nargs="+")
    p.add_argument("--world", metavar="PATH")
    p.add_argument("--ticks", type=int, default=100)
    p.add_argument("--engine", choices=["relational", "reference"])
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pin-plan", dest="pin_plan")
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--trace", metavar="PATH")
    p.add_argument("--dump-state", metavar="PATH")
    p.add_argument("--dump-state-every", type=int, metavar="K")
    p.add_argument("--dump-dir", metavar="DIR")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--checkpoint-at", type=int, metavar="TICK")
    p.add_argument("--restore", metavar="PATH")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("debug", help="serve the interactive debug API")
    p.add_argument("sources", nargs="+")
    p.add_argument("--world", metavar="PATH")
    p.add_argument("--port", type=int, default=8321)
    p.add_argument("--engine", choices=["relational", "reference"])
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--checkpoint-on-exit", metavar="PATH")
    p.set_defaults(fn=cmd_debug)

    p = sub.add_parser("bench", help="benchmark both engines on a bundled scenario")
    p.add_argument("scenario", nargs="?", default="fig2-count")
    p.add_argument("--n", metavar="N1,N2,...")
    p.add_argument("--ticks", type=int, default=20)
    p.add_argument("--reference-ticks", type=int, default=3,
                   help="ticks to sample for the reference engine (it is slow by design)")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
