"""HTTP debug API for tick-stepped inspection.

The engine pauses at tick boundaries; a debug session holds control and
advances only on /step or /run. GET endpoints never mutate engine state;
all control flows through a single lock so exactly one component mutates
the world at a time. /pause flips an event the run loop checks between
ticks, so it works from a second client mid-run.

Endpoints (all JSON): GET /schema, /state/{class}, /object/{id},
/effects/{id}?tick=, /plan?class=, /stats; POST /step {ticks}, /run
{untilTick|untilBreakpoint,maxTicks}, /pause, /breakpoints {class,cond},
/checkpoint {path}, /restore {path}; DELETE /breakpoints/{id}. The
inspector bundle is served at /.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field as dc_field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from .analysis import AnalyzedUnit
from .checkpoint import checkpoint_document, restore_document
from .diagnostics import CompileError
from .executor import Rel, _ExecCtx, eval_ve
from .parser import parse_expression
from .plans import compile_scalar_expr
from .reduction import EffectBuffer
from .runtime import World, run_tick
from .tracelog import effects_of
from .typesys import Kind

STATIC_DIR = Path(__file__).parent / "inspector_static"


@dataclass
class Breakpoint:
    bp_id: int
    class_name: str
    cond_text: str
    predicate: object  # compiled VE
    enabled: bool = True


@dataclass
class DebugSession:
    world: World
    lock: threading.Lock = dc_field(default_factory=threading.Lock)
    pause_flag: threading.Event = dc_field(default_factory=threading.Event)
    breakpoints: dict[int, Breakpoint] = dc_field(default_factory=dict)
    next_bp: int = 1
    max_run_ticks: int = 1000

    def compile_breakpoint(self, class_name: str, cond: str) -> Breakpoint:
        if class_name not in self.world.analyzed.classes:
            raise ValueError(f"unknown class {class_name!r}")
        expr = parse_expression(cond)
        from .analysis import _Checker, _Ctx, _Scope

        checker = _Checker(self.world.analyzed.unit)
        cdef = self.world.analyzed.unit.class_def(class_name)
        ty = checker.resolve_expr(expr, _Ctx(cdef, _Scope()))
        checker.sink.check()
        if ty.kind is not Kind.BOOL:
            raise ValueError("breakpoint condition must be boolean")
        ve = compile_scalar_expr(expr, class_name)
        bp = Breakpoint(self.next_bp, class_name, cond, ve)
        self.next_bp += 1
        self.breakpoints[bp.bp_id] = bp
        return bp

    def breakpoint_hit(self) -> int | None:
        """Evaluate enabled breakpoints on the current tick boundary."""
        snap = self.world.snapshot()
        for bp in self.breakpoints.values():
            if not bp.enabled or snap.count(bp.class_name) == 0:
                continue
            ids = snap.ids(bp.class_name)
            cols = {"self.id": ids}
            for name, col in snap.table(bp.class_name).columns.items():
                cols[f"self.{name}"] = col
            rel = Rel(cols, ["self.id"], len(ids))
            scratch = EffectBuffer()
            ctx = _ExecCtx(snap, None, self.world.tick, scratch, {}, bp.class_name, None)
            hit = np.asarray(eval_ve(bp.predicate, rel, ctx, None), dtype=bool)
            if hit.any():
                return bp.bp_id
        return None

    # -- control -------------------------------------------------------------

    def step(self, ticks: int) -> dict:
        with self.lock:
            for _ in range(max(0, ticks)):
                run_tick(self.world)
            return {"tick": self.world.tick}

    def run(self, until_tick: int | None, until_breakpoint: bool, max_ticks: int | None) -> dict:
        limit = self.max_run_ticks if max_ticks is None else max_ticks
        self.pause_flag.clear()
        ran = 0
        halted = "maxTicks"
        bp_hit = None
        with self.lock:
            if until_breakpoint:
                bp_hit = self.breakpoint_hit()
                if bp_hit is not None:
                    return {"tick": self.world.tick, "halted": "breakpoint", "breakpoint": bp_hit}
            while ran < limit:
                if until_tick is not None and self.world.tick >= until_tick:
                    halted = "untilTick"
                    break
                if self.pause_flag.is_set():
                    halted = "pause"
                    break
                run_tick(self.world)
                ran += 1
                if until_breakpoint:
                    bp_hit = self.breakpoint_hit()
                    if bp_hit is not None:
                        halted = "breakpoint"
                        break
            else:
                halted = "maxTicks" if until_tick is None or self.world.tick < until_tick else "untilTick"
        out = {"tick": self.world.tick, "halted": halted, "ticks_run": ran}
        if bp_hit is not None:
            out["breakpoint"] = bp_hit
        return out


class _Handler(BaseHTTPRequestHandler):
    session: DebugSession  # set by serve_debug_api
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default
        pass

    # -- plumbing --------------------------------------------------------------

    def _send(self, code: int, payload: dict | list | str, content_type: str = "application/json") -> None:
        body = payload if isinstance(payload, (bytes, str)) else json.dumps(payload, default=_jsonable)
        if isinstance(body, str):
            body = body.encode()
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _error(self, code: int, message: str) -> None:
        self._send(code, {"error": message})

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length == 0:
            return {}
        try:
            return json.loads(self.rfile.read(length))
        except json.JSONDecodeError:
            raise ValueError("request body is not valid JSON")

    # -- GET ---------------------------------------------------------------------

    def do_GET(self) -> None:
        try:
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            query = {k: v[0] for k, v in parse_qs(url.query).items()}
            session = self.session
            world = session.world
            if not parts:
                return self._static("index.html")
            if parts[0] == "static" and len(parts) == 2:
                return self._static(parts[1])
            if parts[0] == "schema":
                return self._send(200, world.schema.mapping_document())
            if parts[0] == "state" and len(parts) == 2:
                return self._state(parts[1], query)
            if parts[0] == "object" and len(parts) == 2:
                return self._object(int(parts[1]))
            if parts[0] == "effects" and len(parts) == 2:
                return self._effects(int(parts[1]), query)
            if parts[0] == "plan":
                return self._plan(query)
            if parts[0] == "stats":
                return self._stats()
            if parts[0] == "breakpoints":
                with session.lock:
                    return self._send(200, [
                        {"id": b.bp_id, "class": b.class_name, "cond": b.cond_text,
                         "enabled": b.enabled}
                        for b in session.breakpoints.values()
                    ])
            return self._error(404, f"unknown endpoint {url.path}")
        except ValueError as exc:
            self._error(400, str(exc))
        except Exception as exc:  # malformed requests must not kill the server
            self._error(500, f"{type(exc).__name__}: {exc}")

    def _static(self, name: str) -> None:
        path = STATIC_DIR / name
        if not path.is_file() or ".." in name:
            if name == "index.html":
                return self._send(200, _FALLBACK_PAGE, "text/html")
            return self._error(404, f"no static file {name}")
        ctype = {"html": "text/html", "js": "text/javascript", "css": "text/css",
                 "map": "application/json"}.get(path.suffix.lstrip("."), "application/octet-stream")
        self._send(200, path.read_bytes(), ctype)

    def _state(self, class_name: str, query: dict) -> None:
        session = self.session
        with session.lock:
            world = session.world
            if class_name not in world.analyzed.classes:
                return self._error(404, f"unknown class {class_name!r}")
            if "tick" in query and int(query["tick"]) != world.tick:
                return self._error(409, f"state is only inspectable at the current "
                                        f"tick boundary ({world.tick})")
            table = world.store.state[class_name]
            rows = table.rows()
            self._send(200, {"class": class_name, "tick": world.tick,
                             "columns": ["id"] + list(table.columns), "rows": rows})

    def _object(self, obj_id: int) -> None:
        session = self.session
        with session.lock:
            world = session.world
            cls = world.id_class.get(obj_id)
            if cls is None:
                return self._error(404, f"no live object {obj_id}")
            table = world.store.state[cls]
            pos = world.snapshot().pos_map(cls).get(obj_id)
            row = {"id": obj_id}
            for name, col in table.columns.items():
                row[name] = col[pos]
            self._send(200, {"class": cls, "tick": world.tick, "object": row})

    def _effects(self, obj_id: int, query: dict) -> None:
        session = self.session
        with session.lock:
            world = session.world
            if world.trace is None or not world.trace.effect_classes:
                return self._error(409, "effect logging is disabled; enable it via "
                                        "the engine config (effect_logging)")
            tick = int(query.get("tick", world.tick - 1))
            entries = effects_of(world.trace, obj_id, tick, world.comb_specs)
            self._send(200, {"object": obj_id, "tick": tick, "entries": entries})

    def _plan(self, query: dict) -> None:
        session = self.session
        with session.lock:
            world = session.world
            cls = query.get("class")
            if cls is None or cls not in world.plan_sets:
                return self._error(404, f"no plan for class {cls!r}")
            ps = world.plan_sets[cls]
            plan = ps.plan()
            stats = world.stats.get(cls)
            self._send(200, {
                "class": cls,
                "active": ps.active,
                "pinned": ps.pinned,
                "plans": sorted(ps.plans),
                "switches": [list(s) for s in ps.switches],
                "document": plan.to_document(),
                "cardinalities": dict(stats.last) if stats else {},
            })

    def _stats(self) -> None:
        session = self.session
        with session.lock:
            world = session.world
            self._send(200, {
                "tick": world.tick,
                "classes": {
                    cls: {
                        "extent": world.store.state[cls].n,
                        "activePlan": world.plan_sets[cls].active if cls in world.plan_sets else None,
                        "decayed": world.stats[cls].decayed,
                        "last": world.stats[cls].last,
                    }
                    for cls in world.analyzed.classes
                },
            })

    # -- POST / DELETE -------------------------------------------------------------

    def do_POST(self) -> None:
        try:
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            session = self.session
            body = self._body()
            if parts == ["step"]:
                return self._send(200, session.step(int(body.get("ticks", 1))))
            if parts == ["run"]:
                return self._send(200, session.run(
                    body.get("untilTick"), bool(body.get("untilBreakpoint")),
                    body.get("maxTicks")))
            if parts == ["pause"]:
                session.pause_flag.set()
                return self._send(200, {"paused": True, "tick": session.world.tick})
            if parts == ["breakpoints"]:
                with session.lock:
                    bp = session.compile_breakpoint(body["class"], body["cond"])
                return self._send(200, {"id": bp.bp_id, "class": bp.class_name,
                                        "cond": bp.cond_text})
            if parts == ["checkpoint"]:
                with session.lock:
                    doc = checkpoint_document(session.world)
                path = body.get("path")
                if path:
                    Path(path).write_text(json.dumps(doc))
                return self._send(200, {"tick": doc["tick"], "checksum": doc["checksum"],
                                        "path": path})
            if parts == ["restore"]:
                path = body.get("path")
                if not path:
                    return self._error(400, "restore needs a path")
                doc = json.loads(Path(path).read_text())
                with session.lock:
                    session.world = restore_document(doc, session.world.analyzed,
                                                     session.world.config,
                                                     trace=session.world.trace)
                return self._send(200, {"tick": session.world.tick})
            return self._error(404, f"unknown endpoint {url.path}")
        except (ValueError, KeyError, CompileError) as exc:
            self._error(400, str(exc))
        except Exception as exc:
            self._error(500, f"{type(exc).__name__}: {exc}")

    def do_DELETE(self) -> None:
        parts = [p for p in urlparse(self.path).path.split("/") if p]
        if len(parts) == 2 and parts[0] == "breakpoints":
            with self.session.lock:
                bp = self.session.breakpoints.pop(int(parts[1]), None)
            if bp is None:
                return self._error(404, "no such breakpoint")
            return self._send(200, {"deleted": bp.bp_id})
        self._error(404, "unknown endpoint")


def _jsonable(v):
    if isinstance(v, frozenset):
        return sorted(v)
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not JSON-serializable: {type(v)}")


_FALLBACK_PAGE = """<!doctype html><html><head><title>SGL inspector</title></head>
<body><h1>SGL debug API</h1>
<p>The inspector bundle is not built. The JSON API is live: try
<a href="/schema">/schema</a>, <a href="/stats">/stats</a>.</p></body></html>"""


def serve_debug_api(session: DebugSession, port: int, host: str = "127.0.0.1") -> ThreadingHTTPServer:
    """Start the debug service; returns the server (caller owns shutdown)."""
    handler = type("BoundHandler", (_Handler,), {"session": session})
    server = ThreadingHTTPServer((host, port), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server
