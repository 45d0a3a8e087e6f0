"""HTTP + server-push boundary and the command-line entry points.

Routes (all JSON unless noted)::

    GET  /healthz
    POST /v1/projects {brief, attachments?}        -> {project_id}
    GET  /v1/projects/{id}
    POST /v1/projects/{id}/chat {text, attachments?} -> {message_id}
    POST /v1/projects/{id}/goals {decisions}
    POST /v1/projects/{id}/tick {budget?}
    GET  /v1/projects/{id}/events?after=N          (SSE stream)
    GET  /v1/projects/{id}/files/{path}?version=N
    GET  /v1/projects/{id}/workstreams
    GET  /v1/workstreams/{id}
    GET  /v1/workstreams/{id}/report?format=structured|markdown|latex
    GET  /v1/workstreams/{id}/trajectory
    GET  /v1/workstreams/{id}/review

Mutating routes go through the engine's serialized action processor, so
nothing reachable over HTTP can bypass its gates (there is no route that
sets a workstream status directly). Authentication is a single bearer
token from the API_TOKEN env var; when unset the server is local-only.

Event frames are exactly::

    id: <event_id>\nevent: <kind>\ndata: <single-line JSON>\n\n

so a client resuming with ``after=<last id>`` (or Last-Event-ID) sees
every later event exactly once.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import re
import socket
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.responses import StreamingResponse

from .engine import Engine, EngineConfig, run_final_answer_mode
from .errors import AtelierError, BindFailure, ConfigError, NotFound
from .model import WireBackend, load_script_file
from .tools import FixtureToolProvider, LiveFetchProvider, SandboxPool, default_runtimes

EVENT_POLL_SECONDS = 0.05


def encode_event(event: dict) -> bytes:
    """One SSE frame; data is single-line canonical JSON."""
    data = json.dumps(event, sort_keys=True, separators=(",", ":"))
    return f"id: {event['event_id']}\nevent: {event['kind']}\ndata: {data}\n\n".encode()


# --------------------------------------------------------------------------
# configuration


@dataclass
class ApiConfig:
    host: str = "127.0.0.1"
    port: int = 8040
    backend_kind: str = "scripted"  # scripted | wire
    fixture_path: Optional[str] = None
    endpoint: Optional[str] = None
    dialect: Optional[str] = None
    data_dir: str = "./atelier-data"
    tool_fixture: Optional[str] = None
    fetch_allowlist: list[str] = field(default_factory=list)
    sandbox_max_concurrency: int = 4
    sandbox_runtimes: dict[str, list[str]] = field(default_factory=default_runtimes)
    n_reviewers: int = 3
    max_rounds: int = 5
    cors_origins: list[str] = field(default_factory=list)
    auto_tick: Optional[float] = None  # seconds between background ticks

    @classmethod
    def from_dict(cls, doc: dict) -> "ApiConfig":
        listen = doc.get("listen", {})
        backend = doc.get("backend", {})
        kind = backend.get("kind")
        if kind not in ("scripted", "wire"):
            raise ConfigError("config.backend.kind must be 'scripted' or 'wire'")
        if kind == "scripted" and not backend.get("fixture"):
            raise ConfigError("scripted backend requires backend.fixture")
        sandbox = doc.get("sandbox", {})
        review = doc.get("review", {})
        return cls(
            host=listen.get("host", "127.0.0.1"),
            port=int(listen.get("port", 8040)),
            backend_kind=kind,
            fixture_path=backend.get("fixture"),
            endpoint=backend.get("endpoint"),
            dialect=backend.get("dialect"),
            data_dir=doc.get("data_dir", "./atelier-data"),
            tool_fixture=doc.get("tools", {}).get("fixture"),
            fetch_allowlist=doc.get("fetch", {}).get("allowlist", []),
            sandbox_max_concurrency=int(sandbox.get("max_concurrency", 4)),
            sandbox_runtimes=sandbox.get("runtimes", default_runtimes()),
            n_reviewers=int(review.get("n_reviewers", 3)),
            max_rounds=int(review.get("max_rounds", 5)),
            cors_origins=doc.get("cors_origins", []),
            auto_tick=doc.get("auto_tick"),
        )

    @classmethod
    def from_file(cls, path: str) -> "ApiConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e

    def make_backend(self):
        """Fresh backend per project (scripted cursors are per-project)."""
        if self.backend_kind == "scripted":
            return load_script_file(self.fixture_path)
        return WireBackend(endpoint=self.endpoint, dialect=self.dialect)

    def make_provider(self):
        if self.tool_fixture:
            return FixtureToolProvider.from_file(self.tool_fixture)
        if self.fetch_allowlist:
            return LiveFetchProvider(self.fetch_allowlist)
        return None

    def make_engine_config(self) -> EngineConfig:
        return EngineConfig(n_reviewers=self.n_reviewers, max_rounds=self.max_rounds)


def parse_backend_spec(spec: str):
    """CLI backend spec: "scripted:<fixture path>" or "wire[:<endpoint>]"."""
    if spec.startswith("scripted:"):
        return lambda: load_script_file(spec.split(":", 1)[1])
    if spec == "wire" or spec.startswith("wire:"):
        endpoint = spec.split(":", 1)[1] if ":" in spec else None
        return lambda: WireBackend(endpoint=endpoint)
    raise ConfigError(f"unknown backend spec: {spec!r}")


_DURATION = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(ms|s|m|h|d)?\s*$")


def parse_duration(text: str) -> float:
    """"30s", "45m", "24h", "1.5h", or bare seconds."""
    m = _DURATION.match(text)
    if not m:
        raise ConfigError(f"cannot parse duration: {text!r}")
    value = float(m.group(1))
    unit = m.group(2) or "s"
    return value * {"ms": 0.001, "s": 1.0, "m": 60.0, "h": 3600.0, "d": 86400.0}[unit]


# --------------------------------------------------------------------------
# application


class ProjectHub:
    """Holds one engine per project and serializes mutations."""

    def __init__(self, config: ApiConfig):
        self.config = config
        self.engines: dict[str, Engine] = {}
        self._lock = threading.RLock()
        self._next_project = 0

    def create_project(self, brief: str, attachments: list[dict] | None) -> Engine:
        with self._lock:
            self._next_project += 1
            project_id = f"p{self._next_project}"
            engine = Engine(
                Path(self.config.data_dir) / project_id,
                project_id=project_id,
                backend=self.config.make_backend(),
                provider=self.config.make_provider(),
                sandbox=SandboxPool(
                    runtimes=dict(self.config.sandbox_runtimes),
                    max_concurrency=self.config.sandbox_max_concurrency,
                ),
                config=self.config.make_engine_config(),
            )
            engine.start_project(brief, attachments)
            self.engines[project_id] = engine
            return engine

    def engine(self, project_id: str) -> Engine:
        try:
            return self.engines[project_id]
        except KeyError:
            raise NotFound(f"unknown project: {project_id}") from None

    def find_workstream(self, ws_id: str) -> tuple[Engine, str]:
        with self._lock:
            for engine in self.engines.values():
                if ws_id in engine.workstreams:
                    return engine, ws_id
        raise NotFound(f"unknown workstream: {ws_id}")

    def tick_all(self) -> None:
        with self._lock:
            engines = list(self.engines.values())
        for engine in engines:
            with self._lock:
                engine.tick()

    def save_all(self) -> None:
        with self._lock:
            for engine in self.engines.values():
                engine.save()


def create_app(config: ApiConfig, hub: ProjectHub | None = None) -> FastAPI:
    import os

    hub = hub or ProjectHub(config)
    app = FastAPI(title="atelier", version="0.1.0")
    app.state.hub = hub
    token = os.environ.get("API_TOKEN", "")

    if config.cors_origins:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(
            CORSMiddleware,
            allow_origins=config.cors_origins,
            allow_methods=["*"],
            allow_headers=["*"],
        )

    @app.middleware("http")
    async def check_token(request: Request, call_next):
        if token and request.url.path.startswith("/v1"):
            got = request.headers.get("authorization", "")
            if got != f"Bearer {token}":
                return Response(status_code=401, content="unauthorized")
        return await call_next(request)

    def guard(fn):
        try:
            return fn()
        except NotFound as e:
            raise HTTPException(status_code=404, detail=str(e))
        except KeyError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except AtelierError as e:
            raise HTTPException(status_code=409, detail=f"{type(e).__name__}: {e}")
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "projects": len(hub.engines)}

    @app.post("/v1/projects")
    async def create_project(body: dict):
        def run():
            engine = hub.create_project(body.get("brief", ""),
                                        body.get("attachments"))
            return {"project_id": engine.project_id}

        return guard(run)

    @app.get("/v1/projects/{project_id}")
    def get_project(project_id: str):
        return guard(lambda: hub.engine(project_id).project_summary())

    @app.post("/v1/projects/{project_id}/chat")
    async def post_chat(project_id: str, body: dict):
        def run():
            engine = hub.engine(project_id)
            mid = engine.handle_user_message(body.get("text", ""),
                                             body.get("attachments"))
            return {"message_id": mid}

        return guard(run)

    @app.post("/v1/projects/{project_id}/goals")
    async def post_goals(project_id: str, body: dict):
        def run():
            engine = hub.engine(project_id)
            engine.approve_goals(body.get("decisions", {}))
            return engine.project_summary()

        return guard(run)

    @app.post("/v1/projects/{project_id}/tick")
    async def post_tick(project_id: str, body: dict | None = None):
        def run():
            engine = hub.engine(project_id)
            return engine.tick((body or {}).get("budget"))

        return guard(run)

    @app.get("/v1/projects/{project_id}/workstreams")
    def get_workstreams(project_id: str):
        def run():
            engine = hub.engine(project_id)
            return [engine.workstream_summary(w)
                    for w in engine.project.workstream_order]

        return guard(run)

    @app.get("/v1/projects/{project_id}/files/{path:path}")
    def get_file(project_id: str, path: str, version: int | None = None):
        def run():
            engine = hub.engine(project_id)
            data = engine.workspace.read_file(path, version)
            media = "application/json" if path.endswith(".json") else "text/plain"
            return Response(content=data, media_type=media)

        return guard(run)

    @app.get("/v1/projects/{project_id}/events")
    async def get_events(project_id: str, request: Request, after: int = 0):
        engine = guard(lambda: hub.engine(project_id))
        last_header = request.headers.get("last-event-id")
        cursor = max(after, int(last_header)) if last_header else after

        async def stream():
            seen = cursor
            while True:
                if await request.is_disconnected():
                    return
                for event in engine.events_after(seen):
                    seen = event["event_id"]
                    yield encode_event(event)
                await asyncio.sleep(EVENT_POLL_SECONDS)

        return StreamingResponse(stream(), media_type="text/event-stream",
                                 headers={"Cache-Control": "no-cache"})

    @app.get("/v1/workstreams/{ws_id}")
    def get_workstream(ws_id: str):
        def run():
            engine, ws = hub.find_workstream(ws_id)
            return engine.workstream_summary(ws)

        return guard(run)

    @app.get("/v1/workstreams/{ws_id}/report")
    def get_report(ws_id: str, format: str = "structured"):
        from . import report as report_mod

        def run():
            engine, ws = hub.find_workstream(ws_id)
            report = report_mod.ReportStore(engine.workspace).load(ws)
            data = report_mod.render(report, format)
            media = {
                "structured": "application/json",
                "markdown": "text/markdown; charset=utf-8",
                "latex": "application/x-latex",
            }[format]
            return Response(content=data, media_type=media)

        return guard(run)

    @app.get("/v1/workstreams/{ws_id}/trajectory")
    def get_trajectory(ws_id: str):
        def run():
            engine, ws = hub.find_workstream(ws_id)
            coordinator = engine.workstreams[ws].coordinator
            return engine.trajectory(coordinator)

        return guard(run)

    @app.get("/v1/workstreams/{ws_id}/review")
    def get_review(ws_id: str):
        def run():
            engine, ws = hub.find_workstream(ws_id)
            return engine.review_summary(ws)

        return guard(run)

    return app


# --------------------------------------------------------------------------
# server lifecycle


class ServerHandle:
    def __init__(self, server, thread, hub: ProjectHub, host: str, port: int):
        self._server = server
        self._thread = thread
        self.hub = hub
        self.host = host
        self.port = port

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def stop(self) -> None:
        """Graceful shutdown; flushes persistence first."""
        self.hub.save_all()
        self._server.should_exit = True
        self._thread.join(timeout=10)


def serve(config: ApiConfig, hub: ProjectHub | None = None) -> ServerHandle:
    """Bind, start serving in a background thread, return a handle."""
    import uvicorn

    hub = hub or ProjectHub(config)
    app = create_app(config, hub)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((config.host, config.port))
    except OSError as e:
        sock.close()
        raise BindFailure(f"{config.host}:{config.port}: {e}") from e
    sock.listen(128)
    port = sock.getsockname()[1]

    uv_config = uvicorn.Config(app, log_level="warning", lifespan="off")
    server = uvicorn.Server(uv_config)

    ticker_stop = threading.Event()

    def ticker():
        while not ticker_stop.wait(config.auto_tick):
            hub.tick_all()

    def run():
        server.run(sockets=[sock])

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10
    while not server.started:
        if not thread.is_alive():
            raise BindFailure(f"server failed to start on {config.host}:{port}")
        if time.monotonic() > deadline:
            raise BindFailure("server did not start within 10s")
        time.sleep(0.01)

    handle = ServerHandle(server, thread, hub, config.host, port)
    if config.auto_tick:
        tick_thread = threading.Thread(target=ticker, daemon=True)
        tick_thread.start()
        original_stop = handle.stop

        def stop():
            ticker_stop.set()
            original_stop()

        handle.stop = stop  # type: ignore[method-assign]
    return handle


# --------------------------------------------------------------------------
# CLI


def _cmd_serve(args) -> int:
    config = ApiConfig.from_file(args.config)
    handle = serve(config)
    print(f"serving on {handle.base_url} (data: {config.data_dir})", flush=True)
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        handle.stop()
    return 0


def _cmd_run(args) -> int:
    brief = Path(args.brief).read_text(encoding="utf-8")
    engine = Engine(
        args.data_dir,
        backend=parse_backend_spec(args.backend)(),
        provider=FixtureToolProvider.from_file(args.tool_fixture)
        if args.tool_fixture else None,
    )
    engine.start_project(brief)
    printed = {"chat": 0, "alerts": 0}

    def drain_output():
        for _ in range(50):
            if engine.tick()["steps"] == 0:
                break
        project = engine.project
        for entry in project.chat[printed["chat"]:]:
            print(f"[{entry['sender']}] {entry['text']}")
        printed["chat"] = len(project.chat)
        for alert in project.alerts[printed["alerts"]:]:
            print(f"[alert] {alert['body']}")
        printed["alerts"] = len(project.alerts)
        if project.state == "GoalsProposed":
            for g in project.goals:
                print(f"[goal {g.id}] ({g.status}) {g.text}")
            print("approve with: /approve g1 g2 ...")

    drain_output()
    print("(chat with the coordinator; /approve <goal ids>; ctrl-d to exit)")
    for line in sys.stdin:
        line = line.strip()
        if not line:
            drain_output()
            continue
        if line.startswith("/approve"):
            ids = line.split()[1:]
            engine.approve_goals({g: "approve" for g in ids})
        else:
            engine.handle_user_message(line)
        drain_output()
    engine.save()
    return 0


def _cmd_bench(args) -> int:
    problem = Path(args.problem).read_text(encoding="utf-8")
    deadline = parse_duration(args.time_limit)
    answer = run_final_answer_mode(
        problem,
        deadline,
        backend=parse_backend_spec(args.backend)(),
        data_dir=args.data_dir,
        provider=FixtureToolProvider.from_file(args.tool_fixture)
        if args.tool_fixture else None,
    )
    out = {"answer": answer.text, "forced": answer.forced,
           "produced_at": answer.produced_at, "error": answer.error,
           "time_limit_seconds": deadline}
    Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")
    print(f"final answer written to {args.out} (forced={answer.forced})")
    return 0


def _cmd_inspect(args) -> int:
    state_file = Path(args.project_dir) / "state" / "project.json"
    state = json.loads(state_file.read_text(encoding="utf-8"))
    project = state["project"]
    print(f"project {project['id']}  state={project['state']}  mode={project['mode']}")
    if project.get("research_question"):
        print(f"question: {project['research_question']}")
    for goal in project.get("goals", []):
        print(f"  goal {goal['id']} [{goal['status']}] {goal['text']}")
    for ws_id, ws in sorted(state.get("workstreams", {}).items()):
        warn = f"  !! {ws['warnings'][-1]}" if ws.get("warnings") else ""
        print(f"  {ws_id} [{ws['status']}] goal={ws['goal_id']}{warn}")
    print(f"chat messages: {len(project.get('chat', []))}  "
          f"alerts: {len(project.get('alerts', []))}  "
          f"events: {len(state.get('events', []))}")
    if project.get("final_answer"):
        fa = project["final_answer"]
        print(f"final answer (forced={fa['forced']}): {fa['text'][:200]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atelier",
        description="Stateful multi-agent research workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_serve = sub.add_parser("serve", help="run the HTTP API")
    p_serve.add_argument("--config", required=True, help="JSON config file")

    p_run = sub.add_parser("run", help="interactive project on stdin/stdout")
    p_run.add_argument("--brief", required=True, help="file with the project brief")
    p_run.add_argument("--backend", required=True,
                       help="scripted:<fixture.json> or wire[:endpoint]")
    p_run.add_argument("--data-dir", default="./atelier-data/run")
    p_run.add_argument("--tool-fixture", help=".toolfix.json for offline tools")

    p_bench = sub.add_parser(
        "bench",
        help="headless final-answer mode",
        description="Run a single problem to a final answer under a time "
                    "limit. Production setups use day-scale limits (24h "
                    "default here; 48h is common for external evaluation "
                    "runs); tests use seconds.",
    )
    p_bench.add_argument("--problem", required=True, help="file with the problem")
    p_bench.add_argument("--time-limit", default="24h",
                         help="wall-clock limit, e.g. 30s, 45m, 24h, 48h "
                              "(default: 24h)")
    p_bench.add_argument("--backend", required=True)
    p_bench.add_argument("--out", required=True, help="answer JSON output path")
    p_bench.add_argument("--data-dir", default="./atelier-data/bench")
    p_bench.add_argument("--tool-fixture")

    p_inspect = sub.add_parser("inspect", help="summarize a persisted project")
    p_inspect.add_argument("project_dir")

    return parser


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handlers = {"serve": _cmd_serve, "run": _cmd_run, "bench": _cmd_bench,
                "inspect": _cmd_inspect}
    try:
        return handlers[args.command](args)
    except (AtelierError, OSError, json.JSONDecodeError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(cli_main())
