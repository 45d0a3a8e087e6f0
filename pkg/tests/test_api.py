from __future__ import annotations

import json

import httpx
import pytest

from atelier.api import (
    ApiConfig,
    ProjectHub,
    build_parser,
    cli_main,
    encode_event,
    parse_backend_spec,
    parse_duration,
    serve,
)
from atelier.errors import BindFailure, ConfigError

from .s1 import FIXTURES, S1_FIXTURE, S1_TOOLFIX


def scripted_config(tmp_path, **overrides) -> ApiConfig:
    defaults = dict(
        host="127.0.0.1", port=0, backend_kind="scripted",
        fixture_path=str(S1_FIXTURE), data_dir=str(tmp_path / "data"),
        tool_fixture=str(S1_TOOLFIX),
    )
    defaults.update(overrides)
    return ApiConfig(**defaults)


def test_encode_event_exact_frame():
    event = {"event_id": 7, "kind": "chat_message", "payload": {"text": "hi"}, "at": 3}
    frame = encode_event(event)
    assert frame.startswith(b"id: 7\nevent: chat_message\ndata: ")
    assert frame.endswith(b"\n\n")
    data_line = frame.decode().split("\n")[2]
    assert json.loads(data_line[len("data: "):]) == event
    assert b"\n" not in frame[frame.index(b"data: "):-2]  # single-line JSON


def test_encode_event_deterministic():
    event = {"event_id": 1, "kind": "alert", "payload": {"b": 2, "a": 1}, "at": 9}
    assert encode_event(event) == encode_event(dict(reversed(list(event.items()))))


def test_serve_health_and_shutdown(tmp_path):
    handle = serve(scripted_config(tmp_path))
    try:
        r = httpx.get(f"{handle.base_url}/healthz", timeout=5)
        assert r.status_code == 200
        assert r.json()["status"] == "ok"
    finally:
        handle.stop()


def test_two_serves_on_one_port_fail(tmp_path):
    first = serve(scripted_config(tmp_path))
    try:
        with pytest.raises(BindFailure):
            serve(scripted_config(tmp_path, port=first.port))
    finally:
        first.stop()


def test_unknown_project_404(tmp_path):
    handle = serve(scripted_config(tmp_path))
    try:
        r = httpx.get(f"{handle.base_url}/v1/projects/p9", timeout=5)
        assert r.status_code == 404
        r = httpx.get(f"{handle.base_url}/v1/workstreams/ws9", timeout=5)
        assert r.status_code == 404
    finally:
        handle.stop()


def test_bearer_token_gate(tmp_path, monkeypatch):
    monkeypatch.setenv("API_TOKEN", "sesame")
    handle = serve(scripted_config(tmp_path))
    try:
        url = f"{handle.base_url}/v1/projects/p1"
        assert httpx.get(url, timeout=5).status_code == 401
        r = httpx.get(url, headers={"Authorization": "Bearer sesame"}, timeout=5)
        assert r.status_code in (200, 404)  # authorized (project may not exist)
        # health stays open for probes
        assert httpx.get(f"{handle.base_url}/healthz", timeout=5).status_code == 200
    finally:
        handle.stop()


def test_no_route_mutates_workstream_status_directly(tmp_path):
    handle = serve(scripted_config(tmp_path))
    try:
        client = httpx.Client(base_url=handle.base_url, timeout=5)
        r = client.post("/v1/projects", json={"brief": "gate probe"})
        assert r.status_code == 200
        # there is no status-mutating route; posting to the read route 405s
        assert client.post("/v1/workstreams/ws1", json={"status": "Completed"}
                           ).status_code == 405
        assert client.request("PUT", "/v1/workstreams/ws1",
                              json={"status": "Completed"}).status_code == 405
    finally:
        handle.stop()


def test_goal_route_rejects_invalid_decisions(tmp_path):
    handle = serve(scripted_config(tmp_path))
    try:
        client = httpx.Client(base_url=handle.base_url, timeout=5)
        pid = client.post("/v1/projects", json={"brief": "x"}).json()["project_id"]
        r = client.post(f"/v1/projects/{pid}/goals", json={"decisions": {}})
        assert r.status_code == 409  # nothing proposed yet
    finally:
        handle.stop()


# --- config -----------------------------------------------------------------


def test_config_requires_exactly_one_backend():
    with pytest.raises(ConfigError):
        ApiConfig.from_dict({"backend": {"kind": "both"}})
    with pytest.raises(ConfigError):
        ApiConfig.from_dict({"backend": {"kind": "scripted"}})  # missing fixture
    cfg = ApiConfig.from_dict(
        {"backend": {"kind": "scripted", "fixture": "f.fixture.json"},
         "listen": {"port": 9999}}
    )
    assert cfg.port == 9999


def test_backend_spec_parsing():
    factory = parse_backend_spec(f"scripted:{S1_FIXTURE}")
    backend = factory()
    assert backend.entries
    with pytest.raises(ConfigError):
        parse_backend_spec("quantum:magic")


def test_duration_parsing():
    assert parse_duration("30s") == 30.0
    assert parse_duration("45m") == 2700.0
    assert parse_duration("24h") == 86400.0
    assert parse_duration("48h") == 172800.0
    assert parse_duration("1.5h") == 5400.0
    assert parse_duration("10") == 10.0
    with pytest.raises(ConfigError):
        parse_duration("soon")


# --- CLI ----------------------------------------------------------------------


def test_cli_unknown_flag_exits_2(capsys):
    assert cli_main(["bench", "--nonsense"]) == 2


def test_cli_unknown_command_exits_2(capsys):
    assert cli_main(["dance"]) == 2


def test_cli_runtime_error_exits_1(tmp_path, capsys):
    code = cli_main(["bench", "--problem", str(tmp_path / "missing.txt"),
                     "--time-limit", "5s", "--backend",
                     f"scripted:{FIXTURES / 'bench_quick.fixture.json'}",
                     "--out", str(tmp_path / "o.json")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_cli_bench_writes_answer_json(tmp_path, capsys):
    problem = tmp_path / "p.txt"
    problem.write_text("what is six times seven?")
    out = tmp_path / "answer.json"
    code = cli_main([
        "bench", "--problem", str(problem), "--time-limit", "30s",
        "--backend", f"scripted:{FIXTURES / 'bench_quick.fixture.json'}",
        "--out", str(out), "--data-dir", str(tmp_path / "bench"),
    ])
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["answer"] == "42"
    assert doc["forced"] is False
    assert doc["time_limit_seconds"] == 30.0


def test_cli_bench_documents_production_defaults():
    parser = build_parser()
    bench = next(a for a in parser._subparsers._group_actions[0].choices.values()
                 if a.prog.endswith("bench"))
    help_text = bench.format_help()
    assert "24h" in help_text and "48h" in help_text


def test_cli_inspect_summarizes_project(tmp_path, capsys):
    from .s1 import run_s1

    run_s1(tmp_path / "proj")
    code = cli_main(["inspect", str(tmp_path / "proj")])
    out = capsys.readouterr().out
    assert code == 0
    assert "project p1" in out
    assert "ws1 [Completed]" in out
    assert "ws2 [Unfinished]" in out


def test_cli_run_interactive_session(tmp_path, capsys, monkeypatch):
    import io

    brief = tmp_path / "brief.txt"
    brief.write_text("I'd like to prove some upper bounds on the moving sofa "
                     "variants; upper bounds matter.")
    monkeypatch.setattr("sys.stdin",
                        io.StringIO("Focus on both variants please.\n/approve g1\n"))
    code = cli_main([
        "run", "--brief", str(brief),
        "--backend", f"scripted:{S1_FIXTURE}",
        "--tool-fixture", str(S1_TOOLFIX),
        "--data-dir", str(tmp_path / "run"),
    ])
    out = capsys.readouterr().out
    assert code == 0
    assert "[pc]" in out  # the coordinator replied in chat
    assert "[goal g1]" in out


def test_hub_assigns_sequential_project_ids(tmp_path):
    hub = ProjectHub(scripted_config(tmp_path))
    a = hub.create_project("first brief", None)
    b = hub.create_project("second brief", None)
    assert (a.project_id, b.project_id) == ("p1", "p2")
