from __future__ import annotations

import http.server
import json
import threading

import pytest

from atelier.errors import (
    BackendUnavailable,
    DisallowedTool,
    FixtureParseError,
    ScriptExhausted,
    ScriptMismatch,
    UnparseableAction,
)
from atelier.model import (
    CallLog,
    ModelRequest,
    ModelResponse,
    ToolCall,
    WireBackend,
    complete,
    load_script,
    parse_actions,
)


def req(role: str, last_turn: str = "hello") -> ModelRequest:
    return ModelRequest(agent_role=role, system="sys", transcript=[("user", last_turn)])


def fixture(entries, strict=False) -> bytes:
    return json.dumps({"strict": strict, "entries": entries}).encode()


APPROVE_ENTRY = {
    "match": {"agent_role": "Reviewer"},
    "respond": {"text": "APPROVE", "tool_calls": [], "finish": "stop"},
}


def test_scripted_lookup_returns_entry_verbatim():
    backend = load_script(fixture([APPROVE_ENTRY]))
    resp = complete(backend, req("Reviewer"))
    assert resp.text == "APPROVE"
    assert resp.finish == "stop"
    assert resp.tool_calls == []


def test_strict_backend_rejects_unmatched_role():
    backend = load_script(fixture([APPROVE_ENTRY], strict=True))
    with pytest.raises(ScriptMismatch):
        complete(backend, req("CodingAgent"))


def test_strict_backend_reports_exhaustion():
    backend = load_script(fixture([APPROVE_ENTRY], strict=True))
    complete(backend, req("Reviewer"))
    with pytest.raises(ScriptExhausted):
        complete(backend, req("Reviewer"))


def test_lax_backend_answers_wait_when_empty():
    backend = load_script(fixture([]))
    for _ in range(3):
        resp = complete(backend, req("Reviewer"))
        assert resp.text == "" and resp.finish == "stop"


def test_substring_match_selects_entry():
    entries = [
        {
            "match": {"agent_role": "WorkstreamCoordinator", "substring": "ws2"},
            "respond": {"text": "for ws2", "tool_calls": [], "finish": "stop"},
        },
        {
            "match": {"agent_role": "WorkstreamCoordinator", "substring": "ws1"},
            "respond": {"text": "for ws1", "tool_calls": [], "finish": "stop"},
        },
    ]
    backend = load_script(fixture(entries))
    assert complete(backend, req("WorkstreamCoordinator", "context ws1")).text == "for ws1"
    assert complete(backend, req("WorkstreamCoordinator", "context ws2")).text == "for ws2"


def test_fixture_determinism_replay():
    doc = fixture(
        [
            APPROVE_ENTRY,
            {
                "match": {"agent_role": "Reviewer"},
                "respond": {"text": "REJECT", "tool_calls": [], "finish": "stop"},
            },
        ]
    )
    runs = []
    for _ in range(2):
        backend = load_script(doc)
        runs.append(
            json.dumps([complete(backend, req("Reviewer")).to_dict() for _ in range(2)])
        )
    assert runs[0] == runs[1]


def test_malformed_fixture_names_entry_index():
    bad = fixture([APPROVE_ENTRY, {"respond": {"text": "x"}}])
    with pytest.raises(FixtureParseError, match="entry 1"):
        load_script(bad)


def test_fixture_invalid_json():
    with pytest.raises(FixtureParseError):
        load_script(b"{not json")


def test_backend_cursor_round_trip():
    doc = fixture([APPROVE_ENTRY, APPROVE_ENTRY], strict=True)
    backend = load_script(doc)
    complete(backend, req("Reviewer"))
    resumed = load_script(doc)
    resumed.restore(backend.state())
    complete(resumed, req("Reviewer"))
    # both entries now consumed across the save/restore boundary
    with pytest.raises(ScriptExhausted):
        complete(resumed, req("Reviewer"))


class _FlakyHandler(http.server.BaseHTTPRequestHandler):
    failures_left = 2
    requests_seen = 0

    def do_POST(self):
        type(self).requests_seen += 1
        length = int(self.headers.get("Content-Length", 0))
        self.rfile.read(length)
        if type(self).failures_left > 0:
            type(self).failures_left -= 1
            self.send_response(503)
            self.end_headers()
            return
        body = json.dumps({"text": "recovered", "tool_calls": [], "finish": "stop"}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


def test_wire_backend_retries_transient_failures():
    _FlakyHandler.failures_left = 2
    _FlakyHandler.requests_seen = 0
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _FlakyHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        backend = WireBackend(
            endpoint=f"http://127.0.0.1:{server.server_port}/complete",
            max_retries=3,
            backoff_base=0.01,
        )
        resp = complete(backend, req("ProjectCoordinator"))
        assert resp.text == "recovered"
        assert backend.last_attempts == 3  # two 503s then success
        assert _FlakyHandler.requests_seen == 3
    finally:
        server.shutdown()


def test_wire_backend_exhausts_retries():
    _FlakyHandler.failures_left = 99
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _FlakyHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        backend = WireBackend(
            endpoint=f"http://127.0.0.1:{server.server_port}/complete",
            max_retries=2,
            backoff_base=0.01,
        )
        with pytest.raises(BackendUnavailable):
            complete(backend, req("ProjectCoordinator"))
    finally:
        server.shutdown()


def test_wire_backend_requires_endpoint(monkeypatch):
    monkeypatch.delenv("MODEL_ENDPOINT", raising=False)
    with pytest.raises(BackendUnavailable):
        WireBackend()


# --- parse_actions -------------------------------------------------------


ALL_TOOLS = {
    "search_literature",
    "fetch_document",
    "execute_code",
    "update_report",
    "send_message",
    "submit_for_review",
    "mark_complete",
    "escalate",
    "spawn_sub_agent",
}


def test_tool_call_maps_to_call_tool_action():
    resp = ModelResponse(
        tool_calls=[ToolCall("search_literature", {"query": "moving sofa"})],
        finish="tool_call",
    )
    actions = parse_actions(resp, ALL_TOOLS)
    assert len(actions) == 1
    assert actions[0].kind == "CallTool"
    assert actions[0].payload == {"name": "search_literature", "args": {"query": "moving sofa"}}


def test_disallowed_tool_rejected():
    resp = ModelResponse(tool_calls=[ToolCall("execute_code", {})], finish="tool_call")
    with pytest.raises(DisallowedTool):
        parse_actions(resp, {"search_literature"})


def test_refusal_yields_no_actions():
    resp = ModelResponse(text="cannot comply", finish="refusal")
    assert parse_actions(resp, ALL_TOOLS) == []


def test_plain_text_maps_to_role_message():
    resp = ModelResponse(text="APPROVE", finish="stop")
    (action,) = parse_actions(resp, ALL_TOOLS, role="Reviewer")
    assert action.kind == "SendMessage"
    assert action.payload["kind"] == "ReviewVerdict"
    assert action.payload["body"] == "APPROVE"

    (chat,) = parse_actions(ModelResponse(text="hi", finish="stop"), ALL_TOOLS,
                            role="ProjectCoordinator")
    assert chat.payload["kind"] == "UserChat"
    assert chat.payload["recipient"] == "user"


def test_empty_text_maps_to_wait():
    (action,) = parse_actions(ModelResponse(text="", finish="stop"), ALL_TOOLS)
    assert action.kind == "Wait"


def test_fenced_action_block_fallback():
    text = 'before\n```action\n{"tool": "submit_for_review", "args": {}}\n```\nafter'
    (action,) = parse_actions(ModelResponse(text=text, finish="stop"), ALL_TOOLS)
    assert action.kind == "SubmitForReview"


def test_bad_fenced_block_is_unparseable():
    text = '```action\n{"tool": }\n```'
    with pytest.raises(UnparseableAction):
        parse_actions(ModelResponse(text=text, finish="stop"), ALL_TOOLS)


def test_update_report_requires_an_operation():
    resp = ModelResponse(tool_calls=[ToolCall("update_report", {"bogus": 1})], finish="tool_call")
    with pytest.raises(UnparseableAction):
        parse_actions(resp, ALL_TOOLS)


def test_response_invariant_tool_calls_iff_finish():
    with pytest.raises(ValueError):
        ModelResponse(text="x", tool_calls=[ToolCall("a", {})], finish="stop")
    with pytest.raises(ValueError):
        ModelResponse(text="x", tool_calls=[], finish="tool_call")


def test_call_log_records_and_flushes(tmp_path):
    from atelier.workspace import Workspace

    log = CallLog()
    r = req("Reviewer")
    resp = ModelResponse(text="APPROVE")
    cid = log.record("ws1-rev1", r, resp, at=4)
    assert cid == "c1"
    store = Workspace(tmp_path, project_id="p")
    assert log.flush(store)
    line = json.loads(store.read_file("model/calls.jsonl").decode().splitlines()[0])
    assert line["id"] == "c1"
    assert line["agent_id"] == "ws1-rev1"
    assert line["response"]["text"] == "APPROVE"


def test_wire_calls_hit_the_workspace_log_before_returning(tmp_path):
    from atelier.workspace import Workspace

    store = Workspace(tmp_path, project_id="p")
    log = CallLog()
    log.immediate_sink = store
    log.record("pc", req("ProjectCoordinator"), ModelResponse(text="x"), wire=True)
    # durable immediately, no explicit flush needed
    assert store.exists("model/calls.jsonl")
    assert b'"agent_id": "pc"' in store.read_file("model/calls.jsonl")
    # scripted calls stay batched
    log.record("pc", req("ProjectCoordinator"), ModelResponse(text="y"), wire=False)
    assert len(store.read_file("model/calls.jsonl").decode().splitlines()) == 1
