"""The boundary between orchestration protocol and agent intelligence.

Two backends implement the same completion interface:

* ``ScriptedBackend`` replays a checked-in fixture deterministically, so
  every protocol behavior is testable offline. Fixture files use the
  ``.fixture.json`` extension; see ``load_script`` for the schema.
* ``WireBackend`` speaks JSON-over-HTTP to a configurable endpoint
  (env: MODEL_ENDPOINT, MODEL_API_KEY, MODEL_DIALECT) and retries
  transient failures with exponential backoff.

All calls are recorded in a ``CallLog`` which mirrors to the workspace
at ``model/calls.jsonl`` so trajectories can cross-reference their model
calls.

Fixture reference
-----------------
A fixture is a JSON document::

    {"strict": false,
     "entries": [
       {"match": {"agent_role": "Reviewer", "substring": "ws1"},
        "respond": {"text": "APPROVE", "tool_calls": [], "finish": "stop"}}
     ]}

Each request is answered by the first unconsumed entry whose
``agent_role`` equals the request's role and whose ``substring`` (when
present) occurs in the last transcript turn; the entry is then consumed.
Strict fixtures raise on unmatched requests; lax fixtures answer with a
canned empty response which the agent loop treats as Wait.

Responses may also carry actions as fenced blocks in free text::

    ```action
    {"tool": "search_literature", "args": {"query": "..."}}
    ```
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Optional, Protocol

from .actions import Action, action_from_tool_call, send_message, wait
from .errors import (
    BackendTimeout,
    BackendUnavailable,
    DisallowedTool,
    FixtureParseError,
    ScriptExhausted,
    ScriptMismatch,
    UnparseableAction,
)

CALL_LOG_PATH = "model/calls.jsonl"

FINISH_REASONS = ("stop", "tool_call", "length", "refusal")

_ACTION_BLOCK = re.compile(r"```action\s+(.*?)```", re.DOTALL)


@dataclass
class ToolCall:
    name: str
    args: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "args": self.args}


@dataclass
class ModelRequest:
    agent_role: str
    system: str
    transcript: list[tuple[str, str]]  # (speaker tag, text)
    tool_schemas: list[dict] = field(default_factory=list)
    max_output_tokens: int = 2048
    seed: Optional[int] = None

    def last_turn_text(self) -> str:
        return self.transcript[-1][1] if self.transcript else ""

    def to_dict(self) -> dict:
        return {
            "agent_role": self.agent_role,
            "system": self.system,
            "transcript": [[s, t] for s, t in self.transcript],
            "tool_schemas": self.tool_schemas,
            "max_output_tokens": self.max_output_tokens,
            "seed": self.seed,
        }


@dataclass
class ModelResponse:
    text: str = ""
    tool_calls: list[ToolCall] = field(default_factory=list)
    finish: str = "stop"

    def __post_init__(self):
        if self.finish not in FINISH_REASONS:
            raise ValueError(f"bad finish reason: {self.finish}")
        if (self.finish == "tool_call") != bool(self.tool_calls):
            raise ValueError("tool_calls must be non-empty iff finish == 'tool_call'")

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "tool_calls": [c.to_dict() for c in self.tool_calls],
            "finish": self.finish,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelResponse":
        calls = [ToolCall(c["name"], dict(c.get("args", {}))) for c in d.get("tool_calls", [])]
        return cls(text=d.get("text", ""), tool_calls=calls, finish=d.get("finish", "stop"))


class Backend(Protocol):
    def complete(self, request: ModelRequest) -> ModelResponse: ...


def complete(backend: Backend, request: ModelRequest) -> ModelResponse:
    """Uniform completion entry point over any backend."""
    return backend.complete(request)


# --------------------------------------------------------------------------
# scripted backend


@dataclass
class ScriptEntry:
    agent_role: str
    substring: Optional[str]
    respond: ModelResponse
    consumed: bool = False

    def matches(self, request: ModelRequest) -> bool:
        if self.agent_role != request.agent_role:
            return False
        if self.substring is not None and self.substring not in request.last_turn_text():
            return False
        return True


class ScriptedBackend:
    """Deterministic fixture replay.

    Entry consumption is serialized, so concurrent callers still observe a
    single global consumption order.
    """

    def __init__(self, entries: list[ScriptEntry], strict: bool = False):
        self.entries = entries
        self.strict = strict
        self._lock = threading.Lock()

    def complete(self, request: ModelRequest) -> ModelResponse:
        with self._lock:
            role_seen = False
            for entry in self.entries:
                if entry.agent_role == request.agent_role:
                    role_seen = True
                if entry.consumed:
                    continue
                if entry.matches(request):
                    entry.consumed = True
                    return entry.respond
            if self.strict:
                if role_seen:
                    raise ScriptExhausted(
                        f"no unconsumed entry for role {request.agent_role!r}"
                    )
                raise ScriptMismatch(f"no entry matches role {request.agent_role!r}")
            return ModelResponse(text="", tool_calls=[], finish="stop")

    # consumption cursor, persisted across restarts for resumable runs
    def state(self) -> dict:
        with self._lock:
            return {"consumed": [i for i, e in enumerate(self.entries) if e.consumed]}

    def restore(self, state: dict) -> None:
        with self._lock:
            for i in state.get("consumed", []):
                if 0 <= i < len(self.entries):
                    self.entries[i].consumed = True


def load_script(fixture_bytes: bytes | str | dict) -> ScriptedBackend:
    """Parse a ``.fixture.json`` document into a scripted backend."""
    if isinstance(fixture_bytes, (bytes, str)):
        try:
            doc = json.loads(fixture_bytes)
        except json.JSONDecodeError as e:
            raise FixtureParseError(f"fixture is not valid JSON: {e}") from e
    else:
        doc = fixture_bytes
    if not isinstance(doc, dict) or not isinstance(doc.get("entries", []), list):
        raise FixtureParseError("fixture must be an object with an 'entries' list")
    entries: list[ScriptEntry] = []
    for i, raw in enumerate(doc.get("entries", [])):
        try:
            match = raw["match"]
            respond = ModelResponse.from_dict(raw["respond"])
            entries.append(
                ScriptEntry(
                    agent_role=match["agent_role"],
                    substring=match.get("substring"),
                    respond=respond,
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FixtureParseError(f"entry {i}: {e}") from e
    return ScriptedBackend(entries, strict=bool(doc.get("strict", False)))


def load_script_file(path: str) -> ScriptedBackend:
    with open(path, "rb") as f:
        return load_script(f.read())


# --------------------------------------------------------------------------
# wire backend


class WireBackend:
    """JSON-over-HTTP completion client with retry/backoff.

    Dialects adapt the request body shape; "plain" sends the request
    fields verbatim, "openai" wraps the transcript into chat messages.
    """

    RETRYABLE_STATUS = {429, 500, 502, 503, 504}
    is_wire = True

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        dialect: str | None = None,
        max_retries: int = 3,
        backoff_base: float = 0.2,
        timeout: float = 60.0,
    ):
        self.endpoint = endpoint or os.environ.get("MODEL_ENDPOINT", "")
        self.api_key = api_key if api_key is not None else os.environ.get("MODEL_API_KEY", "")
        self.dialect = dialect or os.environ.get("MODEL_DIALECT", "plain")
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.timeout = timeout
        self.last_attempts = 0
        if not self.endpoint:
            raise BackendUnavailable("no endpoint configured (set MODEL_ENDPOINT)")

    def _body(self, request: ModelRequest) -> dict:
        if self.dialect == "openai":
            messages = [{"role": "system", "content": request.system}]
            for speaker, text in request.transcript:
                role = "assistant" if speaker == "assistant" else "user"
                messages.append({"role": role, "content": f"{speaker}: {text}"})
            return {
                "messages": messages,
                "tools": request.tool_schemas,
                "max_tokens": request.max_output_tokens,
                "seed": request.seed,
                "temperature": 0,
            }
        return dict(request.to_dict(), temperature=0)

    def _parse(self, payload: dict) -> ModelResponse:
        if self.dialect == "openai":
            choice = payload["choices"][0]
            msg = choice.get("message", {})
            calls = [
                ToolCall(c["function"]["name"], json.loads(c["function"].get("arguments", "{}")))
                for c in msg.get("tool_calls", []) or []
            ]
            finish = "tool_call" if calls else {
                "stop": "stop",
                "length": "length",
                "content_filter": "refusal",
            }.get(choice.get("finish_reason", "stop"), "stop")
            return ModelResponse(text=msg.get("content") or "", tool_calls=calls, finish=finish)
        return ModelResponse.from_dict(payload)

    def complete(self, request: ModelRequest) -> ModelResponse:
        import httpx

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = self._body(request)
        last_error: Exception | None = None
        self.last_attempts = 0
        for attempt in range(self.max_retries + 1):
            self.last_attempts = attempt + 1
            if attempt:
                time.sleep(self.backoff_base * (2 ** (attempt - 1)))
            try:
                resp = httpx.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
            except httpx.TimeoutException as e:
                last_error = BackendTimeout(str(e))
                continue
            except httpx.HTTPError as e:
                last_error = e
                continue
            if resp.status_code in self.RETRYABLE_STATUS:
                last_error = BackendUnavailable(f"status {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise BackendUnavailable(f"status {resp.status_code}: {resp.text[:200]}")
            return self._parse(resp.json())
        if isinstance(last_error, BackendTimeout):
            raise last_error
        raise BackendUnavailable(f"retries exhausted: {last_error}")


# --------------------------------------------------------------------------
# call log


class CallLog:
    """Ordered record of every request/response pair, any backend.

    The pair is appended before the response is handed back to the caller.
    Scripted calls are mirrored to the workspace in per-tick batches;
    wire calls are flushed durably at record time (set ``immediate_sink``)
    so a crash can never lose a paid-for exchange.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: list[dict] = []
        self._flushed = 0
        self.immediate_sink = None  # workspace for synchronous wire flushing

    def record(self, agent_id: str, request: ModelRequest, response: ModelResponse,
               attempts: int = 1, at: int = 0, wire: bool = False) -> str:
        with self._lock:
            call_id = f"c{len(self._entries) + 1}"
            self._entries.append(
                {
                    "id": call_id,
                    "agent_id": agent_id,
                    "at": at,
                    "attempts": attempts,
                    "request": request.to_dict(),
                    "response": response.to_dict(),
                }
            )
        if wire and self.immediate_sink is not None:
            self.flush(self.immediate_sink)
        return call_id

    def ids(self) -> set[str]:
        with self._lock:
            return {e["id"] for e in self._entries}

    @property
    def entries(self) -> list[dict]:
        with self._lock:
            return list(self._entries)

    def flush(self, workspace, author: str = "model") -> bool:
        with self._lock:
            if len(self._entries) == self._flushed:
                return False
            payload = "\n".join(json.dumps(e, sort_keys=True) for e in self._entries) + "\n"
            self._flushed = len(self._entries)
        workspace.write_file(CALL_LOG_PATH, payload.encode("utf-8"), author=author)
        return True

    def to_dict(self) -> dict:
        with self._lock:
            return {"entries": list(self._entries), "flushed": self._flushed}

    @classmethod
    def from_dict(cls, d: dict) -> "CallLog":
        log = cls()
        log._entries = list(d.get("entries", []))
        log._flushed = int(d.get("flushed", 0))
        return log


# --------------------------------------------------------------------------
# action parsing


def _text_fallback_action(text: str, role: str) -> Action:
    """Map a plain-text reply onto the role's default outgoing message."""
    if role == "ProjectCoordinator":
        return send_message("user", "UserChat", text)
    if role == "Reviewer":
        return send_message("__parent__", "ReviewVerdict", text)
    return send_message("__parent__", "StatusUpdate", text)


def parse_actions(
    response: ModelResponse, allowed_tools: set[str], role: str = ""
) -> list[Action]:
    """Turn a model response into validated actions.

    Tool calls are the primary channel; fenced ``action`` blocks in free
    text are the fallback. Disallowed tool names are rejected outright;
    a refusal yields no actions (the agent loop records the advisory).
    Never returns an action whose tool is outside ``allowed_tools``.
    """
    if response.finish == "refusal":
        return []

    actions: list[Action] = []
    for call in response.tool_calls:
        if call.name not in allowed_tools:
            raise DisallowedTool(call.name)
        actions.append(action_from_tool_call(call.name, call.args))

    if response.finish != "tool_call":
        blocks = _ACTION_BLOCK.findall(response.text or "")
        for raw in blocks:
            try:
                doc = json.loads(raw)
                name = doc["tool"]
            except (json.JSONDecodeError, TypeError, KeyError) as e:
                raise UnparseableAction(f"bad action block: {e}") from e
            if name not in allowed_tools:
                raise DisallowedTool(name)
            actions.append(action_from_tool_call(name, doc.get("args", {})))
        if not blocks:
            text = (response.text or "").strip()
            if text:
                actions.append(_text_fallback_action(text, role))
            else:
                actions.append(wait())

    return actions
