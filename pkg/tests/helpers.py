"""Shared fixture-building helpers for engine-level tests."""

from __future__ import annotations

import json
from typing import Any

from atelier.engine import Engine, EngineConfig
from atelier.model import load_script
from atelier.tools import FixtureToolProvider


def entry(role: str, *, text: str | None = None, tool: str | None = None,
          args: dict | None = None, substring: str | None = None,
          tool_calls: list[dict] | None = None) -> dict:
    """One scripted fixture entry: either a text reply or tool call(s)."""
    match: dict[str, Any] = {"agent_role": role}
    if substring is not None:
        match["substring"] = substring
    if tool_calls is None and tool is not None:
        tool_calls = [{"name": tool, "args": args or {}}]
    if tool_calls:
        respond = {"text": "", "tool_calls": tool_calls, "finish": "tool_call"}
    else:
        respond = {"text": text or "", "tool_calls": [], "finish": "stop"}
    return {"match": match, "respond": respond}


def backend_from(entries: list[dict], strict: bool = False):
    return load_script(json.dumps({"strict": strict, "entries": entries}))


SEARCH_FIXTURE = {
    "search": {
        "moving sofa upper bound": [
            {"title": "Improved bounds for corner traversal", "uri": "https://example.org/bounds",
             "snippet": "An upper bound of 2.37 via discretized rotations.", "source": "fixture"},
            {"title": "Area estimates for rotating bodies", "uri": "https://example.org/area",
             "snippet": "Survey of area estimates.", "source": "fixture"},
            {"title": "Computational corner geometry", "uri": "https://example.org/geometry",
             "snippet": "Branch-and-bound over motion plans.", "source": "fixture"},
        ]
    },
    "fetch": {
        "https://example.org/bounds": {
            "content_type": "text/html",
            "text": "<html><body>Baseline bound 2.37 for both-handed corners.</body></html>",
        }
    },
}


def make_engine(tmp_path, entries: list[dict], *, strict: bool = False,
                config: EngineConfig | None = None, project_id: str = "p1") -> Engine:
    return Engine(
        tmp_path / "data",
        project_id=project_id,
        backend=backend_from(entries, strict=strict),
        provider=FixtureToolProvider(SEARCH_FIXTURE),
        config=config or EngineConfig(),
    )


def labels(engine: Engine, agent_id: str) -> list[str]:
    return [r["label"] for r in engine.trajectory(agent_id)]


def onboarding_entries() -> list[dict]:
    """Coordinator dialogue: clarify, propose three goals, present them."""
    return [
        entry("ProjectCoordinator", substring="upper bounds",
              text="Which variant do you want to focus on, and is any rigorous "
                   "upper bound enough?"),
        entry("ProjectCoordinator", substring="both variants",
              tool="propose_goals",
              args={"research_question": "Prove upper bounds for both-handed sofa variants",
                    "goals": ["Survey the literature", "Build a computational framework",
                              "Run the bounding search"]}),
        entry("ProjectCoordinator", substring="goals proposed",
              text="I have proposed goals for your approval."),
    ]


def onboard(engine: Engine) -> None:
    """Brief -> clarifying question -> user reply -> goal proposal."""
    engine.start_project("I'd like to prove some upper bounds on moving sofa variants.")
    engine.tick()
    engine.handle_user_message("Focus on both variants; any rigorous bound is fine.")
    engine.tick()
