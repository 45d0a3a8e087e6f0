"""Validated actions an agent can take, parsed from model output.

Engine-affecting verbs that are not one of the dedicated variants below
(goal proposal, workstream creation, reviewer verdicts) travel as
CallTool actions and are gated by the agent's tool allowlist like any
other tool.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import UnparseableAction

# Side-effectful capabilities from the tools module.
REAL_TOOLS = frozenset(
    {"search_literature", "fetch_document", "execute_code", "execute_parallel"}
)
# Engine verbs exposed through the tool-call channel.
PROTOCOL_TOOLS = frozenset(
    {
        "send_message",
        "update_report",
        "spawn_sub_agent",
        "submit_for_review",
        "mark_complete",
        "escalate",
        "give_final_answer",
        "propose_goals",
        "create_workstream",
        "submit_verdict",
        "wait",
    }
)
KNOWN_TOOLS = REAL_TOOLS | PROTOCOL_TOOLS


@dataclass
class Action:
    """One validated agent action.

    kind is one of: CallTool, SendMessage, UpdateReport, SpawnSubAgent,
    SubmitForReview, MarkComplete, Escalate, GiveFinalAnswer, Wait.
    """

    kind: str
    payload: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "payload": self.payload}

    @classmethod
    def from_dict(cls, d: dict) -> "Action":
        return cls(kind=d["kind"], payload=dict(d.get("payload", {})))


def call_tool(name: str, args: dict) -> Action:
    return Action("CallTool", {"name": name, "args": args})


def send_message(
    recipient: str,
    kind: str,
    body: str,
    attachments: list[str] | None = None,
) -> Action:
    return Action(
        "SendMessage",
        {
            "recipient": recipient,
            "kind": kind,
            "body": body,
            "attachments": list(attachments or []),
        },
    )


def wait() -> Action:
    return Action("Wait", {})


def _require(args: dict, keys: list[str], tool: str) -> None:
    if not isinstance(args, dict):
        raise UnparseableAction(f"{tool}: arguments must be an object")
    missing = [k for k in keys if k not in args]
    if missing:
        raise UnparseableAction(f"{tool}: missing argument(s) {missing}")


def action_from_tool_call(name: str, args: Optional[dict]) -> Action:
    """Map a named tool call onto an Action, validating its payload."""
    args = args if args is not None else {}
    if not isinstance(args, dict):
        raise UnparseableAction(f"{name}: arguments must be an object")

    if name in REAL_TOOLS:
        return call_tool(name, args)

    if name == "send_message":
        _require(args, ["recipient", "kind", "body"], name)
        return send_message(
            args["recipient"], args["kind"], args["body"], args.get("attachments")
        )
    if name == "update_report":
        ops = {"add_blocks", "edit_blocks", "delete_blocks", "annotations",
               "attachments", "references"}
        if not ops & set(args):
            raise UnparseableAction("update_report: delta has no recognized operation")
        return Action("UpdateReport", {"delta": args})
    if name == "spawn_sub_agent":
        _require(args, ["role"], name)
        return Action("SpawnSubAgent", {k: args[k] for k in args})
    if name == "submit_for_review":
        return Action("SubmitForReview", dict(args))
    if name == "mark_complete":
        return Action("MarkComplete", dict(args))
    if name == "escalate":
        _require(args, ["body"], name)
        return Action(
            "Escalate",
            {"body": args["body"], "attachments": list(args.get("attachments", []))},
        )
    if name == "give_final_answer":
        _require(args, ["text"], name)
        return Action("GiveFinalAnswer", {"text": args["text"]})
    if name == "propose_goals":
        _require(args, ["research_question", "goals"], name)
        if not isinstance(args["goals"], list):
            raise UnparseableAction("propose_goals: goals must be a list")
        return call_tool(name, args)
    if name == "create_workstream":
        _require(args, ["goal_id"], name)
        return call_tool(name, args)
    if name == "submit_verdict":
        _require(args, ["verdict"], name)
        # verdicts ride the bus as ReviewVerdict messages to the parent
        body = json.dumps({"verdict": args["verdict"],
                           "issues": args.get("issues", [])}, sort_keys=True)
        return send_message("__parent__", "ReviewVerdict", body)
    if name == "wait":
        return wait()

    raise UnparseableAction(f"unknown tool: {name}")
