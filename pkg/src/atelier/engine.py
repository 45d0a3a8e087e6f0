"""Project lifecycle orchestrator.

Owns the onboarding dialogue, goal approval, workstream state machine,
action processing with hard gates, user steering, durable failure, and
the headless final-answer mode. The engine is the single writer of
project state: agent steps execute their effects through its serialized
action executor, and the entire state is persisted after every tick so
a process restart resumes losslessly.

Hard gates enforced here rather than by prompting:
 * goals only become Approved through the user;
 * MarkComplete is accepted only when the workstream's review session is
   Approved and the Final report validates with zero blocking defects;
 * a stalled review marks the workstream Unfinished and surfaces exactly
   one alert to the user;
 * terminal workstreams are immutable and their files are never removed.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import report as report_mod
from .actions import Action
from .agents import (
    Agent,
    AgentRegistry,
    AgentRuntime,
    AgentSpec,
    format_message_turn,
    spec_for_role,
)
from .bus import USER, MessageBus, OrgChart
from .clock import LogicalClock
from .errors import (
    AtelierError,
    GateViolation,
    GoalNotApproved,
    MalformedProposal,
    NoGoalsApproved,
    NotUser,
    ReportNotFound,
    SpawnDenied,
)
from .model import Backend, CallLog
from .review import (
    DEFAULT_MAX_ROUNDS,
    DEFAULT_N_REVIEWERS,
    DEFAULT_STALL_WINDOW,
    ReviewSession,
    detect_stall,
    parse_verdict_body,
    persist_session,
    reject,
    review_path,
    Issue,
)
from .tools import SandboxPool, Toolbox, ToolLog
from .workspace import Workspace

logger = logging.getLogger(__name__)

WS_TRANSITIONS = frozenset(
    {
        ("Pending", "Running"),
        ("Running", "InReview"),
        ("InReview", "Running"),
        ("InReview", "Completed"),
        ("Running", "Failed"),
        ("InReview", "Unfinished"),
    }
)
TERMINAL_WS = frozenset({"Completed", "Failed", "Unfinished"})

EVENT_KINDS = frozenset(
    {"chat_message", "goal_update", "workstream_status", "report_updated",
     "alert", "final_answer"}
)

DEFAULT_PROFILES = {
    "ProjectCoordinator": (
        "You coordinate a research project for the user: act as a sounding board "
        "during onboarding, propose a research question and goals, delegate "
        "approved goals to workstreams, relay user steering, and surface "
        "roadblocks instead of hiding them."
    ),
    "WorkstreamCoordinator": (
        "You run one workstream: take a linear sequence of actions (searches, "
        "code runs, sub-agents), update the working paper after each finding, "
        "submit it for review, and only mark complete once approved."
    ),
    "Reviewer": (
        "You review a working paper for content and style. Cross-check "
        "references and code outputs before approving; reject with concrete, "
        "located issues otherwise."
    ),
    "LiteratureAgent": "You search and digest literature for your coordinator.",
    "CodingAgent": "You implement and test code for your coordinator.",
    "ProverAgent": "You produce careful proofs for your coordinator.",
}


@dataclass
class EngineConfig:
    n_reviewers: int = DEFAULT_N_REVIEWERS
    max_rounds: int = DEFAULT_MAX_ROUNDS
    stall_window: int = DEFAULT_STALL_WINDOW
    parse_failure_limit: int = 3
    context_turns: int = 20
    tick_budget: int = 16
    grace_seconds: float = 5.0
    max_output_tokens: int = 2048

    def grace_for(self, deadline_seconds: float) -> float:
        # grace scales with long deadlines but never below the default
        return max(self.grace_seconds, 0.05 * deadline_seconds)

    def to_dict(self) -> dict:
        return {
            "n_reviewers": self.n_reviewers,
            "max_rounds": self.max_rounds,
            "stall_window": self.stall_window,
            "parse_failure_limit": self.parse_failure_limit,
            "context_turns": self.context_turns,
            "tick_budget": self.tick_budget,
            "grace_seconds": self.grace_seconds,
            "max_output_tokens": self.max_output_tokens,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


@dataclass
class Goal:
    id: str
    text: str
    status: str = "Proposed"  # Proposed | Approved
    workstreams: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"id": self.id, "text": self.text, "status": self.status,
                "workstreams": list(self.workstreams)}

    @classmethod
    def from_dict(cls, d: dict) -> "Goal":
        return cls(id=d["id"], text=d["text"], status=d["status"],
                   workstreams=list(d.get("workstreams", [])))


@dataclass
class Workstream:
    id: str
    goal_id: str
    coordinator: str
    instructions: str = ""
    status: str = "Pending"
    warnings: list[str] = field(default_factory=list)
    review_session: Optional[str] = None
    summary: str = ""
    fetched_uris: list[str] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=dict)

    @property
    def report_path(self) -> str:
        return report_mod.report_path(self.id)

    def bump(self, counter: str) -> int:
        self.counters[counter] = self.counters.get(counter, 0) + 1
        return self.counters[counter]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "goal_id": self.goal_id,
            "coordinator": self.coordinator,
            "instructions": self.instructions,
            "status": self.status,
            "report_path": self.report_path,
            "warnings": list(self.warnings),
            "review_session": self.review_session,
            "summary": self.summary,
            "fetched_uris": list(self.fetched_uris),
            "counters": dict(self.counters),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Workstream":
        return cls(
            id=d["id"],
            goal_id=d["goal_id"],
            coordinator=d["coordinator"],
            instructions=d.get("instructions", ""),
            status=d["status"],
            warnings=list(d.get("warnings", [])),
            review_session=d.get("review_session"),
            summary=d.get("summary", ""),
            fetched_uris=list(d.get("fetched_uris", [])),
            counters=dict(d.get("counters", {})),
        )


@dataclass
class FinalAnswer:
    text: str
    forced: bool
    produced_at: float
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {"text": self.text, "forced": self.forced,
                "produced_at": self.produced_at, "error": self.error}

    @classmethod
    def from_dict(cls, d: dict) -> "FinalAnswer":
        return cls(text=d["text"], forced=bool(d["forced"]),
                   produced_at=float(d["produced_at"]), error=d.get("error"))


@dataclass
class Project:
    id: str
    mode: str = "interactive"  # interactive | final_answer
    state: str = "Onboarding"  # Onboarding | GoalsProposed | Active
    research_question: str = ""
    goals: list[Goal] = field(default_factory=list)
    workstream_order: list[str] = field(default_factory=list)
    chat: list[dict] = field(default_factory=list)
    alerts: list[dict] = field(default_factory=list)
    final_answer: Optional[FinalAnswer] = None
    forced_instruction_sent: bool = False

    def goal(self, goal_id: str) -> Goal:
        for g in self.goals:
            if g.id == goal_id:
                return g
        raise GoalNotApproved(f"unknown goal: {goal_id}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "mode": self.mode,
            "state": self.state,
            "research_question": self.research_question,
            "goals": [g.to_dict() for g in self.goals],
            "workstream_order": list(self.workstream_order),
            "chat": list(self.chat),
            "alerts": list(self.alerts),
            "final_answer": self.final_answer.to_dict() if self.final_answer else None,
            "forced_instruction_sent": self.forced_instruction_sent,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Project":
        return cls(
            id=d["id"],
            mode=d["mode"],
            state=d["state"],
            research_question=d.get("research_question", ""),
            goals=[Goal.from_dict(g) for g in d.get("goals", [])],
            workstream_order=list(d.get("workstream_order", [])),
            chat=list(d.get("chat", [])),
            alerts=list(d.get("alerts", [])),
            final_answer=(FinalAnswer.from_dict(d["final_answer"])
                          if d.get("final_answer") else None),
            forced_instruction_sent=bool(d.get("forced_instruction_sent", False)),
        )


PC_ID = "pc"

SHORT_ROLE = {
    "WorkstreamCoordinator": "coord",
    "Reviewer": "rev",
    "LiteratureAgent": "lit",
    "CodingAgent": "code",
    "ProverAgent": "prover",
}


class Engine:
    """One engine per project; the sole writer of project state."""

    def __init__(
        self,
        data_dir: str | Path,
        project_id: str = "p1",
        backends: dict[str, Backend] | None = None,
        backend: Backend | None = None,
        provider=None,
        sandbox: SandboxPool | None = None,
        config: EngineConfig | None = None,
    ):
        if backends is None:
            backends = {"default": backend} if backend is not None else {}
        if not backends:
            raise ValueError("engine needs at least a 'default' backend")
        self.data_dir = Path(data_dir)
        self.config = config or EngineConfig()
        self.clock = LogicalClock()
        self.workspace = Workspace(self.data_dir / "store", project_id=project_id,
                                   clock=self.clock)
        self.bus = MessageBus(OrgChart(), clock=self.clock,
                              attachment_exists=self.workspace.exists)
        self.registry = AgentRegistry()
        self.call_log = CallLog()
        self.call_log.immediate_sink = self.workspace
        self.tool_log = ToolLog()
        self.toolbox = Toolbox(sandbox=sandbox or SandboxPool(), provider=provider,
                               log=self.tool_log, clock=self.clock)
        self.backends = backends
        self.runtime = AgentRuntime(
            registry=self.registry,
            bus=self.bus,
            backends=backends,
            call_log=self.call_log,
            clock=self.clock,
            executor=self._execute_action,
            system_context=self._system_context,
            context_turns=self.config.context_turns,
            parse_failure_limit=self.config.parse_failure_limit,
            max_output_tokens=self.config.max_output_tokens,
        )
        self.project: Optional[Project] = None
        self.project_id = project_id
        self.sessions: dict[str, ReviewSession] = {}
        self.workstreams: dict[str, Workstream] = {}
        self.events: list[dict] = []
        self._agent_ws: dict[str, str] = {}  # agent id -> workstream id
        self._counters: dict[str, int] = {}
        self._profile_cache: dict[str, str] = {}

    # ------------------------------------------------------------------
    # small helpers

    def _next(self, name: str) -> int:
        self._counters[name] = self._counters.get(name, 0) + 1
        return self._counters[name]

    def emit(self, kind: str, payload: dict) -> dict:
        assert kind in EVENT_KINDS, kind
        event = {"event_id": len(self.events) + 1, "kind": kind,
                 "payload": payload, "at": self.clock.tick()}
        self.events.append(event)
        return event

    def events_after(self, after_id: int = 0) -> list[dict]:
        return [e for e in self.events if e["event_id"] > after_id]

    def _profile_text(self, name: str) -> str:
        if name not in self._profile_cache:
            try:
                raw = self.workspace.read_file(f"profiles/{name}.txt")
                self._profile_cache[name] = raw.decode("utf-8")
            except AtelierError:
                self._profile_cache[name] = DEFAULT_PROFILES.get(name, "")
        return self._profile_cache[name]

    def _write_default_profiles(self) -> None:
        for role, text in DEFAULT_PROFILES.items():
            self.workspace.write_file(f"profiles/{role}.txt", text.encode("utf-8"),
                                      author=USER)

    def _system_context(self, agent: Agent) -> str:
        parts = [self._profile_text(agent.spec.prompt_profile or agent.spec.role)]
        project = self.project
        if project is None:
            return parts[0]
        if agent.spec.role == "ProjectCoordinator":
            goals = "; ".join(f"{g.id} [{g.status}] {g.text}" for g in project.goals)
            streams = "; ".join(
                f"{w} [{self.workstreams[w].status}]" for w in project.workstream_order
            )
            parts.append(
                f"Project {project.id} state={project.state} mode={project.mode}. "
                f"Research question: {project.research_question or '(unset)'}. "
                f"Goals: {goals or '(none)'}. Workstreams: {streams or '(none)'}."
            )
        ws_id = self._agent_ws.get(agent.id)
        if ws_id and agent.spec.role == "WorkstreamCoordinator":
            ws = self.workstreams[ws_id]
            goal = project.goal(ws.goal_id)
            try:
                history = self.workspace.history(ws.report_path)
                report_note = f"report v{history[-1].version} digest {history[-1].digest[:12]}"
            except AtelierError:
                report_note = "report missing"
            parts.append(
                f"Workstream {ws_id} for goal {goal.id}: {goal.text}. "
                f"Research question: {project.research_question}. "
                f"Instructions: {ws.instructions or '(none)'}. Current {report_note}."
            )
        return "\n".join(p for p in parts if p)

    # ------------------------------------------------------------------
    # spawning

    def _spawn(self, agent_id: str, spec: AgentSpec, ws_id: str | None = None) -> Agent:
        parent_role = None
        if spec.parent != USER:
            parent_role = self.registry.get(spec.parent).spec.role
        agent = self.registry.spawn(agent_id, spec, parent_role)
        self.bus.register(agent_id, spec.parent)
        if ws_id:
            self._agent_ws[agent_id] = ws_id
        return agent

    def spawn_agent(self, spec: AgentSpec, agent_id: str | None = None,
                    instructions: str = "") -> str:
        """Register a sub-agent under a coordinator (SpawnDenied otherwise)."""
        parent = spec.parent
        ws_id = self._agent_ws.get(parent)
        if agent_id is None:
            base = ws_id or parent
            short = SHORT_ROLE.get(spec.role, spec.role.lower())
            agent_id = f"{base}-{short}{self._next('sub:' + parent)}"
        agent = self._spawn(agent_id, spec, ws_id=ws_id)
        agent.add_turn(
            "spawn",
            f"[spawn] You are {agent_id} ({spec.role}) under {parent}."
            + (f" Instructions: {instructions}" if instructions else ""),
        )
        return agent_id

    def trajectory(self, agent_id: str) -> list[dict]:
        return [r.to_dict() for r in self.registry.trajectory(agent_id)]

    # ------------------------------------------------------------------
    # project lifecycle operations

    def start_project(self, brief: str, attachments: list[dict] | None = None) -> Project:
        """Create the project, spawn the coordinator, deliver the brief."""
        if not brief or not brief.strip():
            raise ValueError("brief must be non-empty")
        if self.project is not None:
            raise ValueError("project already started")
        self._write_default_profiles()
        self.project = Project(id=self.project_id, mode="interactive")
        self._spawn(PC_ID, spec_for_role("ProjectCoordinator", USER,
                                         prompt_profile="ProjectCoordinator"))
        paths = self._commit_attachments(attachments)
        mid = self.bus.send(USER, PC_ID, "UserChat", brief, attachments=paths)
        self._chat_entry(mid, USER, brief, paths)
        self.save()
        return self.project

    def _commit_attachments(self, attachments: list[dict] | None) -> list[str]:
        paths = []
        for att in attachments or []:
            name = att["name"].strip().strip("/")
            content = att.get("text", "").encode("utf-8") if "text" in att else b""
            if "base64" in att:
                import base64

                content = base64.b64decode(att["base64"])
            path = f"uploads/{name}"
            self.workspace.write_file(path, content, author=USER)
            paths.append(path)
        return paths

    def _chat_entry(self, message_id: str, sender: str, text: str,
                    attachments: list[str]) -> None:
        entry = {"message_id": message_id, "sender": sender, "text": text,
                 "attachments": list(attachments), "at": self.clock.tick()}
        self.project.chat.append(entry)
        self.emit("chat_message", entry)

    def propose_goals(self, research_question: str, goal_texts: list[str]) -> None:
        """Record the coordinator's goal proposal and present it to the user."""
        project = self._require_project()
        if project.state not in ("Onboarding", "GoalsProposed"):
            raise MalformedProposal(f"cannot propose goals in state {project.state}")
        texts = [t.strip() for t in goal_texts if isinstance(t, str) and t.strip()]
        if not texts or not research_question.strip():
            raise MalformedProposal("proposal needs a research question and >= 1 goal")
        project.research_question = research_question.strip()
        if project.state == "Onboarding":
            project.goals = []
            project.state = "GoalsProposed"
        else:  # re-proposal revises wording; approval stays with the user
            project.goals = [g for g in project.goals if g.status == "Approved"]
        for text in texts:
            goal = Goal(id=f"g{self._next('goal')}", text=text)
            project.goals.append(goal)
            self.emit("goal_update", {"goal_id": goal.id, "text": goal.text,
                                      "status": goal.status})

    def approve_goals(self, decisions: dict, actor: str = USER) -> Project:
        """User-only hard gate taking goal decisions: "approve" or {"edit": text}."""
        project = self._require_project()
        if actor != USER:
            raise NotUser(f"goal approval is user-only, not {actor!r}")
        # later approvals of still-Proposed goals are legal once Active
        if project.state not in ("GoalsProposed", "Active"):
            raise MalformedProposal(f"no proposal awaiting approval (state {project.state})")
        approved = 0
        for goal_id, decision in decisions.items():
            goal = project.goal(goal_id)
            if decision == "approve":
                if goal.status != "Approved":
                    goal.status = "Approved"
                    approved += 1
                self.emit("goal_update", {"goal_id": goal.id, "text": goal.text,
                                          "status": goal.status})
            elif isinstance(decision, dict) and "edit" in decision:
                goal.text = decision["edit"]
                self.emit("goal_update", {"goal_id": goal.id, "text": goal.text,
                                          "status": goal.status})
        if not approved and not any(g.status == "Approved" for g in project.goals):
            raise NoGoalsApproved("approve at least one goal to activate the project")
        project.state = "Active"
        approved_ids = [g.id for g in project.goals if g.status == "Approved"]
        self.bus.send(USER, PC_ID, "Instruction",
                      f"Goals approved: {', '.join(approved_ids)}. Proceed.")
        self.save()
        return project

    def create_workstream(self, goal_id: str, instructions: str = "") -> Workstream:
        """Spawn a workstream coordinator for an approved goal."""
        project = self._require_project()
        goal = project.goal(goal_id)
        if goal.status != "Approved":
            raise GoalNotApproved(goal_id)
        ws_id = f"ws{self._next('ws')}"
        coord_id = f"{ws_id}-coord"
        ws = Workstream(id=ws_id, goal_id=goal_id, coordinator=coord_id,
                        instructions=instructions)
        self.workstreams[ws_id] = ws
        project.workstream_order.append(ws_id)
        goal.workstreams.append(ws_id)
        self._spawn(coord_id,
                    spec_for_role("WorkstreamCoordinator", PC_ID,
                                  prompt_profile="WorkstreamCoordinator"),
                    ws_id=ws_id)
        coord = self.registry.get(coord_id)
        coord.add_turn(
            "spawn",
            f"[spawn] You coordinate workstream {ws_id} ({coord_id}). "
            f"Research question: {project.research_question}. "
            f"Goal {goal.id}: {goal.text}. Instructions: {instructions or '(none)'}",
        )
        report_mod.ReportStore(self.workspace).create(ws_id, author=coord_id)
        self.emit("workstream_status", {"workstream_id": ws_id, "status": ws.status,
                                        "warnings": []})
        self.emit("report_updated", {"workstream_id": ws_id, "version": 1})
        return ws

    def handle_user_message(self, text: str, attachments: list[dict] | None = None) -> str:
        """User steering: legal in every project state."""
        self._require_project()
        paths = self._commit_attachments(attachments)
        mid = self.bus.send(USER, PC_ID, "UserChat", text, attachments=paths)
        self._chat_entry(mid, USER, text, paths)
        self.save()
        return mid

    # ------------------------------------------------------------------
    # workstream state machine

    def _set_ws_status(self, ws: Workstream, status: str) -> None:
        if ws.status == status:
            return
        if (ws.status, status) not in WS_TRANSITIONS:
            raise GateViolation(f"{ws.id}: illegal transition {ws.status} -> {status}")
        ws.status = status
        self.emit("workstream_status", {"workstream_id": ws.id, "status": status,
                                        "warnings": list(ws.warnings)})

    def conclude_workstream(self, ws_id: str, outcome: str, summary: str = "") -> None:
        """Terminal transition with outcome-specific gates; files are retained."""
        ws = self.workstreams[ws_id]
        if ws.status in TERMINAL_WS:
            raise GateViolation(f"{ws_id} already terminal ({ws.status})")
        if outcome == "Completed":
            session = self.sessions.get(ws.review_session or "")
            if session is None or session.status != "Approved":
                raise GateViolation(f"{ws_id}: review session not approved")
            report = report_mod.ReportStore(self.workspace).load(ws_id)
            if report.status != "Final":
                raise GateViolation(f"{ws_id}: report not Final")
            defects = report_mod.validate_report(report, path_exists=self.workspace.exists)
            if report_mod.blocking_defects(defects):
                raise GateViolation(f"{ws_id}: report has blocking defects")
        elif outcome in ("Failed", "Unfinished"):
            if not summary.strip():
                raise GateViolation(f"{ws_id}: {outcome} requires a summary")
        else:
            raise GateViolation(f"unknown outcome: {outcome}")

        if outcome in ("Failed", "Unfinished"):
            ws.warnings.append(f"workstream {outcome.lower()}: {summary}")
        ws.summary = summary
        self._set_ws_status(ws, outcome)

        try:
            self.bus.send(ws.coordinator, PC_ID, "StatusUpdate",
                          f"workstream {ws_id} {outcome}: {summary or 'done'}",
                          attachments=[ws.report_path])
        except AtelierError:
            pass
        for agent in self.registry.in_spawn_order():
            if self._agent_ws.get(agent.id) == ws_id:
                agent.terminated = True
                agent.active = False
        self.save()

    # ------------------------------------------------------------------
    # review orchestration

    def open_review(self, ws_id: str, report_version: int,
                    n_reviewers: int | None = None) -> ReviewSession:
        ws = self.workstreams[ws_id]
        store = report_mod.ReportStore(self.workspace)
        latest = store.latest_version(ws_id)  # ReportNotFound if never created
        if report_version > latest:
            raise ReportNotFound(f"{ws_id} has no report version {report_version}")
        n = n_reviewers or self.config.n_reviewers
        if n < 1:
            raise ValueError("n_reviewers must be >= 1")
        session_id = f"{ws_id}-r{self._next('session:' + ws_id)}"
        reviewers = []
        for i in range(1, n + 1):
            rid = f"{session_id}-rev{i}"
            self._spawn(rid, spec_for_role("Reviewer", ws.coordinator,
                                           prompt_profile="Reviewer"), ws_id=ws_id)
            self.registry.get(rid).active = False  # stepped only inside rounds
            reviewers.append(rid)
        session = ReviewSession(
            id=session_id, workstream_id=ws_id, reviewers=reviewers,
            max_rounds=self.config.max_rounds, stall_window=self.config.stall_window,
            pending_version=report_version,
        )
        self.sessions[session_id] = session
        ws.review_session = session_id
        persist_session(session, self.workspace, author=ws.coordinator)
        return session

    def _run_review_round(self, session: ReviewSession) -> None:
        ws = self.workstreams[session.workstream_id]
        version = session.pending_version
        session.pending_version = None
        report = report_mod.ReportStore(self.workspace).load(ws.id, version)
        rendered = report_mod.render(report, "markdown").decode("utf-8")
        round_no = len(session.rounds) + 1
        verdicts = {}
        for rid in session.reviewers:
            self.bus.send(
                ws.coordinator, rid, "ReviewRequest",
                f"[review round {round_no}] workstream {ws.id} report v{version}\n{rendered}",
                attachments=[ws.report_path],
            )
            records = self.runtime.step(rid)
            verdict = None
            for record in records:
                action = record.action or {}
                if action.get("kind") == "SendMessage" and \
                        action.get("payload", {}).get("kind") == "ReviewVerdict":
                    verdict = parse_verdict_body(action["payload"]["body"])
            if verdict is None:
                verdict = reject(Issue.make("blocking", "global",
                                            f"{rid} returned no verdict"))
            verdicts[rid] = verdict
        session.apply_round(version, verdicts)
        persist_session(session, self.workspace, author=ws.coordinator)

        coord = self.registry.get(ws.coordinator)
        # the round owns the verdict conversation: fold the reviewers'
        # verdict messages into the coordinator's context now so the
        # review outcome below is what the coordinator reacts to next
        for msg in self.bus.poll_from(ws.coordinator, set(session.reviewers), 100):
            coord.add_turn(msg.sender, format_message_turn(msg))
        if session.status == "Approved":
            coord.add_turn("review", f"[review] workstream {ws.id} report v{version} "
                                     "approved by all reviewers; you may mark the "
                                     "workstream complete")
            coord.active = True
        elif session.status == "Stalled" or detect_stall(session):
            self.close_review_as_escalated(session)
        else:
            issues = "; ".join(i.text for i in session.open_issue_objects())
            self._set_ws_status(ws, "Running")
            coord.add_turn("review", f"[review] workstream {ws.id} round {round_no} "
                                     f"rejected; open issues: {issues}")
            coord.active = True

    def close_review_as_escalated(self, session: ReviewSession) -> str:
        """Stalled review: durable record, escalation, Unfinished workstream."""
        if session.status == "Approved" or not session.rounds or not detect_stall(session):
            raise NotStalled(session.id)
        session.status = "Stalled"
        ws = self.workstreams[session.workstream_id]
        issues = session.open_issue_objects()
        issues_path = f"{ws.id}/issues.json"
        self.workspace.write_file(
            issues_path,
            json.dumps([i.to_dict() for i in issues], indent=2, sort_keys=True).encode(),
            author=ws.coordinator,
        )
        persist_session(session, self.workspace, author=ws.coordinator)
        # highlight contested blocks in the report with reviewer provenance
        store = report_mod.ReportStore(self.workspace)
        report = store.load(ws.id)
        annotated = False
        for issue in issues:
            if report.has_block(issue.location):
                try:
                    store.annotate(ws.id, issue.location, (0, 0),
                                   f"review stalled here: {issue.text}", "reviewer",
                                   review_path(ws.id), author=ws.coordinator)
                    annotated = True
                except AtelierError:
                    pass
        if annotated:
            self.emit("report_updated", {"workstream_id": ws.id,
                                         "version": store.latest_version(ws.id)})
        mid = self.bus.send(ws.coordinator, PC_ID, "Escalation",
                            f"review stalled for {ws.id} after "
                            f"{len(session.rounds)} rounds: "
                            + "; ".join(i.text for i in issues),
                            attachments=[ws.report_path, issues_path])
        self.conclude_workstream(ws.id, "Unfinished",
                                 f"review stalled after {len(session.rounds)} rounds")
        return mid

    # ------------------------------------------------------------------
    # the action executor (hard gates live here)

    def _ws_of(self, agent: Agent) -> Workstream | None:
        ws_id = self._agent_ws.get(agent.id)
        return self.workstreams.get(ws_id) if ws_id else None

    def _execute_action(self, agent: Agent, action: Action) -> tuple[str, Optional[str]]:
        try:
            return self._dispatch(agent, action)
        except AtelierError as e:
            return f"rejected: {type(e).__name__}: {e}", f"[engine] rejected: {e}"

    def _dispatch(self, agent: Agent, action: Action) -> tuple[str, Optional[str]]:
        kind = action.kind
        payload = action.payload
        if kind == "Wait":
            return "idle", None
        if kind == "CallTool":
            return self._dispatch_tool(agent, payload["name"], payload.get("args", {}))
        if kind == "SendMessage":
            recipient = payload["recipient"]
            if recipient == "__parent__":
                recipient = self.bus.chart.parent_of(agent.id)
            mid = self.bus.send(agent.id, recipient, payload["kind"], payload["body"],
                                attachments=payload.get("attachments") or [])
            return f"sent {mid} to {recipient}", None
        if kind == "Escalate":
            mid = self.bus.escalate(agent.id, payload["body"],
                                    attachments=payload.get("attachments") or [])
            return f"escalated {mid}", None
        if kind == "UpdateReport":
            return self._do_update_report(agent, payload.get("delta", {}))
        if kind == "SpawnSubAgent":
            return self._do_spawn_sub_agent(agent, payload)
        if kind == "SubmitForReview":
            return self._do_submit_for_review(agent, payload)
        if kind == "MarkComplete":
            return self._do_mark_complete(agent, payload)
        if kind == "GiveFinalAnswer":
            return self._do_give_final_answer(agent, payload)
        return f"rejected: unknown action {kind}", None

    def _dispatch_tool(self, agent: Agent, name: str, args: dict) -> tuple[str, Optional[str]]:
        ws = self._ws_of(agent)
        prefix = ws.id if ws else "shared"
        if name == "search_literature":
            hits = self.toolbox.search_literature(args.get("query", ""),
                                                  int(args.get("k", 5)))
            path = f"{prefix}/search/{ws.bump('search') if ws else self._next('search')}.json"
            body = json.dumps([h.to_dict() for h in hits], indent=2, sort_keys=True)
            self.workspace.write_file(path, body.encode(), author=agent.id)
            return (f"{len(hits)} hits -> {path}",
                    f"[tool:search_literature] {len(hits)} hits saved to {path}: {body[:500]}")
        if name == "fetch_document":
            uri = args.get("uri", "")
            content_type, data = self.toolbox.fetch_document(uri)
            path = f"{prefix}/sources/{ws.bump('fetch') if ws else self._next('fetch')}"
            self.workspace.write_file(path, data, author=agent.id)
            if ws is not None and uri not in ws.fetched_uris:
                ws.fetched_uris.append(uri)
            snippet = data[:300].decode("utf-8", errors="replace")
            return (f"fetched {uri} ({len(data)} bytes) -> {path}",
                    f"[tool:fetch_document] {uri} ({content_type}, {len(data)} bytes) "
                    f"saved to {path}: {snippet}")
        if name in ("execute_code", "execute_parallel"):
            return self._do_execute_code(agent, ws, name, args)
        if name == "propose_goals":
            if agent.spec.role != "ProjectCoordinator":
                return "rejected: only the project coordinator proposes goals", None
            self.propose_goals(args["research_question"], args["goals"])
            return ("goals proposed",
                    "[engine] goals proposed and presented to the user for approval")
        if name == "create_workstream":
            if agent.spec.role != "ProjectCoordinator":
                return "rejected: only the project coordinator creates workstreams", None
            ws_new = self.create_workstream(args["goal_id"], args.get("instructions", ""))
            return (f"created {ws_new.id}",
                    f"[engine] workstream {ws_new.id} created for goal {ws_new.goal_id}")
        return f"rejected: unknown tool {name}", None

    def _job_from_args(self, args: dict) -> "CodeJob":
        from .tools import CodeJob

        files = {p: (c.encode("utf-8") if isinstance(c, str) else bytes(c))
                 for p, c in args.get("files", {}).items()}
        return CodeJob(
            runtime=args.get("runtime", "python3"),
            files=files,
            entry=args.get("entry", ""),
            stdin=args.get("stdin", "").encode("utf-8"),
            limits=args.get("limits", {}),
        )

    def _do_execute_code(self, agent: Agent, ws: Workstream | None, name: str,
                         args: dict) -> tuple[str, Optional[str]]:
        prefix = ws.id if ws else "shared"
        if name == "execute_code":
            results = [self.toolbox.execute_code(self._job_from_args(args))]
        else:
            jobs = [self._job_from_args(j) for j in args.get("jobs", [])]
            results = self.toolbox.execute_parallel(jobs, args.get("max_concurrency"))
        summaries = []
        for result in results:
            job_no = ws.bump("code") if ws else self._next("code")
            base = f"{prefix}/code/job{job_no}"
            self.workspace.write_file(f"{base}/stdout.txt", result.stdout, author=agent.id)
            if result.stderr:
                self.workspace.write_file(f"{base}/stderr.txt", result.stderr,
                                          author=agent.id)
            for rel, blob in sorted(result.produced_files.items()):
                self.workspace.write_file(f"{base}/{rel}", blob, author=agent.id)
            tail = result.stdout[-400:].decode("utf-8", errors="replace")
            summaries.append(
                f"exit={result.exit_code} timed_out={result.timed_out} -> {base} "
                f"stdout: {tail}"
            )
        return (f"{len(results)} job(s) run",
                "[tool:" + name + "] " + " | ".join(summaries))

    def _do_update_report(self, agent: Agent, delta: dict) -> tuple[str, Optional[str]]:
        ws = self._ws_of(agent)
        if ws is None or agent.spec.role != "WorkstreamCoordinator":
            return "rejected: only a workstream coordinator updates its report", None
        store = report_mod.ReportStore(self.workspace)
        current = store.latest_version(ws.id)
        report = store.load(ws.id)

        for att in delta.get("attachments", []):
            rel = att["path"].strip().strip("/")
            content = att.get("text", "")
            data = content.encode("utf-8") if isinstance(content, str) else bytes(content)
            if "base64" in att:
                import base64

                data = base64.b64decode(att["base64"])
            path = f"{ws.id}/{rel}"
            fv = self.workspace.write_file(path, data, author=agent.id)
            report.references.append(
                report_mod.Reference(internal_path=path, internal_version=fv.version)
            )

        report_mod.apply_delta(
            report,
            {k: v for k, v in delta.items() if k not in ("attachments", "annotations")},
        )
        # external references are verified iff this workstream fetched them
        for ref in report.references:
            if not ref.is_internal and ref.uri in ws.fetched_uris:
                ref.verified = True

        def resolve(path: str):
            try:
                return self.workspace.latest_version(path)
            except AtelierError:
                return None

        for note in delta.get("annotations", []):
            report_mod.attach_note(
                report, note["block_id"],
                tuple(note.get("span", (0, 0))), note["text"], note["kind"],
                note["locator"], resolve_path=resolve,
            )
        fv = self.workspace.write_file(
            ws.report_path, report_mod.render(report, "structured"),
            author=agent.id, expected_version=current,
        )
        self.emit("report_updated", {"workstream_id": ws.id, "version": fv.version})
        return (f"report v{fv.version}",
                f"[engine] report for {ws.id} updated to v{fv.version}")

    def _do_spawn_sub_agent(self, agent: Agent, payload: dict) -> tuple[str, Optional[str]]:
        if agent.spec.role not in ("ProjectCoordinator", "WorkstreamCoordinator"):
            raise SpawnDenied(f"role {agent.spec.role} may not spawn sub-agents")
        role = payload["role"]
        allowlist = payload.get("tool_allowlist")
        spec = spec_for_role(role, agent.id, prompt_profile=payload.get("prompt_profile", role),
                             **({"tool_allowlist": frozenset(allowlist)} if allowlist else {}))
        agent_id = self.spawn_agent(spec, instructions=payload.get("instructions", ""))
        return f"spawned {agent_id}", f"[engine] sub-agent {agent_id} spawned"

    def _do_submit_for_review(self, agent: Agent, payload: dict) -> tuple[str, Optional[str]]:
        ws = self._ws_of(agent)
        if ws is None or agent.spec.role != "WorkstreamCoordinator":
            return "rejected: only a workstream coordinator submits for review", None
        store = report_mod.ReportStore(self.workspace)
        version = int(payload.get("report_version") or store.latest_version(ws.id))
        session = self.sessions.get(ws.review_session or "")
        if session is None or session.is_terminal():
            session = self.open_review(ws.id, version)
            note = f"[engine] review session {session.id} opened on report v{version}"
        else:
            session.pending_version = version
            persist_session(session, self.workspace, author=ws.coordinator)
            note = f"[engine] review session {session.id} advanced to report v{version}"
        if ws.status == "Running":
            self._set_ws_status(ws, "InReview")
        return f"submitted v{version} to {session.id}", note

    def _do_mark_complete(self, agent: Agent, payload: dict) -> tuple[str, Optional[str]]:
        ws = self._ws_of(agent)
        if ws is None or agent.spec.role != "WorkstreamCoordinator":
            return "rejected: only a workstream coordinator marks complete", None
        session = self.sessions.get(ws.review_session or "")
        if session is None or session.status != "Approved":
            return ("rejected: review session not approved; workstream stays "
                    f"{ws.status}", "[engine] rejected: submit the report for review "
                                    "and obtain unanimous approval first")
        store = report_mod.ReportStore(self.workspace)
        report = store.load(ws.id)
        defects = report_mod.blocking_defects(
            report_mod.validate_report(report, path_exists=self.workspace.exists,
                                       final=True)
        )
        if defects:
            details = "; ".join(d.detail for d in defects)
            return (f"rejected: blocking defects: {details}",
                    f"[engine] rejected: fix blocking defects first: {details}")
        version = store.set_status(ws.id, "Final", author=agent.id)
        self.emit("report_updated", {"workstream_id": ws.id, "version": version})
        self.conclude_workstream(ws.id, "Completed",
                                 payload.get("summary", "goal achieved"))
        return "workstream completed", None

    def _do_give_final_answer(self, agent: Agent, payload: dict) -> tuple[str, Optional[str]]:
        project = self._require_project()
        if agent.spec.role != "ProjectCoordinator" or project.mode != "final_answer":
            return "rejected: final answers only from the coordinator in final-answer mode", None
        mid = self.bus.send(PC_ID, USER, "FinalAnswer", payload["text"])
        return f"final answer sent {mid}", None

    # ------------------------------------------------------------------
    # scheduling

    def _require_project(self) -> Project:
        if self.project is None:
            raise ValueError("no project started")
        return self.project

    def _runnable_agents(self) -> list[Agent]:
        out = []
        for agent in self.registry.in_spawn_order():
            if agent.terminated or agent.spec.role == "Reviewer":
                continue
            if agent.active or self.bus.peek_count(agent.id) > 0:
                out.append(agent)
        return out

    def tick(self, budget: int | None = None) -> dict:
        """One scheduling pass: step runnable agents, run pending review
        rounds, deliver user-facing messages, persist everything."""
        project = self._require_project()
        budget = budget or self.config.tick_budget
        stepped: list[str] = []
        review_rounds = 0
        first_event = len(self.events)

        for agent in self._runnable_agents():
            if len(stepped) >= budget:
                break
            ws = self._ws_of(agent)
            if ws is not None and agent.id == ws.coordinator and ws.status == "Pending":
                self._set_ws_status(ws, "Running")
            try:
                self.runtime.step(agent.id)
            except AtelierError as e:
                logger.warning("agent %s step failed: %s", agent.id, e)
                agent.active = False
                try:
                    self.bus.escalate(agent.id, f"step failed: {type(e).__name__}: {e}")
                except AtelierError:
                    pass
            stepped.append(agent.id)

        for ws_id in list(project.workstream_order):
            ws = self.workstreams[ws_id]
            session = self.sessions.get(ws.review_session or "")
            if session and not session.is_terminal() and session.pending_version is not None:
                self._run_review_round(session)
                review_rounds += 1

        self._drain_user_mailbox()
        self._flush_logs()
        self.save()
        return {
            "steps": len(stepped),
            "stepped": stepped,
            "review_rounds": review_rounds,
            "events": [e["event_id"] for e in self.events[first_event:]],
        }

    def _drain_user_mailbox(self) -> None:
        project = self._require_project()
        for msg in self.bus.poll(USER, 1000):
            if msg.kind == "UserChat":
                self._chat_entry(msg.id, msg.sender, msg.body, msg.attachments)
            elif msg.kind == "Alert":
                alert = {"message_id": msg.id, "body": msg.body,
                         "attachments": list(msg.attachments), "at": msg.at}
                project.alerts.append(alert)
                self.emit("alert", alert)
            elif msg.kind == "FinalAnswer":
                forced = project.forced_instruction_sent
                project.final_answer = FinalAnswer(text=msg.body, forced=forced,
                                                   produced_at=time.time())
                self._chat_entry(msg.id, msg.sender, msg.body, msg.attachments)
                self.emit("final_answer", {"text": msg.body, "forced": forced})

    def _flush_logs(self) -> None:
        self.bus.flush_log(self.workspace)
        self.call_log.flush(self.workspace)
        self.tool_log.flush(self.workspace)
        self.runtime.flush_trajectories(self.workspace)

    # ------------------------------------------------------------------
    # final-answer mode

    def start_final_answer_project(self, problem: str) -> Project:
        """Bypass onboarding: fixed pre-approved goal, problem as first message."""
        if self.project is not None:
            raise ValueError("project already started")
        self._write_default_profiles()
        self.project = Project(id=self.project_id, mode="final_answer", state="Active")
        goal = Goal(id=f"g{self._next('goal')}", text="solve the problem",
                    status="Approved")
        self.project.goals.append(goal)
        self._spawn(PC_ID, spec_for_role("ProjectCoordinator", USER,
                                         prompt_profile="ProjectCoordinator"))
        mid = self.bus.send(USER, PC_ID, "UserChat", problem)
        self._chat_entry(mid, USER, problem, [])
        self.save()
        return self.project

    # ------------------------------------------------------------------
    # summaries for the API layer

    def project_summary(self) -> dict:
        project = self._require_project()
        return {
            "project": project.to_dict(),
            "workstreams": [self.workstreams[w].to_dict()
                            for w in project.workstream_order],
            "event_count": len(self.events),
        }

    def workstream_summary(self, ws_id: str) -> dict:
        ws = self.workstreams[ws_id]
        out = ws.to_dict()
        try:
            out["report_version"] = self.workspace.latest_version(ws.report_path)
        except AtelierError:
            out["report_version"] = 0
        return out

    def review_summary(self, ws_id: str) -> dict:
        ws = self.workstreams[ws_id]
        session = self.sessions.get(ws.review_session or "")
        return session.to_dict() if session else {}

    # ------------------------------------------------------------------
    # persistence

    def _state_dir(self) -> Path:
        d = self.data_dir / "state"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def save(self) -> None:
        if self.project is None:
            return
        state = {
            "project": self.project.to_dict(),
            "project_id": self.project_id,
            "config": self.config.to_dict(),
            "workstreams": {w: ws.to_dict() for w, ws in self.workstreams.items()},
            "sessions": {s: sess.to_dict() for s, sess in self.sessions.items()},
            "events": self.events,
            "agent_ws": dict(self._agent_ws),
            "counters": dict(self._counters),
            "clock": self.clock.value,
        }
        runtime = {
            "bus": self.bus.to_dict(),
            "registry": self.registry.to_dict(),
            "call_log": self.call_log.to_dict(),
            "tool_log": self.tool_log.to_dict(),
            "backend_state": {
                binding: backend.state()
                for binding, backend in self.backends.items()
                if hasattr(backend, "state")
            },
        }
        d = self._state_dir()
        for name, doc in (("project.json", state), ("runtime.json", runtime)):
            tmp = d / (name + ".tmp")
            tmp.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
            tmp.replace(d / name)

    @classmethod
    def load(
        cls,
        data_dir: str | Path,
        backends: dict[str, Backend] | None = None,
        backend: Backend | None = None,
        provider=None,
        sandbox: SandboxPool | None = None,
    ) -> "Engine":
        """Rebuild an engine from persisted state (crash recovery)."""
        data_dir = Path(data_dir)
        state = json.loads((data_dir / "state" / "project.json").read_text())
        runtime = json.loads((data_dir / "state" / "runtime.json").read_text())
        engine = cls(
            data_dir,
            project_id=state["project_id"],
            backends=backends,
            backend=backend,
            provider=provider,
            sandbox=sandbox,
            config=EngineConfig.from_dict(state["config"]),
        )
        engine.clock.restore(int(state["clock"]))
        engine.project = Project.from_dict(state["project"])
        engine.workstreams = {
            w: Workstream.from_dict(d) for w, d in state["workstreams"].items()
        }
        engine.sessions = {
            s: ReviewSession.from_dict(d) for s, d in state["sessions"].items()
        }
        engine.events = list(state["events"])
        engine._agent_ws = dict(state["agent_ws"])
        engine._counters = dict(state["counters"])
        engine.bus = MessageBus.from_dict(
            runtime["bus"], clock=engine.clock,
            attachment_exists=engine.workspace.exists,
        )
        engine.registry = AgentRegistry.from_dict(runtime["registry"])
        engine.call_log = CallLog.from_dict(runtime["call_log"])
        engine.call_log.immediate_sink = engine.workspace
        engine.tool_log = ToolLog.from_dict(runtime["tool_log"])
        engine.toolbox.log = engine.tool_log
        for binding, saved in runtime.get("backend_state", {}).items():
            be = engine.backends.get(binding)
            if be is not None and hasattr(be, "restore"):
                be.restore(saved)
        engine.runtime = AgentRuntime(
            registry=engine.registry,
            bus=engine.bus,
            backends=engine.backends,
            call_log=engine.call_log,
            clock=engine.clock,
            executor=engine._execute_action,
            system_context=engine._system_context,
            context_turns=engine.config.context_turns,
            parse_failure_limit=engine.config.parse_failure_limit,
            max_output_tokens=engine.config.max_output_tokens,
        )
        return engine


def run_final_answer_mode(
    problem: str,
    deadline_seconds: float,
    backend: Backend,
    data_dir: str | Path,
    provider=None,
    config: EngineConfig | None = None,
    poll_sleep: float = 0.02,
) -> FinalAnswer:
    """Headless benchmark mode: tick until an answer or the deadline.

    At (deadline - grace) a forced instruction demands an immediate
    answer; total wall time never exceeds deadline + grace. Production
    time limits in the 24h/48h range are supplied by the caller via
    ``deadline_seconds`` (see the CLI's --time-limit flag).
    """
    if deadline_seconds <= 0:
        raise ValueError("deadline must be positive")
    config = config or EngineConfig()
    grace = config.grace_for(deadline_seconds)
    engine = Engine(data_dir, project_id="bench", backend=backend, provider=provider,
                    config=config)
    project = engine.start_final_answer_project(problem)
    start = time.monotonic()
    while True:
        summary = engine.tick()
        if project.final_answer is not None:
            return project.final_answer
        elapsed = time.monotonic() - start
        if not project.forced_instruction_sent and elapsed >= deadline_seconds - grace:
            engine.bus.send(USER, PC_ID, "Instruction",
                            "Time limit reached: give your single final answer "
                            "immediately with give_final_answer.")
            project.forced_instruction_sent = True
        if elapsed >= deadline_seconds + grace:
            project.final_answer = FinalAnswer(
                text="", forced=True, produced_at=time.time(),
                error="no answer produced within deadline + grace",
            )
            engine.save()
            return project.final_answer
        if summary["steps"] == 0:
            time.sleep(poll_sleep)
