"""Generic agent runtime: role profiles, the step loop, trajectories.

A step drains the agent's mailbox into its context, makes exactly one
model completion, parses the response into validated actions, and hands
each action to the engine's executor. Everything an agent does lands in
its append-only trajectory, which the UI can drill into and which
cross-references the model call log.

Agents are single-threaded internally; parallelism exists only across
agents, and the engine owns all scheduling.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .actions import Action, KNOWN_TOOLS
from .bus import USER, Message, MessageBus
from .clock import LogicalClock
from .errors import (
    DisallowedTool,
    InvalidSpec,
    SpawnDenied,
    UnknownAgent,
    UnparseableAction,
)
from .model import Backend, CallLog, ModelRequest, parse_actions

ROLES = frozenset(
    {
        "ProjectCoordinator",
        "WorkstreamCoordinator",
        "Reviewer",
        "LiteratureAgent",
        "CodingAgent",
        "ProverAgent",
    }
)
COORDINATOR_ROLES = frozenset({"ProjectCoordinator", "WorkstreamCoordinator"})

# Reviewer allowlists always include the verification tools so verdicts
# can be grounded in re-checked references and code outputs.
DEFAULT_ALLOWLISTS: dict[str, frozenset[str]] = {
    "ProjectCoordinator": frozenset(
        {"propose_goals", "create_workstream", "send_message", "escalate",
         "give_final_answer", "wait"}
    ),
    "WorkstreamCoordinator": frozenset(
        {"search_literature", "fetch_document", "execute_code", "execute_parallel",
         "update_report", "send_message", "spawn_sub_agent", "submit_for_review",
         "mark_complete", "escalate", "wait"}
    ),
    "Reviewer": frozenset({"fetch_document", "execute_code", "submit_verdict", "wait"}),
    "LiteratureAgent": frozenset(
        {"search_literature", "fetch_document", "send_message", "escalate", "wait"}
    ),
    "CodingAgent": frozenset(
        {"execute_code", "execute_parallel", "send_message", "escalate", "wait"}
    ),
    "ProverAgent": frozenset({"send_message", "escalate", "wait"}),
}

ACTION_LABELS = {
    "UpdateReport": "report update",
    "SubmitForReview": "submit for review",
    "MarkComplete": "mark complete",
    "SpawnSubAgent": "spawn sub-agent",
    "Escalate": "escalate",
    "GiveFinalAnswer": "final answer",
    "Wait": "wait",
}
TOOL_LABELS = {
    "search_literature": "literature search",
    "fetch_document": "web query",
    "execute_code": "code execution",
    "execute_parallel": "parallel code execution",
    "propose_goals": "goal proposal",
    "create_workstream": "workstream creation",
    "submit_verdict": "review verdict",
}


def action_label(action: Action) -> str:
    if action.kind == "CallTool":
        name = action.payload.get("name", "?")
        return TOOL_LABELS.get(name, f"tool {name}")
    if action.kind == "SendMessage":
        kind = action.payload.get("kind", "")
        return "review verdict" if kind == "ReviewVerdict" else "send message"
    return ACTION_LABELS.get(action.kind, action.kind)


@dataclass
class AgentSpec:
    role: str
    parent: str
    prompt_profile: str = ""
    tool_allowlist: frozenset[str] = frozenset()
    backend_binding: str = "default"

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvalidSpec(f"unknown role: {self.role}")
        if self.role == "ProjectCoordinator" and self.parent != USER:
            raise InvalidSpec("project coordinator's parent must be 'user'")
        self.tool_allowlist = frozenset(self.tool_allowlist)
        unknown = self.tool_allowlist - KNOWN_TOOLS
        if unknown:
            raise InvalidSpec(f"unknown tools in allowlist: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "parent": self.parent,
            "prompt_profile": self.prompt_profile,
            "tool_allowlist": sorted(self.tool_allowlist),
            "backend_binding": self.backend_binding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AgentSpec":
        return cls(
            role=d["role"],
            parent=d["parent"],
            prompt_profile=d.get("prompt_profile", ""),
            tool_allowlist=frozenset(d.get("tool_allowlist", [])),
            backend_binding=d.get("backend_binding", "default"),
        )


def spec_for_role(role: str, parent: str, **overrides) -> AgentSpec:
    allowlist = overrides.pop("tool_allowlist", DEFAULT_ALLOWLISTS[role])
    return AgentSpec(role=role, parent=parent, tool_allowlist=frozenset(allowlist), **overrides)


@dataclass
class ActionRecord:
    agent_id: str
    step: int
    kind: str  # action | instruction | failure
    label: str
    triggering: list[str] = field(default_factory=list)
    model_call: Optional[str] = None
    action: Optional[dict] = None
    outcome: str = ""
    at: int = 0

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "step": self.step,
            "kind": self.kind,
            "label": self.label,
            "triggering": list(self.triggering),
            "model_call": self.model_call,
            "action": self.action,
            "outcome": self.outcome,
            "at": self.at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionRecord":
        return cls(
            agent_id=d["agent_id"],
            step=int(d["step"]),
            kind=d["kind"],
            label=d["label"],
            triggering=list(d.get("triggering", [])),
            model_call=d.get("model_call"),
            action=d.get("action"),
            outcome=d.get("outcome", ""),
            at=int(d.get("at", 0)),
        )


@dataclass
class Agent:
    id: str
    spec: AgentSpec
    turns: list[tuple[str, str]] = field(default_factory=list)
    trajectory: list[ActionRecord] = field(default_factory=list)
    consecutive_failures: int = 0
    active: bool = True  # freshly spawned agents take a first step unprompted
    terminated: bool = False
    step_count: int = 0
    flushed_records: int = 0

    def add_turn(self, speaker: str, text: str) -> None:
        self.turns.append((speaker, text))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "spec": self.spec.to_dict(),
            "turns": [[s, t] for s, t in self.turns],
            "trajectory": [r.to_dict() for r in self.trajectory],
            "consecutive_failures": self.consecutive_failures,
            "active": self.active,
            "terminated": self.terminated,
            "step_count": self.step_count,
            "flushed_records": self.flushed_records,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Agent":
        return cls(
            id=d["id"],
            spec=AgentSpec.from_dict(d["spec"]),
            turns=[(s, t) for s, t in d["turns"]],
            trajectory=[ActionRecord.from_dict(r) for r in d["trajectory"]],
            consecutive_failures=int(d["consecutive_failures"]),
            active=bool(d["active"]),
            terminated=bool(d["terminated"]),
            step_count=int(d["step_count"]),
            flushed_records=int(d.get("flushed_records", 0)),
        )


class AgentRegistry:
    """Spawn-ordered collection of agents."""

    def __init__(self):
        self._agents: dict[str, Agent] = {}
        self._order: list[str] = []
        self._lock = threading.RLock()

    def spawn(self, agent_id: str, spec: AgentSpec, parent_role: str | None) -> Agent:
        """Register a new agent under its parent.

        Only coordinators (and the user, for the project coordinator) may
        spawn; the engine passes the parent's role, or None for "user".
        """
        if parent_role is not None and parent_role not in COORDINATOR_ROLES:
            raise SpawnDenied(f"role {parent_role} may not spawn sub-agents")
        with self._lock:
            if agent_id in self._agents:
                raise InvalidSpec(f"agent id already registered: {agent_id}")
            agent = Agent(id=agent_id, spec=spec)
            self._agents[agent_id] = agent
            self._order.append(agent_id)
            return agent

    def get(self, agent_id: str) -> Agent:
        try:
            return self._agents[agent_id]
        except KeyError:
            raise UnknownAgent(agent_id) from None

    def exists(self, agent_id: str) -> bool:
        return agent_id in self._agents

    def in_spawn_order(self) -> list[Agent]:
        with self._lock:
            return [self._agents[a] for a in self._order]

    def trajectory(self, agent_id: str) -> list[ActionRecord]:
        return list(self.get(agent_id).trajectory)

    def to_dict(self) -> dict:
        with self._lock:
            return {"order": list(self._order),
                    "agents": {a: self._agents[a].to_dict() for a in self._order}}

    @classmethod
    def from_dict(cls, d: dict) -> "AgentRegistry":
        reg = cls()
        for agent_id in d["order"]:
            agent = Agent.from_dict(d["agents"][agent_id])
            reg._agents[agent_id] = agent
            reg._order.append(agent_id)
        return reg


def format_message_turn(msg: Message) -> str:
    text = f"[{msg.kind} from {msg.sender}] {msg.body}"
    if msg.attachments:
        text += f" (attachments: {', '.join(msg.attachments)})"
    return text


# Executor: (agent, action) -> (outcome summary, optional result turn text)
Executor = Callable[[Agent, Action], tuple[str, Optional[str]]]


class AgentRuntime:
    """Drives individual agent steps against a backend and an executor."""

    def __init__(
        self,
        registry: AgentRegistry,
        bus: MessageBus,
        backends: dict[str, Backend],
        call_log: CallLog,
        clock: LogicalClock,
        executor: Executor,
        system_context: Callable[[Agent], str] | None = None,
        context_turns: int = 20,
        poll_batch: int = 50,
        parse_failure_limit: int = 3,
        max_output_tokens: int = 2048,
    ):
        self.registry = registry
        self.bus = bus
        self.backends = backends
        self.call_log = call_log
        self.clock = clock
        self.executor = executor
        self.system_context = system_context
        self.context_turns = context_turns
        self.poll_batch = poll_batch
        self.parse_failure_limit = parse_failure_limit
        self.max_output_tokens = max_output_tokens

    # -- helpers -----------------------------------------------------------

    def _record(self, agent: Agent, **kwargs) -> ActionRecord:
        record = ActionRecord(agent_id=agent.id, step=len(agent.trajectory),
                              at=self.clock.tick(), **kwargs)
        agent.trajectory.append(record)
        return record

    def _request_for(self, agent: Agent) -> ModelRequest:
        # spec.prompt_profile names a template under profiles/ in the
        # workspace; the engine's system_context resolves it.
        system = f"You are {agent.id}, role {agent.spec.role}."
        if self.system_context is not None:
            extra = self.system_context(agent)
            if extra:
                system += "\n" + extra
        turns = agent.turns[-self.context_turns:]
        if agent.turns and len(turns) < len(agent.turns):
            turns = [agent.turns[0]] + turns  # keep the spawn context visible
        schemas = [{"name": t, "parameters": {"type": "object"}}
                   for t in sorted(agent.spec.tool_allowlist)]
        return ModelRequest(
            agent_role=agent.spec.role,
            system=system,
            transcript=list(turns),
            tool_schemas=schemas,
            max_output_tokens=self.max_output_tokens,
        )

    def _execute(self, agent: Agent, action: Action, call_id: str,
                 triggering: list[str]) -> ActionRecord:
        outcome, result_turn = self.executor(agent, action)
        record = self._record(
            agent,
            kind="action",
            label=action_label(action),
            triggering=triggering,
            model_call=call_id,
            action=action.to_dict(),
            outcome=outcome,
        )
        if result_turn:
            agent.add_turn("tool", result_turn)
        return record

    # -- the step loop -------------------------------------------------------

    def step(self, agent_id: str) -> list[ActionRecord]:
        """Run one agent step; returns the records appended to the trajectory."""
        agent = self.registry.get(agent_id)
        if agent.terminated:
            raise UnknownAgent(f"agent terminated: {agent_id}")
        before = len(agent.trajectory)
        agent.step_count += 1

        msgs = self.bus.poll(agent_id, self.poll_batch)
        triggering = [m.id for m in msgs]
        for m in msgs:
            agent.add_turn(m.sender, format_message_turn(m))
            if m.kind == "Instruction":
                # an instruction re-scopes the agent's task: first-class row
                self._record(
                    agent,
                    kind="instruction",
                    label="instruction received",
                    triggering=[m.id],
                    outcome=f"from {m.sender}",
                )

        request = self._request_for(agent)
        backend = self.backends[agent.spec.backend_binding]
        response = backend.complete(request)
        attempts = getattr(backend, "last_attempts", 1)
        call_id = self.call_log.record(agent.id, request, response,
                                       attempts=attempts, at=self.clock.tick(),
                                       wire=getattr(backend, "is_wire", False))

        try:
            actions = parse_actions(response, set(agent.spec.tool_allowlist),
                                    role=agent.spec.role)
        except UnparseableAction as e:
            agent.consecutive_failures += 1
            self._record(
                agent, kind="failure", label="unparseable response",
                triggering=triggering, model_call=call_id,
                outcome=f"{e} ({agent.consecutive_failures}/{self.parse_failure_limit})",
            )
            if agent.consecutive_failures >= self.parse_failure_limit:
                agent.consecutive_failures = 0
                synthesized = Action(
                    "Escalate",
                    {"body": f"unable to produce a valid action after "
                             f"{self.parse_failure_limit} attempts: {e}",
                     "attachments": []},
                )
                self._execute(agent, synthesized, call_id, triggering)
                agent.active = False
            return agent.trajectory[before:]
        except DisallowedTool as e:
            self._record(
                agent, kind="failure", label="disallowed tool",
                triggering=triggering, model_call=call_id,
                outcome=f"rejected: tool {e} outside allowlist",
            )
            agent.active = False
            return agent.trajectory[before:]

        agent.consecutive_failures = 0
        if response.text:
            agent.add_turn("assistant", response.text)

        if response.finish == "refusal":
            self._record(
                agent, kind="failure", label="refusal",
                triggering=triggering, model_call=call_id,
                outcome="advisory: model refused",
            )
            agent.active = False
            return agent.trajectory[before:]

        for action in actions:
            self._execute(agent, action, call_id, triggering)
            if agent.terminated:
                break

        # a tool_call response means the agent is mid-task and steps again
        agent.active = response.finish == "tool_call" and not agent.terminated
        return agent.trajectory[before:]

    def flush_trajectories(self, workspace) -> None:
        import json

        for agent in self.registry.in_spawn_order():
            if len(agent.trajectory) == agent.flushed_records:
                continue
            payload = "\n".join(
                json.dumps(r.to_dict(), sort_keys=True) for r in agent.trajectory
            ) + "\n"
            workspace.write_file(f"agents/{agent.id}/trajectory.jsonl",
                                 payload.encode("utf-8"), author=agent.id)
            agent.flushed_records = len(agent.trajectory)
