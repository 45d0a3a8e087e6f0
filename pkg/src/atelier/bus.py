"""Internal asynchronous messaging between the agent hierarchy.

Routing is constrained to org-chart edges: an agent may message its
parent or a direct child. The one exception is escalation, which may
travel to any ancestor. "user" is a pseudo-agent at the root of every
chart so user chat and alerts ride the same delivery mechanism.

Delivery guarantees: no loss, and FIFO per (sender, recipient) pair.
The full send log is kept in order and can be mirrored to the workspace
at ``bus/log.jsonl`` via :meth:`MessageBus.flush_log`.
"""

from __future__ import annotations

import json
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .clock import LogicalClock
from .errors import RoutingViolation, UnknownRecipient, UnknownSender

USER = "user"

MESSAGE_KINDS = frozenset(
    {
        "Instruction",
        "StatusUpdate",
        "Escalation",
        "UserChat",
        "ReviewRequest",
        "ReviewVerdict",
        "FinalAnswer",
        "Alert",
    }
)

BUS_LOG_PATH = "bus/log.jsonl"


@dataclass
class Message:
    """Typed envelope delivered over the bus."""

    id: str
    sender: str
    recipient: str
    kind: str
    body: str
    attachments: list[str] = field(default_factory=list)
    in_reply_to: Optional[str] = None
    seq: int = 0
    at: int = 0

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "sender": self.sender,
            "recipient": self.recipient,
            "kind": self.kind,
            "body": self.body,
            "attachments": list(self.attachments),
            "in_reply_to": self.in_reply_to,
            "seq": self.seq,
            "at": self.at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Message":
        return cls(
            id=d["id"],
            sender=d["sender"],
            recipient=d["recipient"],
            kind=d["kind"],
            body=d["body"],
            attachments=list(d.get("attachments", [])),
            in_reply_to=d.get("in_reply_to"),
            seq=int(d.get("seq", 0)),
            at=int(d.get("at", 0)),
        )


class OrgChart:
    """Parent mapping with "user" as the unique root."""

    def __init__(self):
        self._parent: dict[str, str] = {}
        self._lock = threading.RLock()

    def register(self, agent_id: str, parent: str) -> None:
        with self._lock:
            if agent_id == USER:
                raise ValueError("'user' is the implicit root")
            if parent != USER and parent not in self._parent:
                raise UnknownRecipient(f"parent not registered: {parent}")
            if agent_id in self._parent:
                raise ValueError(f"agent already registered: {agent_id}")
            self._parent[agent_id] = parent

    def is_registered(self, agent_id: str) -> bool:
        return agent_id == USER or agent_id in self._parent

    def parent_of(self, agent_id: str) -> str:
        if agent_id not in self._parent:
            raise UnknownSender(agent_id)
        return self._parent[agent_id]

    def children_of(self, agent_id: str) -> list[str]:
        with self._lock:
            return sorted(a for a, p in self._parent.items() if p == agent_id)

    def ancestors_of(self, agent_id: str) -> list[str]:
        """Chain of ancestors from parent up to and including "user"."""
        out = []
        cur = agent_id
        with self._lock:
            while cur != USER:
                cur = self._parent[cur]
                out.append(cur)
        return out

    def agents(self) -> list[str]:
        with self._lock:
            return sorted(self._parent)

    def to_dict(self) -> dict:
        return dict(self._parent)

    @classmethod
    def from_dict(cls, d: dict) -> "OrgChart":
        chart = cls()
        chart._parent = dict(d)
        return chart


class MessageBus:
    """Mailbox-per-agent delivery with org-chart routing checks.

    ``attachment_exists`` (when given) is consulted at send time so that
    a message can never reference a workspace path that does not exist.
    """

    def __init__(
        self,
        chart: OrgChart,
        clock: LogicalClock | None = None,
        attachment_exists: Callable[[str], bool] | None = None,
    ):
        self.chart = chart
        self.clock = clock or LogicalClock()
        self._attachment_exists = attachment_exists
        self._lock = threading.RLock()
        self._mailboxes: dict[str, deque[Message]] = {USER: deque()}
        self._seq: dict[tuple[str, str], int] = {}
        self._log: list[Message] = []
        self._next_id = 1
        self._flushed = 0

    # -- registration ----------------------------------------------------

    def register(self, agent_id: str, parent: str) -> None:
        self.chart.register(agent_id, parent)
        with self._lock:
            self._mailboxes.setdefault(agent_id, deque())

    # -- routing ---------------------------------------------------------

    def _routing_legal(self, sender: str, recipient: str, kind: str) -> bool:
        if sender == USER or recipient == USER:
            # user may talk to its direct children (the project coordinator)
            # and receives escalations/alerts from anywhere below.
            if sender == USER:
                return self.chart.parent_of(recipient) == USER
            if self.chart.parent_of(sender) == USER:
                return True
            return kind == "Escalation" and USER in self.chart.ancestors_of(sender)
        if self.chart.parent_of(sender) == recipient:
            return True
        if self.chart.parent_of(recipient) == sender:
            return True
        if kind == "Escalation" and recipient in self.chart.ancestors_of(sender):
            return True
        return False

    # -- operations --------------------------------------------------------

    def send(
        self,
        sender: str,
        recipient: str,
        kind: str,
        body: str,
        attachments: list[str] | None = None,
        in_reply_to: str | None = None,
    ) -> str:
        """Enqueue a message; returns the assigned message id."""
        if kind not in MESSAGE_KINDS:
            raise ValueError(f"unknown message kind: {kind}")
        if not self.chart.is_registered(sender):
            raise UnknownSender(sender)
        if not self.chart.is_registered(recipient):
            raise UnknownRecipient(recipient)
        if not self._routing_legal(sender, recipient, kind):
            raise RoutingViolation(f"{sender} -> {recipient} ({kind})")
        attachments = list(attachments or [])
        if self._attachment_exists is not None:
            for p in attachments:
                if not self._attachment_exists(p):
                    raise ValueError(f"attachment does not exist in workspace: {p}")
        with self._lock:
            pair = (sender, recipient)
            self._seq[pair] = self._seq.get(pair, 0) + 1
            msg = Message(
                id=f"m{self._next_id}",
                sender=sender,
                recipient=recipient,
                kind=kind,
                body=body,
                attachments=attachments,
                in_reply_to=in_reply_to,
                seq=self._seq[pair],
                at=self.clock.tick(),
            )
            self._next_id += 1
            self._mailboxes.setdefault(recipient, deque()).append(msg)
            self._log.append(msg)
            return msg.id

    def poll(self, recipient: str, max_messages: int = 50) -> list[Message]:
        """Remove and return up to ``max_messages`` from the mailbox (FIFO)."""
        if not self.chart.is_registered(recipient):
            raise UnknownRecipient(recipient)
        out: list[Message] = []
        with self._lock:
            box = self._mailboxes.setdefault(recipient, deque())
            while box and len(out) < max_messages:
                out.append(box.popleft())
        return out

    def poll_from(self, recipient: str, senders: set[str], max_messages: int = 50) -> list[Message]:
        """Remove only messages from the given senders (order preserved).

        Per-(sender, recipient) FIFO is unaffected for other senders; used
        by protocol code that owns a specific conversation (review rounds).
        """
        if not self.chart.is_registered(recipient):
            raise UnknownRecipient(recipient)
        out: list[Message] = []
        with self._lock:
            box = self._mailboxes.setdefault(recipient, deque())
            keep: deque[Message] = deque()
            while box:
                m = box.popleft()
                if m.sender in senders and len(out) < max_messages:
                    out.append(m)
                else:
                    keep.append(m)
            self._mailboxes[recipient] = keep
        return out

    def peek_count(self, recipient: str) -> int:
        with self._lock:
            return len(self._mailboxes.get(recipient, ()))

    def escalate(self, sender: str, body: str, attachments: list[str] | None = None) -> str:
        """Escalate to the sender's parent.

        A project coordinator escalating to the user produces an Alert, the
        end of the escalation pathway.
        """
        if not self.chart.is_registered(sender) or sender == USER:
            raise UnknownSender(sender)
        parent = self.chart.parent_of(sender)
        kind = "Alert" if parent == USER else "Escalation"
        return self.send(sender, parent, kind, body, attachments=attachments)

    # -- log ---------------------------------------------------------------

    @property
    def log(self) -> list[Message]:
        with self._lock:
            return list(self._log)

    def sent_count(self) -> int:
        with self._lock:
            return len(self._log)

    def enqueued_count(self) -> int:
        with self._lock:
            return sum(len(b) for b in self._mailboxes.values())

    def flush_log(self, workspace, author: str = "bus") -> bool:
        """Mirror the full send log to ``bus/log.jsonl`` in the workspace.

        Writes a new version only when messages were sent since the last
        flush, keeping the stored history append-only per the log order.
        """
        with self._lock:
            if len(self._log) == self._flushed:
                return False
            payload = "\n".join(
                json.dumps(m.to_dict(), sort_keys=True) for m in self._log
            ) + "\n"
            self._flushed = len(self._log)
        workspace.write_file(BUS_LOG_PATH, payload.encode("utf-8"), author=author)
        return True

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        with self._lock:
            return {
                "chart": self.chart.to_dict(),
                "mailboxes": {
                    k: [m.to_dict() for m in v] for k, v in self._mailboxes.items()
                },
                "seq": [[s, r, n] for (s, r), n in self._seq.items()],
                "log": [m.to_dict() for m in self._log],
                "next_id": self._next_id,
                "flushed": self._flushed,
            }

    @classmethod
    def from_dict(
        cls,
        d: dict,
        clock: LogicalClock | None = None,
        attachment_exists: Callable[[str], bool] | None = None,
    ) -> "MessageBus":
        bus = cls(OrgChart.from_dict(d["chart"]), clock=clock, attachment_exists=attachment_exists)
        bus._mailboxes = {
            k: deque(Message.from_dict(m) for m in v) for k, v in d["mailboxes"].items()
        }
        bus._seq = {(s, r): n for s, r, n in d["seq"]}
        bus._log = [Message.from_dict(m) for m in d["log"]]
        bus._next_id = d["next_id"]
        bus._flushed = d["flushed"]
        return bus
