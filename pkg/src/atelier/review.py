"""Iterative multi-reviewer approval protocol with stall detection.

A session holds a fixed reviewer set for its whole life. Rounds are
appended until every reviewer approves (Approved) or the session stalls
(Stalled): either the round budget is exhausted, or the set of open
issues, tracked by stable ids, fails to shrink across consecutive
rounds: the revise/reject loop is going nowhere and continuing just
burns compute.

Issue identity is a hash of (location, normalized text) so "the same
complaint again" is mechanically detectable. Session state is a plain
value the engine persists at ``<workstream>/review.json``; the round
arithmetic below has no agent dependencies so termination can be
model-checked exhaustively.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

from .errors import NotStalled, SessionClosed

DEFAULT_N_REVIEWERS = 3
DEFAULT_MAX_ROUNDS = 5
DEFAULT_STALL_WINDOW = 2


def issue_id(location: str, text: str) -> str:
    normalized = " ".join(text.split()).lower()
    digest = hashlib.sha256(f"{location}||{normalized}".encode()).hexdigest()
    return f"i{digest[:10]}"


@dataclass(frozen=True)
class Issue:
    id: str
    severity: str  # blocking | minor
    location: str  # block id or "global"
    text: str

    @classmethod
    def make(cls, severity: str, location: str, text: str) -> "Issue":
        return cls(id=issue_id(location, text), severity=severity, location=location, text=text)

    def to_dict(self) -> dict:
        return {"id": self.id, "severity": self.severity, "location": self.location,
                "text": self.text}

    @classmethod
    def from_dict(cls, d: dict) -> "Issue":
        return cls(id=d["id"], severity=d["severity"], location=d["location"], text=d["text"])


@dataclass
class Verdict:
    approve: bool
    issues: list[Issue] = field(default_factory=list)

    def __post_init__(self):
        if self.approve and self.issues:
            raise ValueError("an approval carries no issues")
        if not self.approve and not self.issues:
            raise ValueError("a rejection carries at least one issue")

    def to_dict(self) -> dict:
        return {"approve": self.approve, "issues": [i.to_dict() for i in self.issues]}

    @classmethod
    def from_dict(cls, d: dict) -> "Verdict":
        return cls(approve=bool(d["approve"]),
                   issues=[Issue.from_dict(i) for i in d.get("issues", [])])


def approve() -> Verdict:
    return Verdict(approve=True)


def reject(*issues: Issue) -> Verdict:
    return Verdict(approve=False, issues=list(issues))


@dataclass
class ReviewRound:
    index: int  # 1-based
    report_version: int
    verdicts: dict[str, Verdict]
    open_issues: list[str]  # stable issue ids after the round, sorted

    def all_approved(self) -> bool:
        return all(v.approve for v in self.verdicts.values())

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "report_version": self.report_version,
            "verdicts": {r: v.to_dict() for r, v in sorted(self.verdicts.items())},
            "open_issues": list(self.open_issues),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReviewRound":
        return cls(
            index=int(d["index"]),
            report_version=int(d["report_version"]),
            verdicts={r: Verdict.from_dict(v) for r, v in d["verdicts"].items()},
            open_issues=list(d["open_issues"]),
        )


@dataclass
class ReviewSession:
    id: str
    workstream_id: str
    reviewers: list[str]
    max_rounds: int = DEFAULT_MAX_ROUNDS
    stall_window: int = DEFAULT_STALL_WINDOW
    rounds: list[ReviewRound] = field(default_factory=list)
    status: str = "Open"  # Open | Approved | Stalled
    pending_version: Optional[int] = None  # submitted, not yet reviewed

    def is_terminal(self) -> bool:
        return self.status in ("Approved", "Stalled")

    def issues_by_id(self) -> dict[str, Issue]:
        out: dict[str, Issue] = {}
        for rnd in self.rounds:
            for verdict in rnd.verdicts.values():
                for issue in verdict.issues:
                    out[issue.id] = issue
        return out

    def open_issue_objects(self) -> list[Issue]:
        if not self.rounds:
            return []
        by_id = self.issues_by_id()
        return [by_id[i] for i in self.rounds[-1].open_issues]

    def apply_round(self, report_version: int, verdicts: dict[str, Verdict]) -> ReviewRound:
        """Append a round and recompute status (Approved/Stalled/Open)."""
        if self.is_terminal():
            raise SessionClosed(self.id)
        if set(verdicts) != set(self.reviewers):
            raise ValueError("every reviewer has exactly one verdict per round")
        if self.rounds and report_version < self.rounds[-1].report_version:
            raise ValueError("report version may not regress between rounds")
        if len(self.rounds) >= self.max_rounds:
            raise SessionClosed(f"{self.id}: round budget exhausted")
        open_ids = sorted(
            {i.id for v in verdicts.values() if not v.approve for i in v.issues}
        )
        rnd = ReviewRound(
            index=len(self.rounds) + 1,
            report_version=report_version,
            verdicts=dict(verdicts),
            open_issues=open_ids,
        )
        self.rounds.append(rnd)
        if rnd.all_approved():
            self.status = "Approved"
        elif detect_stall(self):
            self.status = "Stalled"
        return rnd

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "workstream_id": self.workstream_id,
            "reviewers": list(self.reviewers),
            "max_rounds": self.max_rounds,
            "stall_window": self.stall_window,
            "rounds": [r.to_dict() for r in self.rounds],
            "status": self.status,
            "pending_version": self.pending_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReviewSession":
        return cls(
            id=d["id"],
            workstream_id=d["workstream_id"],
            reviewers=list(d["reviewers"]),
            max_rounds=int(d["max_rounds"]),
            stall_window=int(d.get("stall_window", DEFAULT_STALL_WINDOW)),
            rounds=[ReviewRound.from_dict(r) for r in d["rounds"]],
            status=d["status"],
            pending_version=d.get("pending_version"),
        )


def detect_stall(session: ReviewSession) -> bool:
    """True iff the session is out of rounds or issues are not shrinking.

    "Not shrinking" means the newest round's open-issue set contains the
    whole previous round's (same complaints persist, possibly with new
    ones on top) across the stall window.
    """
    if not session.rounds:
        raise ValueError("detect_stall requires at least one completed round")
    if session.status == "Approved":
        return False
    if len(session.rounds) >= session.max_rounds and not session.rounds[-1].all_approved():
        return True
    window = session.stall_window
    if len(session.rounds) >= window:
        tail = session.rounds[-window:]
        for prev, curr in zip(tail, tail[1:]):
            prev_ids, curr_ids = set(prev.open_issues), set(curr.open_issues)
            if not prev_ids or not curr_ids.issuperset(prev_ids):
                return False
        return True
    return False


def mark_stalled(session: ReviewSession) -> None:
    """Terminal transition used by the escalation path."""
    if not session.rounds or not detect_stall(session):
        raise NotStalled(session.id)
    session.status = "Stalled"


# --------------------------------------------------------------------------
# verdict parsing (reviewer message bodies -> Verdict)


def parse_verdict_body(body: str) -> Verdict:
    """Parse a reviewer's verdict message.

    Accepts a bare "APPROVE", or JSON
    ``{"verdict": "approve"|"reject", "issues": [{severity, location, text}]}``.
    Anything else is treated as a rejection whose whole text is one
    blocking issue, so a sloppy reviewer can never be read as approval.
    """
    text = body.strip()
    if text.upper().startswith("APPROVE"):
        return approve()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        return reject(Issue.make("blocking", "global", text or "empty verdict"))
    if isinstance(doc, dict) and doc.get("verdict") == "approve":
        return approve()
    issues = [
        Issue.make(i.get("severity", "blocking"), i.get("location", "global"), i["text"])
        for i in (doc.get("issues") if isinstance(doc, dict) else None) or []
        if isinstance(i, dict) and "text" in i
    ]
    if not issues:
        issues = [Issue.make("blocking", "global", text)]
    return Verdict(approve=False, issues=issues)


def review_path(workstream_id: str) -> str:
    return f"{workstream_id}/review.json"


def persist_session(session: ReviewSession, workspace, author: str) -> None:
    payload = json.dumps(session.to_dict(), indent=2, sort_keys=True).encode("utf-8")
    workspace.write_file(review_path(session.workstream_id), payload, author=author)
