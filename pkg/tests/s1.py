"""The S1 walkthrough scenario: shared driver used by several suites.

S1 exercises the full protocol: onboarding dialogue, goal approval,
three workstreams (one completes via unanimous review, one stalls and
ends Unfinished with a user alert, one stays Running), a mid-run user
steering message relayed as an instruction, and a margin-annotated
report. The same step list drives the engine directly and the HTTP API,
and can be split at any boundary for crash-restart checks.
"""

from __future__ import annotations

from pathlib import Path

from atelier.engine import Engine
from atelier.model import load_script_file
from atelier.tools import FixtureToolProvider

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
S1_FIXTURE = FIXTURES / "s1.fixture.json"
S1_TOOLFIX = FIXTURES / "s1.toolfix.json"

S1_BRIEF = (
    "I'd like to set up a project to prove upper bounds on the moving sofa "
    "variants discussed in the attached notes."
)
S1_ATTACHMENTS = [
    {
        "name": "ambidextrous-sofa-notes.txt",
        "text": "Notes: lower bound 2.2195 for the ambidextrous sofa; "
                "upper bounds for both variants remain open.",
    }
]
S1_CLARIFICATION = "Focus on both variants; any rigorous upper bound counts."
S1_STEERING = "Try a topological pruning heuristic for the corner sweep."

# the eight rows Fig-3-style trajectories must land on exactly
S1_EXPECTED_TRAJECTORY = [
    "literature search",
    "report update",
    "web query",
    "report update",
    "instruction received",
    "report update",
    "submit for review",
    "mark complete",
]

S1_STEPS: list[tuple] = [
    ("start",),
    ("tick",),                     # coordinator asks a clarifying question
    ("chat", S1_CLARIFICATION),
    ("tick",),                     # goals proposed
    ("tick",),                     # "please approve" chat reply
    ("approve_all",),
    ("tick",),                     # ws1 created
    ("tick",),                     # ws2 created; ws1 literature search
    ("tick",),                     # ws3 created; ws1+ws2 report updates
    ("tick",),                     # ws1 web query; ws2 submit -> round 1 reject
    ("tick",),                     # ws1 update; ws2 revision; ws3 waits
    ("chat", S1_STEERING),
    ("tick",),                     # relay; ws1 instruction+update; ws2 stall -> Unfinished
    ("tick",),                     # alert to user; ws1 submit -> approved
    ("tick",),                     # ws1 mark complete -> Completed
    ("tick",),                     # coordinator reports completion
    ("tick",),                     # quiet
]


def s1_engine(data_dir, project_id: str = "p1") -> Engine:
    return Engine(
        data_dir,
        project_id=project_id,
        backend=load_script_file(str(S1_FIXTURE)),
        provider=FixtureToolProvider.from_file(str(S1_TOOLFIX)),
    )


def apply_step(engine: Engine, step: tuple) -> None:
    kind = step[0]
    if kind == "start":
        engine.start_project(S1_BRIEF, attachments=S1_ATTACHMENTS)
    elif kind == "tick":
        engine.tick()
    elif kind == "chat":
        engine.handle_user_message(step[1])
    elif kind == "approve_all":
        engine.approve_goals({g.id: "approve" for g in engine.project.goals})
    else:
        raise ValueError(f"unknown step: {step}")


def run_s1(data_dir, upto: int | None = None, engine: Engine | None = None) -> Engine:
    """Run S1 (or its first ``upto`` steps) in process; returns the engine."""
    if engine is None:
        engine = s1_engine(data_dir)
    for step in S1_STEPS[:upto]:
        apply_step(engine, step)
    return engine


def terminal_state(engine: Engine) -> dict:
    """The comparable terminal state: project + reports + event log."""
    report_path = "ws1/report.json"
    return {
        "summary": engine.project_summary(),
        "events": engine.events,
        "report": engine.workspace.read_file(report_path).decode("utf-8"),
        "report_versions": engine.workspace.latest_version(report_path),
    }
