#!/usr/bin/env python3
"""Record the S1 run as a frontend fixture (events + API snapshots).

Run from the repo root after changing the scenario; the output is
checked in so the UI tests never need a live backend.
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from atelier.report import ReportStore, render  # noqa: E402
from s1 import run_s1  # noqa: E402

OUT = Path(__file__).resolve().parent.parent / "frontend" / "fixtures"


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        engine = run_s1(Path(tmp) / "s1")
        OUT.mkdir(parents=True, exist_ok=True)

        (OUT / "s1.events.json").write_text(
            json.dumps(engine.events, indent=2, sort_keys=True) + "\n")

        summary = engine.project_summary()
        store = ReportStore(engine.workspace)
        snapshot = {
            "project": summary,
            "workstreams": [engine.workstream_summary(w)
                            for w in engine.project.workstream_order],
            "reports": {
                w: json.loads(render(store.load(w), "structured"))
                for w in engine.project.workstream_order
            },
            "trajectories": {
                w: engine.trajectory(engine.workstreams[w].coordinator)
                for w in engine.project.workstream_order
            },
            "reviews": {
                w: engine.review_summary(w)
                for w in engine.project.workstream_order
            },
        }
        (OUT / "s1.snapshot.json").write_text(
            json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
        print(f"wrote {OUT}/s1.events.json ({len(engine.events)} events)")
        print(f"wrote {OUT}/s1.snapshot.json")


if __name__ == "__main__":
    main()
