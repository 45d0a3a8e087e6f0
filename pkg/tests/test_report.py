from __future__ import annotations

import random

import pytest

from atelier.errors import (
    BadLocator,
    DanglingAnchor,
    ReportNotFound,
    UnknownBlock,
    VersionConflict,
)
from atelier.report import (
    Block,
    MarginNote,
    Reference,
    Report,
    ReportStore,
    apply_delta,
    attach_note,
    blocking_defects,
    normalized_text,
    parse_report,
    render,
    validate_report,
)
from atelier.workspace import Workspace


@pytest.fixture
def store(tmp_path):
    return ReportStore(Workspace(tmp_path, project_id="p"))


def test_append_paragraph_to_empty_report(store):
    store.create("ws1", author="ws1-coord")
    version = store.update("ws1", {"add_blocks": [{"kind": "paragraph", "text": "hello"}]},
                           author="ws1-coord")
    assert version == 2
    report = store.load("ws1")
    assert len(report.blocks) == 1
    assert report.blocks[0].id == "b1"


def test_edit_unknown_block(store):
    store.create("ws1", author="c")
    with pytest.raises(UnknownBlock):
        store.update("ws1", {"edit_blocks": [{"id": "b9", "text": "x"}]}, author="c")


def test_delete_block_flags_annotation_as_dangling(store):
    store.create("ws1", author="c")
    store.update("ws1", {"add_blocks": [{"kind": "paragraph", "text": "the method"}]}, author="c")
    store.annotate("ws1", "b1", (0, 3), "note on method", "internal_file",
                   "ws1/report.json", author="c")
    store.update("ws1", {"delete_blocks": ["b1"]}, author="c")
    report = store.load("ws1")
    assert report.blocks == []
    assert len(report.annotations) == 1
    assert report.annotations[0].dangling is True


def test_single_writer_conflict_propagates(store):
    store.create("ws1", author="c")
    # simulate a competing writer bumping the version underneath
    store.workspace.write_file("ws1/report.json", render(store.load("ws1")), author="other")
    report = store.load("ws1")
    with pytest.raises(VersionConflict):
        store.workspace.write_file("ws1/report.json", render(report), author="c",
                                   expected_version=1)


def test_report_not_found(store):
    with pytest.raises(ReportNotFound):
        store.load("ws-none")


# --- margin notes ----------------------------------------------------------


def test_user_suggestion_note_accepted(store):
    store.create("ws1", author="c")
    store.update("ws1", {"add_blocks": [{"kind": "paragraph", "text": "We prune the search tree."}]},
                 author="c")
    store.workspace.write_file("bus/log.jsonl", b"{}", author="bus")
    note_id = store.annotate(
        "ws1", "b1", (0, 8),
        "Pruning heuristic derived from user suggestion; baseline bound sourced from uploaded paper",
        "user_suggestion", "bus/log.jsonl", author="c",
    )
    assert note_id == "n1"
    note = store.load("ws1").annotations[0]
    assert note.kind == "user_suggestion"
    assert note.locator_version == 1  # pinned


def test_note_to_nonexistent_block(store):
    store.create("ws1", author="c")
    with pytest.raises(DanglingAnchor):
        store.annotate("ws1", "b404", (0, 1), "x", "external_literature",
                       "https://example.org", author="c")


def test_note_span_out_of_range():
    report = Report(workstream_id="ws1", blocks=[Block("b1", "paragraph", "short")])
    with pytest.raises(DanglingAnchor):
        attach_note(report, "b1", (0, 99), "x", "external_literature", "https://example.org")


def test_internal_note_records_pinned_version(store):
    store.create("ws1", author="c")
    store.update("ws1", {"add_blocks": [{"kind": "paragraph", "text": "cites code"}]}, author="c")
    store.workspace.write_file("ws1/code/lib.py", b"# v1", author="c")
    store.workspace.write_file("ws1/code/lib.py", b"# v2", author="c")
    store.annotate("ws1", "b1", (0, 5), "see implementation", "internal_file",
                   "ws1/code/lib.py", author="c")
    assert store.load("ws1").annotations[0].locator_version == 2


def test_internal_note_requires_existing_path(store):
    store.create("ws1", author="c")
    store.update("ws1", {"add_blocks": [{"kind": "paragraph", "text": "text"}]}, author="c")
    with pytest.raises(BadLocator):
        store.annotate("ws1", "b1", (0, 2), "x", "internal_file", "never/written", author="c")


def test_external_note_requires_wellformed_uri():
    report = Report(workstream_id="ws1", blocks=[Block("b1", "paragraph", "text")])
    with pytest.raises(BadLocator):
        attach_note(report, "b1", (0, 2), "x", "external_literature", "not a uri")


def test_anchor_spans_use_normalized_text():
    assert normalized_text("  a   b\n c ") == "a b c"
    report = Report(workstream_id="ws1",
                    blocks=[Block("b1", "paragraph", "  spaced    out   text ")])
    note = attach_note(report, "b1", (0, len("spaced out text")), "n",
                       "external_literature", "https://example.org")
    assert note.span == (0, 15)


# --- validation ------------------------------------------------------------


def test_empty_incremental_report_has_no_blocking_defects():
    report = Report(workstream_id="ws1")
    assert blocking_defects(validate_report(report, path_exists=lambda p: True)) == []


def test_final_candidate_without_exposition_blocks():
    report = Report(workstream_id="ws1", blocks=[Block("b1", "paragraph", "result")])
    defects = validate_report(report, path_exists=lambda p: True, final=True)
    assert any(d.code == "missing_exposition" and d.severity == "blocking" for d in defects)


def test_internal_ref_to_unwritten_path_blocks():
    report = Report(
        workstream_id="ws1",
        blocks=[Block("b1", "exposition", "how we got here")],
        references=[Reference(internal_path="never/written", internal_version=1)],
    )
    defects = validate_report(report, path_exists=lambda p: False, final=True)
    assert any(d.code == "dangling_internal_reference" and d.severity == "blocking"
               for d in defects)


def test_dangling_annotation_blocks():
    report = Report(
        workstream_id="ws1",
        blocks=[Block("b1", "exposition", "x")],
        annotations=[MarginNote("n1", "gone", (0, 1), "t", "reviewer", "ws1/review.json")],
    )
    defects = validate_report(report, path_exists=lambda p: True)
    assert any(d.code == "dangling_annotation" and d.severity == "blocking" for d in defects)


def test_unverified_external_ref_is_minor():
    report = Report(
        workstream_id="ws1",
        references=[Reference(uri="https://example.org/p", title="P")],
    )
    defects = validate_report(report, path_exists=lambda p: True)
    assert [("unverified_external_reference", "minor")] == [(d.code, d.severity) for d in defects]


def test_empty_proof_block_is_minor():
    report = Report(workstream_id="ws1", blocks=[Block("b1", "proof", "  ")])
    defects = validate_report(report, path_exists=lambda p: True)
    assert [("empty_proof_block", "minor")] == [(d.code, d.severity) for d in defects]


# --- rendering ---------------------------------------------------------------


def sample_report() -> Report:
    report = Report(workstream_id="ws1")
    apply_delta(report, {
        "add_blocks": [
            {"kind": "heading", "text": "Upper bounds"},
            {"kind": "exposition", "text": "We began with a survey of prior bounds."},
            {"kind": "theorem", "text": "The area is at most 2.37."},
            {"kind": "proof", "text": "By exhaustion over corner traversals."},
            {"kind": "code", "text": "print('bound')"},
        ],
        "references": [
            {"external": {"uri": "https://example.org/p", "title": "P", "verified": True}},
        ],
    })
    attach_note(report, "b2", (0, 8), "from survey", "external_literature", "https://example.org/p")
    return report


def test_structured_round_trip_identity():
    report = sample_report()
    assert parse_report(render(report, "structured")) == report


def test_structured_render_is_deterministic():
    assert render(sample_report(), "structured") == render(sample_report(), "structured")


def test_markdown_of_empty_report_is_title_only():
    md = render(Report(workstream_id="ws1"), "markdown").decode()
    assert md == "# Working paper: ws1\n"


def test_markdown_places_margin_notes_beside_blocks():
    md = render(sample_report(), "markdown").decode()
    lines = md.splitlines()
    anchor = lines.index("We began with a survey of prior bounds.")
    assert lines[anchor + 1].startswith("> [margin] from survey")


def test_latex_render_contains_marginnote_and_refs():
    tex = render(sample_report(), "latex").decode()
    assert r"\marginnote{from survey" in tex
    assert r"\href{https://example.org/p}" in tex
    assert tex.startswith(r"\documentclass{article}")


def test_unknown_format():
    with pytest.raises(ValueError):
        render(Report(workstream_id="w"), "pdf")


# --- property: round trip over generated reports -----------------------------


def random_report(rng: random.Random) -> Report:
    report = Report(workstream_id=f"ws{rng.randint(1, 9)}")
    kinds = sorted(["heading", "paragraph", "theorem", "proof", "code",
                    "attachment_ref", "exposition"])
    alphabet = "ab \n\t\"\\{}%$#_^~&é∀🙂"
    for _ in range(rng.randint(0, 6)):
        text = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 30)))
        apply_delta(report, {"add_blocks": [{"kind": rng.choice(kinds), "text": text}]})
    for b in list(report.blocks):
        if rng.random() < 0.3:
            limit = len(normalized_text(b.text))
            start = rng.randint(0, limit)
            end = rng.randint(start, limit)
            note = MarginNote(
                id=f"n{report.next_note_id}", block_id=b.id, span=(start, end),
                text="note", kind="external_literature", locator="https://example.org/x",
                dangling=rng.random() < 0.2, superseded=rng.random() < 0.2,
            )
            report.next_note_id += 1
            report.annotations.append(note)
    if rng.random() < 0.5:
        report.references.append(Reference(internal_path="a/b", internal_version=1))
    if rng.random() < 0.5:
        report.references.append(Reference(uri="https://example.org/y", title="t",
                                           verified=rng.random() < 0.5))
    report.status = rng.choice(["Incremental", "Final"])
    return report


def test_round_trip_holds_for_1000_generated_reports():
    rng = random.Random(20240811)
    for _ in range(1000):
        report = random_report(rng)
        assert parse_report(render(report, "structured")) == report
