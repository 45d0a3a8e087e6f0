"""Structured working-paper documents with margin notes and references.

The canonical form is a JSON document of ordered blocks plus margin
annotations carrying provenance and references (internal workspace
paths pinned to a version, or external uris). Markdown and LaTeX are
projections for humans; the structured render is lossless and
byte-deterministic, which keeps every anchor machine-checkable.

A report lives in the workspace at ``<workstream>/report.json`` and is
only ever written by its workstream coordinator.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import BadLocator, DanglingAnchor, NotFound, ReportNotFound, UnknownBlock

BLOCK_KINDS = frozenset(
    {"heading", "paragraph", "theorem", "proof", "code", "attachment_ref", "exposition"}
)
NOTE_KINDS = frozenset(
    {"user_suggestion", "external_literature", "internal_file", "computation", "reviewer"}
)
# provenance kinds whose locator must resolve to a workspace path
WORKSPACE_LOCATOR_KINDS = frozenset(
    {"user_suggestion", "internal_file", "computation", "reviewer"}
)

_URI_RE = re.compile(r"^https?://\S+$")


def normalized_text(text: str) -> str:
    """Anchor-stable form of a block's text: trimmed and single-spaced."""
    return " ".join(text.split())


@dataclass
class Block:
    id: str
    kind: str
    text: str

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "text": self.text}

    @classmethod
    def from_dict(cls, d: dict) -> "Block":
        return cls(id=d["id"], kind=d["kind"], text=d["text"])


@dataclass
class MarginNote:
    id: str
    block_id: str
    span: tuple[int, int]  # char span over the block's normalized text
    text: str
    kind: str  # provenance kind
    locator: str  # uri or workspace path
    locator_version: Optional[int] = None  # pinned for workspace locators
    dangling: bool = False
    superseded: bool = False

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "block_id": self.block_id,
            "span": list(self.span),
            "text": self.text,
            "kind": self.kind,
            "locator": self.locator,
            "locator_version": self.locator_version,
            "dangling": self.dangling,
            "superseded": self.superseded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarginNote":
        return cls(
            id=d["id"],
            block_id=d["block_id"],
            span=(int(d["span"][0]), int(d["span"][1])),
            text=d["text"],
            kind=d["kind"],
            locator=d["locator"],
            locator_version=d.get("locator_version"),
            dangling=bool(d.get("dangling", False)),
            superseded=bool(d.get("superseded", False)),
        )


@dataclass
class Reference:
    """Internal {path, version} or external {uri, title, verified}."""

    internal_path: Optional[str] = None
    internal_version: Optional[int] = None
    uri: Optional[str] = None
    title: Optional[str] = None
    verified: bool = False

    @property
    def is_internal(self) -> bool:
        return self.internal_path is not None

    def to_dict(self) -> dict:
        if self.is_internal:
            return {"internal": {"path": self.internal_path, "version": self.internal_version}}
        return {"external": {"uri": self.uri, "title": self.title, "verified": self.verified}}

    @classmethod
    def from_dict(cls, d: dict) -> "Reference":
        if "internal" in d:
            return cls(
                internal_path=d["internal"]["path"],
                internal_version=d["internal"].get("version"),
            )
        ext = d["external"]
        return cls(uri=ext["uri"], title=ext.get("title"), verified=bool(ext.get("verified", False)))


@dataclass
class Defect:
    code: str
    severity: str  # blocking | minor
    location: str
    detail: str

    def to_dict(self) -> dict:
        return {
            "code": self.code,
            "severity": self.severity,
            "location": self.location,
            "detail": self.detail,
        }


@dataclass
class Report:
    workstream_id: str
    blocks: list[Block] = field(default_factory=list)
    annotations: list[MarginNote] = field(default_factory=list)
    references: list[Reference] = field(default_factory=list)
    status: str = "Incremental"
    next_block_id: int = 1
    next_note_id: int = 1

    def block_by_id(self, block_id: str) -> Block:
        for b in self.blocks:
            if b.id == block_id:
                return b
        raise UnknownBlock(block_id)

    def has_block(self, block_id: str) -> bool:
        return any(b.id == block_id for b in self.blocks)

    def to_dict(self) -> dict:
        return {
            "workstream_id": self.workstream_id,
            "status": self.status,
            "blocks": [b.to_dict() for b in self.blocks],
            "annotations": [n.to_dict() for n in self.annotations],
            "references": [r.to_dict() for r in self.references],
            "next_block_id": self.next_block_id,
            "next_note_id": self.next_note_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        return cls(
            workstream_id=d["workstream_id"],
            blocks=[Block.from_dict(b) for b in d["blocks"]],
            annotations=[MarginNote.from_dict(n) for n in d["annotations"]],
            references=[Reference.from_dict(r) for r in d["references"]],
            status=d.get("status", "Incremental"),
            next_block_id=int(d.get("next_block_id", 1)),
            next_note_id=int(d.get("next_note_id", 1)),
        )


# --------------------------------------------------------------------------
# delta application


def apply_delta(report: Report, delta: dict) -> Report:
    """Apply a block delta in place.

    Recognized keys: add_blocks, edit_blocks, delete_blocks, annotations,
    references. Edited/deleted block ids must exist. Annotations whose
    anchor a deletion leaves dangling are flagged, never dropped.
    """
    for spec in delta.get("edit_blocks", []):
        block = report.block_by_id(spec["id"])  # raises UnknownBlock
        if "text" in spec:
            block.text = spec["text"]
        if "kind" in spec:
            if spec["kind"] not in BLOCK_KINDS:
                raise UnknownBlock(f"bad block kind: {spec['kind']}")
            block.kind = spec["kind"]

    for block_id in delta.get("delete_blocks", []):
        report.block_by_id(block_id)  # raises UnknownBlock
        report.blocks = [b for b in report.blocks if b.id != block_id]
        for note in report.annotations:
            if note.block_id == block_id:
                note.dangling = True

    for spec in delta.get("add_blocks", []):
        kind = spec.get("kind", "paragraph")
        if kind not in BLOCK_KINDS:
            raise UnknownBlock(f"bad block kind: {kind}")
        report.blocks.append(Block(id=f"b{report.next_block_id}", kind=kind,
                                   text=spec.get("text", "")))
        report.next_block_id += 1

    for spec in delta.get("references", []):
        report.references.append(Reference.from_dict(spec))

    # re-check spans after edits: anchors that no longer fit are flagged
    for note in report.annotations:
        if note.dangling:
            continue
        if not report.has_block(note.block_id):
            note.dangling = True
            continue
        limit = len(normalized_text(report.block_by_id(note.block_id).text))
        if note.span[1] > limit:
            note.dangling = True

    return report


def attach_note(
    report: Report,
    block_id: str,
    span: tuple[int, int],
    text: str,
    kind: str,
    locator: str,
    resolve_path: Callable[[str], Optional[int]] | None = None,
) -> MarginNote:
    """Validate and append a margin note; returns it with an assigned id.

    ``resolve_path`` maps a workspace path to its latest version (or None);
    it is required to pin internal locators.
    """
    if kind not in NOTE_KINDS:
        raise BadLocator(f"unknown provenance kind: {kind}")
    if not locator:
        raise BadLocator("locator must be non-empty")
    if not report.has_block(block_id):
        raise DanglingAnchor(block_id)
    limit = len(normalized_text(report.block_by_id(block_id).text))
    start, end = int(span[0]), int(span[1])
    if not (0 <= start <= end <= limit):
        raise DanglingAnchor(f"span {span} out of range 0..{limit} for block {block_id}")

    version: Optional[int] = None
    if kind in WORKSPACE_LOCATOR_KINDS:
        if resolve_path is None:
            raise BadLocator("workspace locator requires a path resolver")
        version = resolve_path(locator)
        if version is None:
            raise BadLocator(f"workspace path does not resolve: {locator}")
    else:
        if not _URI_RE.match(locator):
            raise BadLocator(f"not a well-formed uri: {locator}")

    note = MarginNote(
        id=f"n{report.next_note_id}",
        block_id=block_id,
        span=(start, end),
        text=text,
        kind=kind,
        locator=locator,
        locator_version=version,
    )
    report.next_note_id += 1
    report.annotations.append(note)
    return note


# --------------------------------------------------------------------------
# validation


def validate_report(
    report: Report,
    path_exists: Callable[[str], bool] | None = None,
    final: bool | None = None,
) -> list[Defect]:
    """Total validator; returns defects, never raises.

    Severity rules: missing exposition blocks only when validating for
    Final status; dangling internal references and dangling annotations
    always; unverified external references and empty proofs are minor.
    """
    if final is None:
        final = report.status == "Final"
    defects: list[Defect] = []

    if final and not any(b.kind == "exposition" for b in report.blocks):
        defects.append(
            Defect(
                "missing_exposition",
                "blocking",
                "global",
                "no exposition block describing the process behind the outcome",
            )
        )

    for i, ref in enumerate(report.references):
        loc = f"references[{i}]"
        if ref.is_internal:
            if path_exists is not None and not path_exists(ref.internal_path or ""):
                defects.append(
                    Defect(
                        "dangling_internal_reference",
                        "blocking",
                        loc,
                        f"internal reference to unwritten path: {ref.internal_path}",
                    )
                )
        else:
            if not ref.verified:
                defects.append(
                    Defect(
                        "unverified_external_reference",
                        "minor",
                        loc,
                        f"external reference never fetched: {ref.uri}",
                    )
                )

    for note in report.annotations:
        anchored = report.has_block(note.block_id)
        if anchored:
            limit = len(normalized_text(report.block_by_id(note.block_id).text))
            anchored = note.span[1] <= limit
        if note.dangling or not anchored:
            defects.append(
                Defect(
                    "dangling_annotation",
                    "blocking",
                    note.id,
                    f"annotation anchor no longer resolves (block {note.block_id})",
                )
            )

    for b in report.blocks:
        if b.kind == "proof" and not b.text.strip():
            defects.append(Defect("empty_proof_block", "minor", b.id, "proof block has no content"))

    return defects


def blocking_defects(defects: list[Defect]) -> list[Defect]:
    return [d for d in defects if d.severity == "blocking"]


# --------------------------------------------------------------------------
# rendering


def render(report: Report, fmt: str = "structured") -> bytes:
    """Render to structured JSON, markdown, or LaTeX (all deterministic)."""
    if fmt == "structured":
        return (json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n").encode("utf-8")
    if fmt == "markdown":
        return _render_markdown(report).encode("utf-8")
    if fmt == "latex":
        return _render_latex(report).encode("utf-8")
    raise ValueError(f"unknown render format: {fmt}")


def parse_report(data: bytes | str) -> Report:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return Report.from_dict(json.loads(data))


def _notes_for(report: Report, block_id: str) -> list[MarginNote]:
    return [n for n in report.annotations if n.block_id == block_id and not n.dangling]


def _render_markdown(report: Report) -> str:
    lines = [f"# Working paper: {report.workstream_id}", ""]
    if report.status == "Final":
        lines += ["_Status: final_", ""]
    for b in report.blocks:
        if b.kind == "heading":
            lines.append(f"## {b.text}")
        elif b.kind == "theorem":
            lines.append(f"**Theorem.** {b.text}")
        elif b.kind == "proof":
            lines.append(f"*Proof.* {b.text}")
        elif b.kind == "code":
            lines += ["```", b.text, "```"]
        elif b.kind == "attachment_ref":
            lines.append(f"[attachment: {b.text}]({b.text})")
        else:
            lines.append(b.text)
        for n in _notes_for(report, b.id):
            flag = " (superseded)" if n.superseded else ""
            lines.append(f"> [margin{flag}] {n.text} ({n.kind}: {n.locator})")
        lines.append("")
    if report.references:
        lines.append("## References")
        for r in report.references:
            if r.is_internal:
                lines.append(f"- workspace: `{r.internal_path}` (v{r.internal_version})")
            else:
                check = "verified" if r.verified else "unverified"
                lines.append(f"- [{r.title or r.uri}]({r.uri}) ({check})")
        lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


def _latex_escape(text: str) -> str:
    replacements = {
        "\\": r"\textbackslash{}",
        "&": r"\&",
        "%": r"\%",
        "$": r"\$",
        "#": r"\#",
        "_": r"\_",
        "{": r"\{",
        "}": r"\}",
        "~": r"\textasciitilde{}",
        "^": r"\textasciicircum{}",
    }
    return "".join(replacements.get(c, c) for c in text)


def _render_latex(report: Report) -> str:
    out = [
        r"\documentclass{article}",
        r"\usepackage{marginnote,hyperref}",
        r"\begin{document}",
        rf"\title{{Working paper: {_latex_escape(report.workstream_id)}}}",
        r"\maketitle",
        "",
    ]
    for b in report.blocks:
        text = _latex_escape(b.text)
        if b.kind == "heading":
            out.append(rf"\section{{{text}}}")
        elif b.kind == "theorem":
            out.append(rf"\textbf{{Theorem.}} {text}")
        elif b.kind == "proof":
            out.append(rf"\emph{{Proof.}} {text}")
        elif b.kind == "code":
            out += [r"\begin{verbatim}", b.text, r"\end{verbatim}"]
        elif b.kind == "attachment_ref":
            out.append(rf"\texttt{{{text}}}")
        else:
            out.append(text)
        for n in _notes_for(report, b.id):
            out.append(rf"\marginnote{{{_latex_escape(n.text)} ({_latex_escape(n.locator)})}}")
        out.append("")
    if report.references:
        out.append(r"\section*{References}")
        out.append(r"\begin{itemize}")
        for r in report.references:
            if r.is_internal:
                out.append(rf"\item workspace \texttt{{{_latex_escape(r.internal_path or '')}}} (v{r.internal_version})")
            else:
                out.append(rf"\item \href{{{r.uri}}}{{{_latex_escape(r.title or r.uri or '')}}}")
        out.append(r"\end{itemize}")
    out.append(r"\end{document}")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# workspace binding


def report_path(workstream_id: str) -> str:
    return f"{workstream_id}/report.json"


class ReportStore:
    """Reads and writes structured reports through the workspace.

    The workspace's expected_version check enforces the single-writer
    discipline; VersionConflict propagates to the caller for retry.
    """

    def __init__(self, workspace):
        self.workspace = workspace

    def create(self, workstream_id: str, author: str) -> int:
        report = Report(workstream_id=workstream_id)
        fv = self.workspace.write_file(
            report_path(workstream_id), render(report, "structured"), author=author,
            expected_version=0,
        )
        return fv.version

    def load(self, workstream_id: str, version: int | None = None) -> Report:
        try:
            raw = self.workspace.read_file(report_path(workstream_id), version)
        except NotFound as e:
            raise ReportNotFound(workstream_id) from e
        return parse_report(raw)

    def latest_version(self, workstream_id: str) -> int:
        try:
            return self.workspace.latest_version(report_path(workstream_id))
        except NotFound as e:
            raise ReportNotFound(workstream_id) from e

    def _commit(self, report: Report, author: str, expected_version: int | None) -> int:
        fv = self.workspace.write_file(
            report_path(report.workstream_id),
            render(report, "structured"),
            author=author,
            expected_version=expected_version,
        )
        return fv.version

    def update(self, workstream_id: str, delta: dict, author: str) -> int:
        """Apply a delta and commit a new version; returns the version."""
        current = self.latest_version(workstream_id)
        report = self.load(workstream_id)
        apply_delta(report, delta)
        return self._commit(report, author, expected_version=current)

    def annotate(
        self,
        workstream_id: str,
        block_id: str,
        span: tuple[int, int],
        text: str,
        kind: str,
        locator: str,
        author: str,
    ) -> str:
        """Attach a margin note and commit; returns the note id."""
        current = self.latest_version(workstream_id)
        report = self.load(workstream_id)

        def resolve(path: str) -> Optional[int]:
            try:
                return self.workspace.latest_version(path)
            except NotFound:
                return None

        note = attach_note(report, block_id, span, text, kind, locator, resolve_path=resolve)
        self._commit(report, author, expected_version=current)
        return note.id

    def set_status(self, workstream_id: str, status: str, author: str) -> int:
        current = self.latest_version(workstream_id)
        report = self.load(workstream_id)
        report.status = status
        return self._commit(report, author, expected_version=current)
