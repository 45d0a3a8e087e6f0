"""Append-only, versioned, path-addressed shared file store.

Every agent reads and writes through this store; it is the durable
substrate for reports, code, search results, and failed explorations.
History is linear per path: versions are contiguous integers starting at
1 and no version is ever mutated or deleted.

On-disk layout (one store per project)::

    <root>/
      meta.json                    # digest algorithm + clock snapshot
      files/<quoted-path>/
        index.json                 # version metadata, ascending
        000001, 000002, ...        # content blobs

Paths are quoted with ``urllib.parse.quote`` so arbitrary slash-separated
names cannot collide with the store's own files. Writers use optimistic
concurrency via ``expected_version``; all operations are linearizable per
path (a single store lock keeps the implementation obvious at this scale).
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import quote, unquote

from .clock import LogicalClock
from .errors import InvalidPath, NotFound, VersionConflict, VersionOutOfRange

DIGEST_ALGORITHM = "sha256"


def normalize_path(path: str) -> str:
    """Collapse separators and validate a workspace path.

    Raises InvalidPath for empty, absolute, or '..'-containing paths.
    """
    if not isinstance(path, str) or not path.strip():
        raise InvalidPath("empty path")
    parts = [p for p in path.replace("\\", "/").split("/") if p not in ("", ".")]
    if not parts:
        raise InvalidPath(f"path has no components: {path!r}")
    if any(p == ".." for p in parts):
        raise InvalidPath(f"path may not contain '..': {path!r}")
    if path.startswith("/"):
        raise InvalidPath(f"path must be relative: {path!r}")
    return "/".join(parts)


def content_digest(content: bytes) -> str:
    return hashlib.new(DIGEST_ALGORITHM, content).hexdigest()


@dataclass(frozen=True)
class FileVersion:
    """Metadata for one immutable version of a path."""

    path: str
    version: int
    author: str
    created_at: int
    digest: str
    size: int

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "version": self.version,
            "author": self.author,
            "created_at": self.created_at,
            "digest": self.digest,
            "size": self.size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FileVersion":
        return cls(
            path=d["path"],
            version=int(d["version"]),
            author=d["author"],
            created_at=int(d["created_at"]),
            digest=d["digest"],
            size=int(d["size"]),
        )


@dataclass
class WorkspaceSnapshot:
    """Latest-version view of a project's store."""

    project_id: str
    digest_algorithm: str
    latest: dict[str, int] = field(default_factory=dict)

    @property
    def file_count(self) -> int:
        return len(self.latest)

    def to_dict(self) -> dict:
        return {
            "project_id": self.project_id,
            "digest_algorithm": self.digest_algorithm,
            "latest": dict(sorted(self.latest.items())),
            "file_count": self.file_count,
        }


class Workspace:
    """Versioned file store rooted at a directory.

    Safe for concurrent use by many agents. Reads are pure; writes append.
    """

    def __init__(self, root: str | Path, project_id: str = "", clock: LogicalClock | None = None):
        self.root = Path(root)
        self.project_id = project_id
        self.clock = clock or LogicalClock()
        self._lock = threading.RLock()
        self._files_dir = self.root / "files"
        self._files_dir.mkdir(parents=True, exist_ok=True)
        meta = self.root / "meta.json"
        if not meta.exists():
            meta.write_text(
                json.dumps({"project_id": project_id, "digest_algorithm": DIGEST_ALGORITHM}),
                encoding="utf-8",
            )

    # -- path helpers --------------------------------------------------

    def _path_dir(self, path: str) -> Path:
        return self._files_dir / quote(path, safe="")

    def _load_index(self, path: str) -> list[FileVersion]:
        index_file = self._path_dir(path) / "index.json"
        if not index_file.exists():
            raise NotFound(path)
        entries = json.loads(index_file.read_text(encoding="utf-8"))
        return [FileVersion.from_dict(e) for e in entries]

    # -- operations ------------------------------------------------------

    def write_file(
        self,
        path: str,
        content: bytes,
        author: str,
        expected_version: int | None = None,
    ) -> FileVersion:
        """Append a new version of ``path``.

        With ``expected_version`` set, the write only succeeds if it matches
        the current latest version (optimistic concurrency: re-read and retry
        on VersionConflict).
        """
        path = normalize_path(path)
        if isinstance(content, str):  # tolerate text callers
            content = content.encode("utf-8")
        with self._lock:
            pdir = self._path_dir(path)
            try:
                history = self._load_index(path)
                latest = history[-1].version
            except NotFound:
                history = []
                latest = 0
            if expected_version is not None and expected_version != latest:
                raise VersionConflict(path, expected_version, latest)
            fv = FileVersion(
                path=path,
                version=latest + 1,
                author=author,
                created_at=self.clock.tick(),
                digest=content_digest(content),
                size=len(content),
            )
            pdir.mkdir(parents=True, exist_ok=True)
            (pdir / f"{fv.version:06d}").write_bytes(content)
            history.append(fv)
            index_file = pdir / "index.json"
            tmp = pdir / "index.json.tmp"
            tmp.write_text(json.dumps([v.to_dict() for v in history]), encoding="utf-8")
            tmp.replace(index_file)
            return fv

    def read_file(self, path: str, version: int | None = None) -> bytes:
        """Return the exact bytes written at ``version`` (default: latest)."""
        path = normalize_path(path)
        with self._lock:
            history = self._load_index(path)
            if version is None:
                version = history[-1].version
            if version < 1 or version > history[-1].version:
                raise VersionOutOfRange(f"{path}: version {version} of {history[-1].version}")
            return (self._path_dir(path) / f"{version:06d}").read_bytes()

    def history(self, path: str) -> list[FileVersion]:
        """All version metadata for ``path``, ascending, content omitted."""
        path = normalize_path(path)
        with self._lock:
            return self._load_index(path)

    def latest_version(self, path: str) -> int:
        return self.history(path)[-1].version

    def exists(self, path: str) -> bool:
        try:
            self.history(path)
            return True
        except (NotFound, InvalidPath):
            return False

    def list_files(self, prefix: str = "") -> list[str]:
        """Lexicographically sorted paths starting with ``prefix``."""
        with self._lock:
            paths = [unquote(d.name) for d in self._files_dir.iterdir() if d.is_dir()]
        return sorted(p for p in paths if p.startswith(prefix))

    def snapshot(self) -> WorkspaceSnapshot:
        snap = WorkspaceSnapshot(project_id=self.project_id, digest_algorithm=DIGEST_ALGORITHM)
        with self._lock:
            for p in self.list_files():
                snap.latest[p] = self._load_index(p)[-1].version
        return snap
