"""Side-effectful capabilities agents invoke.

Code execution runs each job in a fresh private temp directory with
POSIX resource limits (cpu, address space) plus a wall-clock kill, and
output truncation at exact byte caps. "Separate machines" are modeled
as a local sandbox pool behind the same interface; a remote pool could
replace it without touching callers. Isolation between jobs is
best-effort for a single-user host: private unguessable working
directories, no inherited cwd, and proxy env stripped (full network
denial would require namespaces this harness does not assume).

Search and fetch have live providers (fetch only, allowlist-gated) and
offline fixture providers for tests. Fixture files (``.toolfix.json``)
map canonicalized queries/uris to frozen results::

    {"search": {"moving sofa upper bound": [{"title": ..., "uri": ...,
                                             "snippet": ..., "source": ...}]},
     "fetch": {"https://example.org/x": {"content_type": "text/html",
                                          "text": "..."}}}

Every invocation is appended to a ToolLog mirrored at
``tools/log.jsonl``.
"""

from __future__ import annotations

import base64
import json
import os
import shlex
import shutil
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import (
    FetchDenied,
    FetchFailed,
    ProviderUnavailable,
    QueryNotInFixture,
    RuntimeUnavailable,
    SandboxSetupFailure,
)
from .workspace import content_digest

TOOL_LOG_PATH = "tools/log.jsonl"

DEFAULT_LIMITS = {
    "wall_seconds": 30.0,
    "cpu_seconds": 20.0,
    "memory_bytes": 1024 * 1024 * 1024,
    "max_output_bytes": 256 * 1024,
}

MAX_PRODUCED_FILE_BYTES = 4 * 1024 * 1024


def default_runtimes() -> dict[str, list[str]]:
    return {"python3": [sys.executable]}


@dataclass
class CodeJob:
    runtime: str
    files: dict[str, bytes]
    entry: str
    stdin: bytes = b""
    limits: dict = field(default_factory=dict)

    def effective_limits(self) -> dict:
        merged = dict(DEFAULT_LIMITS)
        merged.update(self.limits or {})
        for k, v in merged.items():
            if v <= 0:
                raise ValueError(f"limit {k} must be positive")
        return merged


@dataclass
class CodeResult:
    exit_code: int
    stdout: bytes = b""
    stderr: bytes = b""
    stdout_truncated: bool = False
    stderr_truncated: bool = False
    produced_files: dict[str, bytes] = field(default_factory=dict)
    usage: dict = field(default_factory=dict)
    timed_out: bool = False
    error: Optional[str] = None

    def summary(self) -> dict:
        return {
            "exit_code": self.exit_code,
            "timed_out": self.timed_out,
            "stdout_truncated": self.stdout_truncated,
            "stderr_truncated": self.stderr_truncated,
            "produced_files": sorted(self.produced_files),
            "error": self.error,
        }


@dataclass(frozen=True)
class SearchHit:
    title: str
    uri: str
    snippet: str
    source: str

    def to_dict(self) -> dict:
        return {"title": self.title, "uri": self.uri, "snippet": self.snippet,
                "source": self.source}


class ToolLog:
    """Append-only record of tool invocations and result digests."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: list[dict] = []
        self._flushed = 0

    def record(self, tool: str, args_summary: str, result_digest: str, at: int = 0) -> None:
        with self._lock:
            self._entries.append(
                {"tool": tool, "args": args_summary, "result_digest": result_digest, "at": at}
            )

    @property
    def entries(self) -> list[dict]:
        with self._lock:
            return list(self._entries)

    def flush(self, workspace, author: str = "tools") -> bool:
        with self._lock:
            if len(self._entries) == self._flushed:
                return False
            payload = "\n".join(json.dumps(e, sort_keys=True) for e in self._entries) + "\n"
            self._flushed = len(self._entries)
        workspace.write_file(TOOL_LOG_PATH, payload.encode("utf-8"), author=author)
        return True

    def to_dict(self) -> dict:
        with self._lock:
            return {"entries": list(self._entries), "flushed": self._flushed}

    @classmethod
    def from_dict(cls, d: dict) -> "ToolLog":
        log = cls()
        log._entries = list(d.get("entries", []))
        log._flushed = int(d.get("flushed", 0))
        return log


# --------------------------------------------------------------------------
# code sandbox


class SandboxPool:
    """Runs code jobs in isolated temp directories with enforced limits."""

    def __init__(
        self,
        runtimes: dict[str, list[str]] | None = None,
        max_concurrency: int = 4,
        allowlisted_binaries: set[str] | None = None,
    ):
        self.runtimes = runtimes if runtimes is not None else default_runtimes()
        self.max_concurrency = max_concurrency
        self.allowlisted_binaries = allowlisted_binaries or set()
        self._active = 0
        self._peak = 0
        self._gate = threading.BoundedSemaphore(max(1, max_concurrency))
        self._stats_lock = threading.Lock()

    @property
    def peak_concurrency(self) -> int:
        return self._peak

    def _track_start(self) -> None:
        with self._stats_lock:
            self._active += 1
            self._peak = max(self._peak, self._active)

    def _track_stop(self) -> None:
        with self._stats_lock:
            self._active -= 1

    def _validate(self, job: CodeJob) -> list[str]:
        if job.runtime not in self.runtimes:
            raise RuntimeUnavailable(job.runtime)
        argv = shlex.split(job.entry)
        if not argv:
            raise ValueError("empty entry command line")
        if argv[0] not in job.files and argv[0] not in self.allowlisted_binaries:
            raise ValueError(f"entry {argv[0]!r} is not a job file or allowlisted binary")
        return argv

    def execute_code(self, job: CodeJob) -> CodeResult:
        argv = self._validate(job)
        limits = job.effective_limits()
        with self._gate:
            self._track_start()
            try:
                return self._run(job, argv, limits)
            finally:
                self._track_stop()

    def execute_parallel(self, jobs: list[CodeJob], max_concurrency: int | None = None) -> list[CodeResult]:
        """Run jobs concurrently; results align positionally with jobs.

        Per-job failures are embedded in their result and never abort
        siblings.
        """
        from concurrent.futures import ThreadPoolExecutor

        if max_concurrency is None:
            max_concurrency = self.max_concurrency
        if max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")

        def run_one(job: CodeJob) -> CodeResult:
            try:
                return self.execute_code(job)
            except Exception as e:  # embed, never propagate
                return CodeResult(exit_code=-1, error=f"{type(e).__name__}: {e}")

        pool_size = min(max_concurrency, max(1, len(jobs)))
        with ThreadPoolExecutor(max_workers=pool_size) as pool:
            return list(pool.map(run_one, jobs))

    def _run(self, job: CodeJob, argv: list[str], limits: dict) -> CodeResult:
        workdir = tempfile.mkdtemp(prefix="sbx-")
        try:
            jobdir = Path(workdir) / "job"
            jobdir.mkdir(mode=0o700)
            for rel, content in job.files.items():
                target = (jobdir / rel).resolve()
                if not str(target).startswith(str(jobdir.resolve())):
                    raise SandboxSetupFailure(f"job file escapes sandbox: {rel}")
                target.parent.mkdir(parents=True, exist_ok=True)
                if isinstance(content, str):
                    content = content.encode("utf-8")
                target.write_bytes(content)
            before = {str(p.relative_to(jobdir)) for p in jobdir.rglob("*") if p.is_file()}
        except SandboxSetupFailure:
            shutil.rmtree(workdir, ignore_errors=True)
            raise
        except OSError as e:
            shutil.rmtree(workdir, ignore_errors=True)
            raise SandboxSetupFailure(str(e)) from e

        full_argv = list(self.runtimes[job.runtime]) + argv
        env = {
            "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
            "HOME": workdir,
            "LANG": "C.UTF-8",
            # no proxy hints; the sandbox is expected to stay offline
            "no_proxy": "*",
        }

        def set_limits():
            os.setsid()
            try:
                import resource

                cpu = int(limits["cpu_seconds"]) + 1
                resource.setrlimit(resource.RLIMIT_CPU, (cpu, cpu))
                mem = int(limits["memory_bytes"])
                resource.setrlimit(resource.RLIMIT_AS, (mem, mem))
            except (ImportError, ValueError, OSError):
                pass

        start = time.monotonic()
        usage = {"wall": 0.0, "cpu": 0.0, "peak_memory": 0}
        timed_out = False
        try:
            proc = subprocess.Popen(
                full_argv,
                cwd=str(jobdir),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                env=env,
                preexec_fn=set_limits,
            )
        except OSError as e:
            shutil.rmtree(workdir, ignore_errors=True)
            raise SandboxSetupFailure(str(e)) from e

        sampler_stop = threading.Event()

        def sample_usage():
            try:
                import psutil

                p = psutil.Process(proc.pid)
                while not sampler_stop.wait(0.05):
                    try:
                        mem = p.memory_info().rss
                        usage["peak_memory"] = max(usage["peak_memory"], mem)
                        usage["cpu"] = sum(p.cpu_times()[:2])
                    except (psutil.NoSuchProcess, psutil.AccessDenied):
                        return
            except ImportError:
                return

        sampler = threading.Thread(target=sample_usage, daemon=True)
        sampler.start()
        try:
            out, err = proc.communicate(input=job.stdin, timeout=limits["wall_seconds"])
            exit_code = proc.returncode
        except subprocess.TimeoutExpired:
            timed_out = True
            try:
                os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                proc.kill()
            out, err = proc.communicate()
            exit_code = proc.returncode if proc.returncode else -signal.SIGKILL
        finally:
            sampler_stop.set()
            sampler.join(timeout=0.5)
        usage["wall"] = time.monotonic() - start

        cap = int(limits["max_output_bytes"])
        stdout, stdout_trunc = (out[:cap], len(out) > cap)
        stderr, stderr_trunc = (err[:cap], len(err) > cap)

        produced: dict[str, bytes] = {}
        budget = MAX_PRODUCED_FILE_BYTES
        for p in sorted(jobdir.rglob("*")):
            if not p.is_file():
                continue
            rel = str(p.relative_to(jobdir))
            if rel in job.files and rel in before:
                try:
                    if p.read_bytes() == (
                        job.files[rel].encode("utf-8")
                        if isinstance(job.files[rel], str)
                        else job.files[rel]
                    ):
                        continue
                except OSError:
                    continue
            try:
                data = p.read_bytes()
            except OSError:
                continue
            if len(data) > budget:
                continue
            budget -= len(data)
            produced[rel] = data

        shutil.rmtree(workdir, ignore_errors=True)
        return CodeResult(
            exit_code=exit_code,
            stdout=stdout,
            stderr=stderr,
            stdout_truncated=stdout_trunc,
            stderr_truncated=stderr_trunc,
            produced_files=produced,
            usage=usage,
            timed_out=timed_out,
        )


# --------------------------------------------------------------------------
# search / fetch providers


def canonical_query(query: str) -> str:
    return " ".join(query.lower().split())


class FixtureToolProvider:
    """Offline provider replaying a frozen ``.toolfix.json`` recording."""

    def __init__(self, doc: dict, strict: bool = True):
        self._search: dict[str, list[dict]] = doc.get("search", {})
        self._fetch: dict[str, dict] = doc.get("fetch", {})
        self.strict = strict

    @classmethod
    def from_file(cls, path: str, strict: bool = True) -> "FixtureToolProvider":
        with open(path, "r", encoding="utf-8") as f:
            return cls(json.load(f), strict=strict)

    def search_literature(self, query: str, k: int) -> list[SearchHit]:
        if k <= 0:
            return []
        key = canonical_query(query)
        if key not in self._search:
            if self.strict:
                raise QueryNotInFixture(query)
            return []
        hits = self._search[key][:k]
        return [
            SearchHit(h["title"], h["uri"], h.get("snippet", ""), h.get("source", "fixture"))
            for h in hits
        ]

    def fetch_document(self, uri: str) -> tuple[str, bytes]:
        if uri not in self._fetch:
            raise FetchDenied(f"uri not in fixture: {uri}")
        rec = self._fetch[uri]
        if "text" in rec:
            data = rec["text"].encode("utf-8")
        else:
            data = base64.b64decode(rec.get("base64", ""))
        return rec.get("content_type", "application/octet-stream"), data


class LiveFetchProvider:
    """Allowlist-gated document fetcher with a size cap."""

    def __init__(self, allowlist: list[str], max_bytes: int = 8 * 1024 * 1024, timeout: float = 30.0):
        self.allowlist = list(allowlist)
        self.max_bytes = max_bytes
        self.timeout = timeout

    def _allowed(self, uri: str) -> bool:
        return any(uri.startswith(prefix) for prefix in self.allowlist)

    def search_literature(self, query: str, k: int) -> list[SearchHit]:
        raise ProviderUnavailable("no live literature-search provider configured")

    def fetch_document(self, uri: str) -> tuple[str, bytes]:
        if not self._allowed(uri):
            raise FetchDenied(uri)
        import httpx

        try:
            resp = httpx.get(uri, timeout=self.timeout, follow_redirects=True)
        except httpx.HTTPError as e:
            raise FetchFailed(str(e)) from e
        if resp.status_code != 200:
            raise FetchFailed(f"status {resp.status_code}")
        if len(resp.content) > self.max_bytes:
            raise FetchFailed(f"document exceeds size cap of {self.max_bytes} bytes")
        return resp.headers.get("content-type", "application/octet-stream"), resp.content


class Toolbox:
    """Bundles the sandbox pool and the search/fetch provider with logging."""

    def __init__(self, sandbox: SandboxPool | None = None, provider=None,
                 log: ToolLog | None = None, clock=None):
        self.sandbox = sandbox or SandboxPool()
        self.provider = provider
        self.log = log or ToolLog()
        self.clock = clock

    def _now(self) -> int:
        return self.clock.tick() if self.clock is not None else 0

    def execute_code(self, job: CodeJob) -> CodeResult:
        result = self.sandbox.execute_code(job)
        digest = content_digest(result.stdout + result.stderr)
        self.log.record("execute_code", job.entry, digest, at=self._now())
        return result

    def execute_parallel(self, jobs: list[CodeJob], max_concurrency: int | None = None) -> list[CodeResult]:
        results = self.sandbox.execute_parallel(jobs, max_concurrency)
        digest = content_digest(b"".join(r.stdout for r in results))
        self.log.record("execute_parallel", f"{len(jobs)} jobs", digest, at=self._now())
        return results

    def search_literature(self, query: str, k: int = 5) -> list[SearchHit]:
        if self.provider is None:
            raise ProviderUnavailable("no search provider configured")
        hits = self.provider.search_literature(query, k)
        digest = content_digest(json.dumps([h.to_dict() for h in hits], sort_keys=True).encode())
        self.log.record("search_literature", canonical_query(query), digest, at=self._now())
        return hits

    def fetch_document(self, uri: str) -> tuple[str, bytes]:
        if self.provider is None:
            raise ProviderUnavailable("no fetch provider configured")
        content_type, data = self.provider.fetch_document(uri)
        self.log.record("fetch_document", uri, content_digest(data), at=self._now())
        return content_type, data
