from __future__ import annotations

import json
import time

import pytest

from atelier.errors import FetchDenied, ProviderUnavailable, QueryNotInFixture, RuntimeUnavailable
from atelier.tools import (
    CodeJob,
    FixtureToolProvider,
    LiveFetchProvider,
    SandboxPool,
    Toolbox,
    canonical_query,
)


@pytest.fixture(scope="module")
def pool():
    return SandboxPool(max_concurrency=4)


def job(code: str, **limits) -> CodeJob:
    merged = {"wall_seconds": 20, "cpu_seconds": 15, "memory_bytes": 1024 * 1024 * 1024}
    merged.update(limits)
    return CodeJob(runtime="python3", files={"main.py": code.encode()}, entry="main.py",
                   limits=merged)


def test_simple_job_prints_42(pool):
    result = pool.execute_code(job("print(42)"))
    assert result.exit_code == 0
    assert result.stdout == b"42\n"
    assert result.timed_out is False


def test_infinite_loop_killed_at_wall_limit(pool):
    start = time.monotonic()
    result = pool.execute_code(job("while True: pass", wall_seconds=2, cpu_seconds=30))
    elapsed = time.monotonic() - start
    assert result.timed_out is True
    assert result.exit_code != 0
    assert elapsed < 3.0  # 2s limit + 50% slack


def test_failing_test_suite_exits_nonzero(pool):
    code = "import sys\nassert 1 == 2, 'golden value mismatch'\n"
    result = pool.execute_code(job(code))
    assert result.exit_code != 0
    assert b"golden value mismatch" in result.stderr


def test_output_truncated_at_exact_cap(pool):
    result = pool.execute_code(job("print('x' * 10000)", max_output_bytes=100))
    assert result.stdout_truncated is True
    assert len(result.stdout) == 100
    small = pool.execute_code(job("print('ok')", max_output_bytes=100))
    assert small.stdout_truncated is False


def test_produced_files_are_captured(pool):
    code = "open('out.txt', 'w').write('answer')"
    result = pool.execute_code(job(code))
    assert result.produced_files == {"out.txt": b"answer"}


def test_stdin_is_delivered(pool):
    j = job("import sys; print(sys.stdin.read().upper())")
    j.stdin = b"quiet"
    assert pool.execute_code(j).stdout == b"QUIET\n"


def test_unknown_runtime(pool):
    with pytest.raises(RuntimeUnavailable):
        pool.execute_code(CodeJob(runtime="cobol", files={"m": b""}, entry="m"))


def test_entry_must_reference_job_file(pool):
    with pytest.raises(ValueError):
        pool.execute_code(CodeJob(runtime="python3", files={"main.py": b""}, entry="other.py"))


def test_jobs_cannot_read_each_other(pool):
    """A probe job cannot find a sibling job's working directory."""
    marker = pool.execute_code(job("open('secret.txt', 'w').write('s3cret')\nimport time; time.sleep(0.2)"))
    probe_code = (
        "import glob, os\n"
        "hits = glob.glob('../*/secret.txt') + glob.glob('../../*/job/secret.txt')\n"
        "print(len([h for h in hits if os.access(h, os.R_OK)]))\n"
    )
    results = pool.execute_parallel([job("import time; time.sleep(0.3)"), job(probe_code)], 2)
    assert marker.exit_code == 0
    probe = results[1]
    assert probe.exit_code == 0
    assert probe.stdout.strip() == b"0"


def test_parallel_results_positionally_aligned(pool):
    jobs = [job(f"print({i})") for i in range(4)]
    results = pool.execute_parallel(jobs, max_concurrency=2)
    assert [r.stdout.strip().decode() for r in results] == ["0", "1", "2", "3"]


def test_parallel_respects_concurrency_cap():
    pool = SandboxPool(max_concurrency=2)
    jobs = [job("import time; time.sleep(0.15)") for _ in range(8)]
    pool.execute_parallel(jobs, max_concurrency=2)
    assert pool.peak_concurrency <= 2


def test_parallel_timeout_does_not_affect_siblings(pool):
    jobs = [
        job("print('fine')"),
        job("while True: pass", wall_seconds=1, cpu_seconds=30),
        job("print('also fine')"),
    ]
    results = pool.execute_parallel(jobs, max_concurrency=3)
    assert results[0].stdout == b"fine\n" and results[0].timed_out is False
    assert results[1].timed_out is True
    assert results[2].stdout == b"also fine\n" and results[2].timed_out is False


def test_parallel_embeds_per_job_errors(pool):
    jobs = [job("print('ok')"), CodeJob(runtime="nope", files={"m": b""}, entry="m")]
    results = pool.execute_parallel(jobs, 2)
    assert results[0].exit_code == 0
    assert results[1].error is not None and "RuntimeUnavailable" in results[1].error


# --- search / fetch -------------------------------------------------------

FIXTURE_DOC = {
    "search": {
        "moving sofa upper bound": [
            {"title": "Sofa bounds I", "uri": "https://example.org/a", "snippet": "...", "source": "fixture"},
            {"title": "Sofa bounds II", "uri": "https://example.org/b", "snippet": "...", "source": "fixture"},
            {"title": "Corner geometry", "uri": "https://example.org/c", "snippet": "...", "source": "fixture"},
        ]
    },
    "fetch": {
        "https://example.org/a": {"content_type": "text/html", "text": "<h1>frozen</h1>"}
    },
}


def test_fixture_search_returns_recorded_hits():
    provider = FixtureToolProvider(FIXTURE_DOC)
    hits = provider.search_literature("Moving  Sofa   UPPER bound", 5)
    assert [h.title for h in hits] == ["Sofa bounds I", "Sofa bounds II", "Corner geometry"]
    assert all(h.source == "fixture" for h in hits)


def test_fixture_search_k_zero():
    assert FixtureToolProvider(FIXTURE_DOC).search_literature("moving sofa upper bound", 0) == []


def test_fixture_search_respects_k():
    hits = FixtureToolProvider(FIXTURE_DOC).search_literature("moving sofa upper bound", 2)
    assert len(hits) == 2


def test_fixture_search_strict_unknown_query():
    with pytest.raises(QueryNotInFixture):
        FixtureToolProvider(FIXTURE_DOC).search_literature("unknown", 3)


def test_fixture_search_is_pure():
    provider = FixtureToolProvider(FIXTURE_DOC)
    a = [h.to_dict() for h in provider.search_literature("moving sofa upper bound", 3)]
    b = [h.to_dict() for h in provider.search_literature("moving sofa upper bound", 3)]
    assert a == b


def test_fixture_fetch_frozen_bytes():
    ct, data = FixtureToolProvider(FIXTURE_DOC).fetch_document("https://example.org/a")
    assert ct == "text/html"
    assert data == b"<h1>frozen</h1>"


def test_unconfigured_provider():
    box = Toolbox(provider=None)
    with pytest.raises(ProviderUnavailable):
        box.search_literature("anything", 3)
    with pytest.raises(ProviderUnavailable):
        box.fetch_document("https://example.org/a")


def test_live_fetch_denies_non_allowlisted():
    provider = LiveFetchProvider(allowlist=["https://allowed.example/"])
    with pytest.raises(FetchDenied):
        provider.fetch_document("https://forbidden.example/doc")


def test_canonical_query():
    assert canonical_query("  A   Query ") == "a query"


def test_toolbox_logs_every_invocation(tmp_path):
    from atelier.workspace import Workspace

    box = Toolbox(sandbox=SandboxPool(), provider=FixtureToolProvider(FIXTURE_DOC))
    box.search_literature("moving sofa upper bound", 2)
    box.fetch_document("https://example.org/a")
    box.execute_code(job("print(1)"))
    assert [e["tool"] for e in box.log.entries] == [
        "search_literature",
        "fetch_document",
        "execute_code",
    ]
    store = Workspace(tmp_path, project_id="p")
    assert box.log.flush(store)
    lines = store.read_file("tools/log.jsonl").decode().splitlines()
    assert len(lines) == 3
    assert all("result_digest" in json.loads(line) for line in lines)
