"""Compile-and-test harness for candidate C sources.

Compiles a single-file C program with GCC coverage instrumentation, runs
it against stdin/stdout test cases under a wall-clock timeout and an
address-space cap, and extracts per-test line coverage through gcov's
JSON output.  Compile failures are not exceptions here: they are captured
as diagnostics and fed back into the repair loop as signal.

Per-test spectra require the coverage counters (.gcda files) to be wiped
between test executions; :func:`run_suite` owns that sequencing and
leaves one parsed snapshot per test under ``<workdir>/cov/``.
"""

from __future__ import annotations

import json
import logging
import os
import resource
import shutil
import signal
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

from .spectrum import CoverageMatrix, LineId

log = logging.getLogger(__name__)

COMPILER = "gcc"
COVERAGE_FLAGS = ("-fprofile-arcs", "-ftest-coverage", "-O0")
SOURCE_NAME = "src.c"
BINARY_NAME = "a.out"
COVERAGE_DIR = "cov"

DEFAULT_TIMEOUT = 120.0
KILL_GRACE = 5.0
DEFAULT_MEMORY_LIMIT = 1 << 30  # 1 GiB address space for test processes


class CompilerNotFoundError(RuntimeError):
    """gcc or gcov is missing from PATH; the environment is unusable."""


@dataclass(frozen=True)
class SourceUnit:
    """One candidate C source plus the attempt label it came from."""

    code: str
    label: str = "original"

    def __post_init__(self) -> None:
        if not self.code:
            raise ValueError("SourceUnit.code must be non-empty")


@dataclass(frozen=True)
class Diagnostic:
    text: str
    severity: str  # "error" | "warning" | "note" | "other"


@dataclass(frozen=True)
class CompileResult:
    success: bool
    diagnostics: tuple[Diagnostic, ...]
    binary_path: Path | None
    workdir: Path

    def __post_init__(self) -> None:
        if self.success != (self.binary_path is not None):
            raise ValueError("binary_path must be present exactly when success")

    def warning_texts(self) -> list[str]:
        return [d.text for d in self.diagnostics if d.severity != "note"]


@dataclass(frozen=True)
class TestSpec:
    """One stdin/expected-stdout pair."""

    test_id: str
    stdin: bytes
    expected_stdout: bytes


@dataclass(frozen=True)
class ExecutionRecord:
    """Everything observed while running one test."""

    test_id: str
    passed: bool
    timed_out: bool
    exit_status: int | str  # int return code, or signal name such as "SIGFPE"
    actual_stdout: bytes
    stderr: bytes
    duration: float

    def __post_init__(self) -> None:
        if self.timed_out and self.passed:
            raise ValueError("timed_out implies passed=False")

    def status_label(self) -> str:
        if self.timed_out:
            return "timeout"
        if isinstance(self.exit_status, str):
            return f"signal {self.exit_status}"
        return f"exit {self.exit_status}"


def toolchain_versions() -> dict[str, str]:
    """First version line of gcc and gcov, for the run record."""
    versions: dict[str, str] = {}
    for tool in (COMPILER, "gcov"):
        try:
            out = subprocess.run(
                [tool, "--version"], capture_output=True, text=True, check=False
            )
        except FileNotFoundError as exc:
            raise CompilerNotFoundError(f"{tool} not found on PATH") from exc
        versions[tool] = out.stdout.splitlines()[0] if out.stdout else "unknown"
    return versions


def _classify(line: str) -> str:
    if ": error:" in line or line.startswith("error:"):
        return "error"
    if ": warning:" in line or line.startswith("warning:"):
        return "warning"
    if ": note:" in line:
        return "note"
    return "other"


def compile_with_coverage(source: SourceUnit, workdir: Path) -> CompileResult:
    """Compile ``source`` in ``workdir`` with coverage instrumentation.

    The workdir must be empty (or absent); the source is written as
    ``src.c`` and built to ``a.out`` alongside its coverage note file.
    Compiler stderr is captured verbatim whether or not the build works.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    if any(workdir.iterdir()):
        raise ValueError(f"workdir {workdir} is not empty")

    src = workdir / SOURCE_NAME
    src.write_text(source.code)
    binary = workdir / BINARY_NAME
    cmd = [COMPILER, *COVERAGE_FLAGS, SOURCE_NAME, "-o", BINARY_NAME]
    try:
        proc = subprocess.run(
            cmd, cwd=workdir, capture_output=True, text=True, check=False
        )
    except FileNotFoundError as exc:
        raise CompilerNotFoundError(f"{COMPILER} not found on PATH") from exc

    diagnostics = tuple(
        Diagnostic(text=line, severity=_classify(line))
        for line in proc.stderr.splitlines()
        if line.strip()
    )
    success = proc.returncode == 0 and binary.exists()
    return CompileResult(
        success=success,
        diagnostics=diagnostics,
        binary_path=binary if success else None,
        workdir=workdir,
    )


def _limit_resources(memory_limit: int):
    def apply() -> None:
        resource.setrlimit(resource.RLIMIT_AS, (memory_limit, memory_limit))
        os.setpgrp()

    return apply


def run_test(
    binary: Path,
    test: TestSpec,
    timeout: float = DEFAULT_TIMEOUT,
    memory_limit: int = DEFAULT_MEMORY_LIMIT,
) -> ExecutionRecord:
    """Run one test against the binary, killing it at the timeout.

    The child gets the test's stdin, a capped address space and its own
    process group; it is reaped within ``timeout + KILL_GRACE`` seconds.
    A pass means the (normalized) stdout matches the expectation.
    """
    if timeout <= 0:
        raise ValueError("timeout must be positive")
    start = time.monotonic()
    try:
        proc = subprocess.Popen(
            [str(binary)],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            cwd=binary.parent,
            preexec_fn=_limit_resources(memory_limit),
        )
    except OSError as exc:
        raise CompilerNotFoundError(f"cannot spawn test binary {binary}: {exc}") from exc

    timed_out = False
    try:
        stdout, stderr = proc.communicate(input=test.stdin, timeout=timeout)
    except subprocess.TimeoutExpired:
        timed_out = True
        _kill_group(proc)
        try:
            stdout, stderr = proc.communicate(timeout=KILL_GRACE)
        except subprocess.TimeoutExpired:  # pragma: no cover - kernel refusing SIGKILL
            stdout, stderr = b"", b""
    duration = time.monotonic() - start

    returncode = proc.returncode
    exit_status: int | str
    if returncode is not None and returncode < 0:
        try:
            exit_status = signal.Signals(-returncode).name
        except ValueError:
            exit_status = f"signal {-returncode}"
    else:
        exit_status = returncode if returncode is not None else -1

    passed = (not timed_out) and compare_output(stdout, test.expected_stdout)
    return ExecutionRecord(
        test_id=test.test_id,
        passed=passed,
        timed_out=timed_out,
        exit_status=exit_status,
        actual_stdout=stdout,
        stderr=stderr,
        duration=duration,
    )


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()


def compare_output(actual: bytes, expected: bytes) -> bool:
    """Judge-style equality: trailing whitespace and blank lines ignored."""
    return _normalize(actual) == _normalize(expected)


def _normalize(data: bytes) -> str:
    text = data.decode("utf-8", errors="replace")
    lines = [line.rstrip() for line in text.split("\n")]
    while lines and lines[-1] == "":
        lines.pop()
    return "\n".join(lines)


def _reset_counters(workdir: Path) -> None:
    # Deleting the .gcda files zeroes the counters, making the next
    # execution's spectrum independent of earlier tests.
    for gcda in workdir.glob("*.gcda"):
        gcda.unlink()


def _dump_coverage(workdir: Path, test_id: str) -> None:
    """Snapshot the counters for one test into ``cov/<test_id>.gcov.json``."""
    covdir = workdir / COVERAGE_DIR
    covdir.mkdir(exist_ok=True)
    notes = sorted(workdir.glob("*.gcno"))
    if not notes:
        log.warning("no coverage note files in %s for test %s", workdir, test_id)
        return
    proc = subprocess.run(
        ["gcov", "--json-format", "--stdout", *[n.name for n in notes]],
        cwd=workdir,
        capture_output=True,
        check=False,
    )
    if proc.returncode != 0:
        log.warning("gcov failed for test %s: %s", test_id, proc.stderr.decode(errors="replace"))
        return
    (covdir / f"{test_id}.gcov.json").write_bytes(proc.stdout)


def _parse_snapshot(path: Path) -> frozenset[LineId]:
    report = json.loads(path.read_bytes())
    executed: set[LineId] = set()
    for file_entry in report.get("files", []):
        fname = file_entry.get("file", SOURCE_NAME)
        for line in file_entry.get("lines", []):
            if line.get("count", 0) > 0:
                executed.add(LineId(file=fname, line=line["line_number"]))
    return frozenset(executed)


def collect_coverage(workdir: Path, per_test: list[str]) -> CoverageMatrix:
    """Assemble the per-test coverage matrix from dumped snapshots.

    A test whose snapshot is missing or unparseable (typically a crash
    before the counters flushed) gets an empty row and a logged warning;
    the session carries on.
    """
    covdir = Path(workdir) / COVERAGE_DIR
    rows: list[tuple[str, frozenset[LineId]]] = []
    for test_id in per_test:
        path = covdir / f"{test_id}.gcov.json"
        try:
            rows.append((test_id, _parse_snapshot(path)))
        except (OSError, ValueError, KeyError) as exc:
            log.warning("coverage for test %s unavailable (%s); empty row", test_id, exc)
            rows.append((test_id, frozenset()))
    return CoverageMatrix.from_rows(rows)


@dataclass
class SuiteResult:
    records: list[ExecutionRecord]
    matrix: CoverageMatrix
    failing: set[str] = field(init=False)

    def __post_init__(self) -> None:
        self.failing = {r.test_id for r in self.records if not r.passed}


def run_suite(
    compiled: CompileResult,
    tests: list[TestSpec],
    timeout: float = DEFAULT_TIMEOUT,
    memory_limit: int = DEFAULT_MEMORY_LIMIT,
) -> SuiteResult:
    """Run every test once with counters reset in between.

    Leaves one coverage snapshot per test under ``cov/`` and returns the
    execution records together with the assembled spectrum.
    """
    if not compiled.success or compiled.binary_path is None:
        raise ValueError("run_suite needs a successful compile")
    workdir = compiled.workdir
    records: list[ExecutionRecord] = []
    for test in tests:
        _reset_counters(workdir)
        records.append(run_test(compiled.binary_path, test, timeout, memory_limit))
        _dump_coverage(workdir, test.test_id)
    matrix = collect_coverage(workdir, [t.test_id for t in tests])
    return SuiteResult(records=records, matrix=matrix)


def clean_workdir(workdir: Path) -> None:
    shutil.rmtree(workdir, ignore_errors=True)
