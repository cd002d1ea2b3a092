"""The iterative repair state machine.

One session repairs one bug: run the original program to establish the
failing set, then drive the provider through up to ``max_iterations``
cycles of feedback -> prompt -> complete -> extract -> execute, keeping
an episodic memory of earlier attempts.  Scenarios 1-3 are single-shot
(one provider call, with increasing feedback); scenarios 4 and 5 iterate.

The per-iteration work is organized as a small directed graph of named
stages so each stage's wall time is recorded separately; the provider's
latency is additionally tracked on its own so time-to-repair can be
decomposed into harness time and model time.
"""

from __future__ import annotations

import json
import logging
import tempfile
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING

from .harness import (
    DEFAULT_MEMORY_LIMIT,
    CompileResult,
    ExecutionRecord,
    SourceUnit,
    compile_with_coverage,
    run_suite,
    toolchain_versions,
)
from .prompt import (
    AttemptSummary,
    FeedbackPacket,
    PatchExtractionError,
    PromptBundle,
    SBFL_SCENARIOS,
    ITERATIVE_SCENARIOS,
    build_system_prompt,
    build_user_prompt,
    extract_patch,
    make_attempt_summary,
)
from .provider import ChatExchange, ProviderUnavailableError
from .spectrum import (
    FORMULAS,
    CoverageMatrix,
    SuspiciousnessRanking,
    TestVerdict,
    rank_and_filter,
    score_lines,
)

if TYPE_CHECKING:  # BugCase is owned by the corpus layer; avoid a runtime cycle
    from .bench import BugCase

log = logging.getLogger(__name__)


class Verdict(str, Enum):
    COMPLETE_FIX = "CompleteFix"
    PARTIAL_IMPROVEMENT = "PartialImprovement"
    NO_IMPROVEMENT = "NoImprovement"


@dataclass(frozen=True)
class SessionConfig:
    """Knobs for one repair session; defaults follow the evaluated setup."""

    scenario: int = 5
    max_iterations: int = 4
    formula: str = "ochiai"
    threshold: float = 0.5
    fallback_k: int = 5
    test_timeout: float = 120.0
    history_cap: int = 3
    memory_limit: int = DEFAULT_MEMORY_LIMIT

    def __post_init__(self) -> None:
        if self.scenario not in (1, 2, 3, 4, 5):
            raise ValueError(f"scenario must be 1..5, got {self.scenario}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0,1]")
        if self.formula not in FORMULAS:
            raise ValueError(f"unknown formula {self.formula!r}")

    def iteration_budget(self) -> int:
        return self.max_iterations if self.scenario in ITERATIVE_SCENARIOS else 1


@dataclass(frozen=True)
class RepairAttempt:
    """Everything produced and observed during one loop iteration."""

    iteration: int
    prompt: PromptBundle
    exchange: ChatExchange | None
    patch: SourceUnit | None
    compile: CompileResult | None
    outcomes: tuple[ExecutionRecord, ...]
    failing_after: frozenset[str]
    stage_timings: dict[str, float] = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class SessionReport:
    bug_id: str
    scenario: int
    model_id: str
    verdict: Verdict
    iterations_used: int
    initial_failing: frozenset[str]
    final_failing: frozenset[str]
    regressions: frozenset[str]
    wall_time: float
    provider_time: float
    attempts: tuple[RepairAttempt, ...] = field(default=(), compare=False)
    error: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "bug_id": self.bug_id,
            "scenario": self.scenario,
            "model_id": self.model_id,
            "verdict": self.verdict.value,
            "iterations_used": self.iterations_used,
            "initial_failing": sorted(self.initial_failing),
            "final_failing": sorted(self.final_failing),
            "regressions": sorted(self.regressions),
            "wall_time": self.wall_time,
            "provider_time": self.provider_time,
            "error": self.error,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> SessionReport:
        return cls(
            bug_id=data["bug_id"],
            scenario=data["scenario"],
            model_id=data["model_id"],
            verdict=Verdict(data["verdict"]),
            iterations_used=data["iterations_used"],
            initial_failing=frozenset(data["initial_failing"]),
            final_failing=frozenset(data["final_failing"]),
            regressions=frozenset(data["regressions"]),
            wall_time=data["wall_time"],
            provider_time=data["provider_time"],
            error=data.get("error"),
        )


def classify_outcome(
    initial_failing: frozenset[str] | set[str],
    best_final_failing: frozenset[str] | set[str],
    all_tests: frozenset[str] | set[str],
) -> Verdict:
    """Map the best attempt's failing set to an outcome category.

    A complete fix fails nothing at all.  Partial improvement means some
    but not all of the initially-failing tests now pass, judged on the
    initially-failing tests only; newly broken tests are tracked as
    regressions elsewhere and never count as progress.
    """
    initial = frozenset(initial_failing)
    final = frozenset(best_final_failing)
    if not initial <= frozenset(all_tests):
        raise ValueError("initial_failing must be a subset of all_tests")
    if not final:
        return Verdict.COMPLETE_FIX
    fixed = initial - final
    if fixed and fixed != initial:
        return Verdict.PARTIAL_IMPROVEMENT
    return Verdict.NO_IMPROVEMENT


def select_best_attempt(attempts: list[RepairAttempt]) -> RepairAttempt:
    """The attempt with the fewest failing tests; earliest iteration wins ties."""
    if not attempts:
        raise ValueError("no attempts to select from")
    return min(attempts, key=lambda a: (len(a.failing_after), a.iteration))


# ---------------------------------------------------------------------------
# Session state and the per-iteration stage graph
# ---------------------------------------------------------------------------


@dataclass
class SessionState:
    bug: BugCase
    cfg: SessionConfig
    provider: object
    workdir: Path
    runlog: RunLog | None
    current_source: SourceUnit
    last_compile: CompileResult | None = None
    last_outcomes: tuple[ExecutionRecord, ...] = ()
    last_matrix: CoverageMatrix | None = None
    last_warnings: tuple[str, ...] = ()
    failing: frozenset[str] = frozenset()
    initial_failing: frozenset[str] = frozenset()
    history: list[AttemptSummary] = field(default_factory=list)
    attempts: list[RepairAttempt] = field(default_factory=list)
    iteration: int = 1
    # scratch slots passed between stages within one step
    fb: FeedbackPacket | None = None
    bundle: PromptBundle | None = None
    exchange: ChatExchange | None = None
    patch: SourceUnit | None = None
    reasoning: str = ""
    patch_compile: CompileResult | None = None
    patch_outcomes: tuple[ExecutionRecord, ...] = ()

    @property
    def all_tests(self) -> frozenset[str]:
        return frozenset(t.test_id for t in self.bug.tests)

    def succeeded(self) -> bool:
        return bool(self.attempts) and not self.attempts[-1].failing_after


class StageGraph:
    """A directed graph of named stages, walked once per iteration.

    Linear here (feedback -> prompt -> complete -> extract -> execute,
    with the loop edge realized by the session driver), but each node is
    an isolated task with its own timing, which is what the per-stage
    breakdown in run logs comes from.
    """

    def __init__(
        self,
        nodes: dict[str, Callable[[SessionState], None]],
        edges: dict[str, str | None],
        entry: str,
    ) -> None:
        unknown = {t for t in edges.values() if t is not None} - set(nodes)
        if unknown or entry not in nodes:
            raise ValueError("graph edges reference unknown stages")
        self.nodes = nodes
        self.edges = edges
        self.entry = entry

    def run(self, state: SessionState) -> dict[str, float]:
        timings: dict[str, float] = {}
        name: str | None = self.entry
        while name is not None:
            started = time.monotonic()
            self.nodes[name](state)
            timings[name] = time.monotonic() - started
            name = self.edges.get(name)
        return timings


def _make_ranking(state: SessionState) -> SuspiciousnessRanking:
    cfg = state.cfg
    if state.last_matrix is None or not state.last_matrix.tests:
        return SuspiciousnessRanking(
            formula=cfg.formula, entries=(), threshold=cfg.threshold
        )
    verdicts = [
        TestVerdict(r.test_id, r.passed, r.timed_out) for r in state.last_outcomes
    ]
    scores = score_lines(state.last_matrix, verdicts, cfg.formula)
    return rank_and_filter(scores, cfg.threshold, cfg.fallback_k, cfg.formula)


def _warning_stream(
    compiled: CompileResult | None, records: tuple[ExecutionRecord, ...]
) -> tuple[str, ...]:
    """Compiler diagnostics plus runtime trouble, in deterministic order."""
    warnings: list[str] = []
    if compiled is not None:
        warnings.extend(compiled.warning_texts())
    for r in records:
        if r.timed_out:
            warnings.append(f"test {r.test_id}: timed out")
        elif isinstance(r.exit_status, str):
            warnings.append(f"test {r.test_id}: terminated by {r.exit_status}")
        stderr = r.stderr.strip()
        if stderr:
            excerpt = stderr[:500].decode("utf-8", errors="replace")
            warnings.append(f"test {r.test_id} stderr: {excerpt}")
    return tuple(warnings)


def _stage_feedback(state: SessionState) -> None:
    scenario = state.cfg.scenario
    if scenario == 1:
        state.fb = FeedbackPacket()
        return
    ranking = _make_ranking(state) if scenario in SBFL_SCENARIOS else None
    history = tuple(state.history) if scenario in ITERATIVE_SCENARIOS else ()
    state.fb = FeedbackPacket(
        outcomes=state.last_outcomes,
        tests=tuple(state.bug.tests),
        ranking=ranking,
        warnings=state.last_warnings,
        history=history,
    )


def _stage_prompt(state: SessionState) -> None:
    assert state.fb is not None
    system = build_system_prompt(state.cfg.scenario)
    user = build_user_prompt(
        state.current_source, state.fb, state.cfg.scenario, state.cfg.history_cap
    )
    state.bundle = PromptBundle(
        system_text=system,
        user_text=user,
        scenario=state.cfg.scenario,
        iteration=state.iteration,
    )
    if state.runlog:
        state.runlog.write(
            type="prompt",
            iteration=state.iteration,
            system_text=system,
            user_text=user,
        )


def _stage_complete(state: SessionState) -> None:
    assert state.bundle is not None
    state.exchange = state.provider.complete(state.bundle)
    if state.runlog:
        state.runlog.write(
            type="response",
            iteration=state.iteration,
            text=state.exchange.response,
            latency=state.exchange.latency,
            attempts_used=state.exchange.attempts_used,
        )


def _stage_extract(state: SessionState) -> None:
    assert state.exchange is not None
    try:
        state.patch, state.reasoning = extract_patch(
            state.exchange.response, label=f"attempt-{state.iteration}"
        )
    except PatchExtractionError as exc:
        log.warning("iteration %d: %s", state.iteration, exc)
        state.patch, state.reasoning = None, ""


def _stage_execute(state: SessionState) -> None:
    """Compile and test the freshly extracted patch, updating state.

    No patch means nothing ran: the failing set carries over.  A patch
    that does not compile counts as failing every test, with the
    compiler diagnostics queued for the next prompt's warnings.
    """
    state.patch_compile = None
    state.patch_outcomes = ()
    if state.patch is None:
        return
    attempt_dir = state.workdir / f"iter_{state.iteration:02d}"
    compiled = compile_with_coverage(state.patch, attempt_dir)
    state.patch_compile = compiled
    if state.runlog:
        state.runlog.write(
            type="compile",
            iteration=state.iteration,
            success=compiled.success,
            diagnostics=[d.text for d in compiled.diagnostics],
        )
    if compiled.success:
        suite = run_suite(
            compiled,
            list(state.bug.tests),
            timeout=state.cfg.test_timeout,
            memory_limit=state.cfg.memory_limit,
        )
        state.patch_outcomes = tuple(suite.records)
        state.failing = frozenset(suite.failing)
        state.last_matrix = suite.matrix
        state.last_outcomes = state.patch_outcomes
    else:
        state.failing = state.all_tests
        state.last_matrix = None
        state.last_outcomes = ()
    state.current_source = state.patch
    state.last_compile = compiled
    state.last_warnings = _warning_stream(compiled, state.patch_outcomes)
    if state.runlog:
        for r in state.patch_outcomes:
            state.runlog.write_execution(state.iteration, r)


_STEP_GRAPH = StageGraph(
    nodes={
        "feedback": _stage_feedback,
        "prompt": _stage_prompt,
        "complete": _stage_complete,
        "extract": _stage_extract,
        "execute": _stage_execute,
    },
    edges={
        "feedback": "prompt",
        "prompt": "complete",
        "complete": "extract",
        "extract": "execute",
        "execute": None,
    },
    entry="feedback",
)


def step(state: SessionState) -> SessionState:
    """Run one full iteration of the repair cycle.

    Appends exactly one attempt and one memory entry; the failing set
    after a patchless iteration (extraction failure) is unchanged.
    """
    timings = _STEP_GRAPH.run(state)

    # A patchless iteration never ran anything, so state.failing is still
    # the previous failing set, which is exactly what gets recorded.
    failing_after = state.failing
    attempt = RepairAttempt(
        iteration=state.iteration,
        prompt=state.bundle,
        exchange=state.exchange,
        patch=state.patch,
        compile=state.patch_compile,
        outcomes=state.patch_outcomes,
        failing_after=failing_after,
        stage_timings=timings,
    )
    state.attempts.append(attempt)
    state.history.append(
        make_attempt_summary(
            iteration=state.iteration,
            reasoning=state.reasoning,
            patch_code=state.patch.code if state.patch else "(no patch extracted)",
            failing_after=failing_after,
        )
    )
    state.iteration += 1
    state.fb = None
    state.bundle = None
    state.exchange = None
    return state


# ---------------------------------------------------------------------------
# Run log
# ---------------------------------------------------------------------------


class RunLog:
    """Append-only JSONL record of one session."""

    def __init__(self, path: Path) -> None:
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = path.open("a", encoding="utf-8")

    def write(self, **record: object) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def write_execution(self, iteration: int, r: ExecutionRecord) -> None:
        self.write(
            type="execution",
            iteration=iteration,
            test_id=r.test_id,
            passed=r.passed,
            timed_out=r.timed_out,
            exit_status=r.exit_status,
            stdout=r.actual_stdout.decode("utf-8", errors="replace"),
            stderr=r.stderr.decode("utf-8", errors="replace"),
            duration=r.duration,
        )

    def close(self) -> None:
        self._fh.close()


def _open_runlog(runs_dir: Path | None, bug_id: str) -> RunLog | None:
    if runs_dir is None:
        return None
    stamp = datetime.now().strftime("%Y%m%dT%H%M%S%f")
    return RunLog(Path(runs_dir) / bug_id / f"{stamp}.jsonl")


# ---------------------------------------------------------------------------
# Session driver
# ---------------------------------------------------------------------------


def run_session(
    bug: BugCase,
    cfg: SessionConfig,
    provider,
    workdir: Path | None = None,
    runs_dir: Path | None = None,
) -> SessionReport:
    """Repair one bug end to end and classify the outcome.

    The baseline (original program) is executed once to establish the
    initially failing tests; iterations then proceed per the scenario.
    A provider outage aborts the session with a NoImprovement report
    and an error annotation rather than raising.
    """
    if not bug.tests:
        raise ValueError(f"bug {bug.bug_id} has no tests")
    started = time.monotonic()
    own_workdir = workdir is None
    workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix=f"rl-{bug.bug_id}-"))
    runlog = _open_runlog(runs_dir, bug.bug_id)
    model_id = getattr(provider, "model_id", "unknown")

    state = SessionState(
        bug=bug,
        cfg=cfg,
        provider=provider,
        workdir=workdir,
        runlog=runlog,
        current_source=SourceUnit(code=bug.buggy_source, label="original"),
    )
    if runlog:
        runlog.write(
            type="config",
            bug_id=bug.bug_id,
            scenario=cfg.scenario,
            max_iterations=cfg.max_iterations,
            formula=cfg.formula,
            threshold=cfg.threshold,
            fallback_k=cfg.fallback_k,
            test_timeout=cfg.test_timeout,
            history_cap=cfg.history_cap,
            model_id=model_id,
            toolchain=toolchain_versions(),
        )

    error: str | None = None
    try:
        try:
            _run_baseline(state)
            if state.initial_failing:
                budget = cfg.iteration_budget()
                while state.iteration <= budget and not state.succeeded():
                    step(state)
        except ProviderUnavailableError as exc:
            error = str(exc)
            log.warning("session %s aborted: %s", bug.bug_id, error)

        report = _finalize(state, model_id, started, error)
        if runlog:
            runlog.write(type="report", **report.to_json_dict())
        return report
    finally:
        if runlog:
            runlog.close()
        if own_workdir:
            # Session-owned scratch space; callers who pass a workdir keep it.
            from .harness import clean_workdir

            clean_workdir(workdir)


def _run_baseline(state: SessionState) -> None:
    """Execute the original program once to seed feedback and the failing set."""
    compiled = compile_with_coverage(state.current_source, state.workdir / "baseline")
    state.last_compile = compiled
    if compiled.success:
        suite = run_suite(
            compiled,
            list(state.bug.tests),
            timeout=state.cfg.test_timeout,
            memory_limit=state.cfg.memory_limit,
        )
        state.last_outcomes = tuple(suite.records)
        state.last_matrix = suite.matrix
        state.failing = frozenset(suite.failing)
    else:
        # The original bug does not even build: every test counts as
        # failing and the spectrum stays empty; the session proceeds.
        state.last_outcomes = ()
        state.last_matrix = None
        state.failing = state.all_tests
    state.initial_failing = state.failing
    state.last_warnings = _warning_stream(compiled, state.last_outcomes)
    if state.runlog:
        state.runlog.write(
            type="baseline",
            compile_success=compiled.success,
            diagnostics=[d.text for d in compiled.diagnostics],
            initial_failing=sorted(state.failing),
        )
        for r in state.last_outcomes:
            state.runlog.write_execution(0, r)


def _finalize(
    state: SessionState, model_id: str, started: float, error: str | None
) -> SessionReport:
    if state.attempts:
        best = select_best_attempt(state.attempts)
        final_failing = best.failing_after
    else:
        final_failing = state.initial_failing
    if error is None:
        verdict = classify_outcome(state.initial_failing, final_failing, state.all_tests)
    else:
        verdict = Verdict.NO_IMPROVEMENT
    provider_time = sum(
        a.exchange.latency for a in state.attempts if a.exchange is not None
    )
    return SessionReport(
        bug_id=state.bug.bug_id,
        scenario=state.cfg.scenario,
        model_id=model_id,
        verdict=verdict,
        iterations_used=len(state.attempts),
        initial_failing=state.initial_failing,
        final_failing=frozenset(final_failing),
        regressions=frozenset(final_failing) - state.initial_failing,
        wall_time=time.monotonic() - started,
        provider_time=provider_time,
        attempts=tuple(state.attempts),
        error=error,
    )
