"""Corpus loading, benchmark driving, and corpus-level metrics.

A corpus lives under a root directory with a ``manifest.tsv`` of
``bug_id<TAB>source_path<TAB>tests_dir`` rows; each tests directory holds
``<n>.in`` / ``<n>.out`` pairs.  The benchmark fans repair sessions out
over a worker pool, never letting one broken case abort the run, and
folds the session reports into per-(model, scenario) percentages and
timing statistics.  Reports can be re-derived from persisted run logs,
so a finished benchmark is auditable without rerunning anything.
"""

from __future__ import annotations

import json
import logging
import re
import statistics
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .agent import SessionConfig, SessionReport, Verdict, run_session
from .harness import TestSpec

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
SCENARIO_ORDER = (1, 2, 3, 4, 5)


class DatasetError(ValueError):
    """The corpus manifest or its referenced files are unusable."""


@dataclass(frozen=True)
class BugCase:
    """One repairable bug: broken source plus its test suite."""

    bug_id: str
    buggy_source: str
    tests: tuple[TestSpec, ...]
    reference_fix: str | None = None

    def __post_init__(self) -> None:
        if not self.tests:
            raise ValueError(f"bug {self.bug_id} needs at least one test")


@dataclass(frozen=True)
class CaseDescriptor:
    bug_id: str
    source_path: Path
    tests_dir: Path
    test_stems: tuple[str, ...]


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    cases: tuple[CaseDescriptor, ...]


def _test_order(stem: str) -> tuple[int, int | str]:
    # Numeric stems sort numerically, anything else lexically after them.
    return (0, int(stem)) if stem.isdigit() else (1, stem)


def _discover_tests(tests_dir: Path) -> list[str]:
    stems = sorted((p.stem for p in tests_dir.glob("*.in")), key=_test_order)
    usable = []
    for stem in stems:
        if (tests_dir / f"{stem}.out").exists():
            usable.append(stem)
        else:
            raise FileNotFoundError(f"{tests_dir / (stem + '.out')} missing")
    return usable


def load_dataset(root: Path) -> DatasetIndex:
    """Parse ``manifest.tsv`` into resolvable case descriptors.

    A malformed row or a missing source file is a hard
    :class:`DatasetError` naming the row; a case whose test files are
    incomplete is skipped with a warning so the rest of the corpus
    still loads.
    """
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise DatasetError(f"no {MANIFEST_NAME} under {root}")
    cases: list[CaseDescriptor] = []
    for lineno, raw in enumerate(manifest.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not all(parts):
            raise DatasetError(f"{manifest}:{lineno}: expected 3 tab-separated fields")
        bug_id, source_rel, tests_rel = parts
        source_path = root / source_rel
        tests_dir = root / tests_rel
        if not source_path.exists():
            raise DatasetError(f"{manifest}:{lineno}: source file {source_path} not found")
        try:
            stems = _discover_tests(tests_dir)
        except (FileNotFoundError, OSError) as exc:
            log.warning("skipping case %s: %s", bug_id, exc)
            continue
        if not stems:
            log.warning("skipping case %s: no test pairs in %s", bug_id, tests_dir)
            continue
        cases.append(
            CaseDescriptor(
                bug_id=bug_id,
                source_path=source_path,
                tests_dir=tests_dir,
                test_stems=tuple(stems),
            )
        )
    return DatasetIndex(root=root, cases=tuple(cases))


def load_tests_from_dir(tests_dir: Path) -> tuple[TestSpec, ...]:
    """Read all ``<n>.in`` / ``<n>.out`` pairs of one directory, in order."""
    tests_dir = Path(tests_dir)
    if not tests_dir.is_dir():
        raise FileNotFoundError(f"tests directory {tests_dir} not found")
    stems = _discover_tests(tests_dir)
    if not stems:
        raise DatasetError(f"no <n>.in / <n>.out pairs in {tests_dir}")
    return tuple(
        TestSpec(
            test_id=stem,
            stdin=(tests_dir / f"{stem}.in").read_bytes(),
            expected_stdout=(tests_dir / f"{stem}.out").read_bytes(),
        )
        for stem in stems
    )


def load_case(desc: CaseDescriptor) -> BugCase:
    tests = tuple(
        TestSpec(
            test_id=stem,
            stdin=(desc.tests_dir / f"{stem}.in").read_bytes(),
            expected_stdout=(desc.tests_dir / f"{stem}.out").read_bytes(),
        )
        for stem in desc.test_stems
    )
    return BugCase(
        bug_id=desc.bug_id,
        buggy_source=desc.source_path.read_text(),
        tests=tests,
    )


# ---------------------------------------------------------------------------
# Codeflaws import
# ---------------------------------------------------------------------------

_CODEFLAWS_DIR_RE = re.compile(r"^(?P<contest>\d+)-(?P<prob>[A-Z0-9]+)-bug-(?P<buggy>\w+)-(?P<fixed>\w+)$")


def import_codeflaws(codeflaws_root: Path, out_root: Path) -> int:
    """Map canonical Codeflaws defect directories into a manifest corpus.

    Each ``<contest>-<prob>-bug-<buggy>-<fixed>`` directory contributes
    one manifest row pointing at its buggy source and at a generated
    tests directory built from ``input-*`` / ``output-*`` pairs (or an
    existing ``tests/`` layout).  Returns the number of imported cases.
    """
    codeflaws_root = Path(codeflaws_root)
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    rows: list[str] = []
    for entry in sorted(codeflaws_root.iterdir()):
        match = _CODEFLAWS_DIR_RE.match(entry.name)
        if not entry.is_dir() or not match:
            continue
        contest, prob, buggy = match["contest"], match["prob"], match["buggy"]
        source = entry / f"{contest}-{prob}-{buggy}.c"
        if not source.exists():
            log.warning("skipping %s: buggy source %s missing", entry.name, source.name)
            continue
        tests_dir = out_root / "tests" / entry.name
        count = _copy_codeflaws_tests(entry, tests_dir)
        if count == 0:
            log.warning("skipping %s: no usable test pairs", entry.name)
            continue
        rows.append(f"{entry.name}\t{source.resolve()}\t{tests_dir.relative_to(out_root)}")
    manifest = out_root / MANIFEST_NAME
    manifest.write_text("\n".join(rows) + ("\n" if rows else ""))
    return len(rows)


def _copy_codeflaws_tests(case_dir: Path, tests_dir: Path) -> int:
    pairs: list[tuple[Path, Path]] = []
    existing = case_dir / "tests"
    if existing.is_dir():
        for stem in sorted((p.stem for p in existing.glob("*.in")), key=_test_order):
            out = existing / f"{stem}.out"
            if out.exists():
                pairs.append((existing / f"{stem}.in", out))
    else:
        for inp in sorted(case_dir.glob("input-*")):
            suffix = inp.name.removeprefix("input-")
            out = case_dir / f"output-{suffix}"
            if out.exists():
                pairs.append((inp, out))
    if not pairs:
        return 0
    tests_dir.mkdir(parents=True, exist_ok=True)
    for n, (inp, out) in enumerate(pairs, start=1):
        (tests_dir / f"{n}.in").write_bytes(inp.read_bytes())
        (tests_dir / f"{n}.out").write_bytes(out.read_bytes())
    return len(pairs)


# ---------------------------------------------------------------------------
# Benchmark driver
# ---------------------------------------------------------------------------

ProviderFactory = Callable[[BugCase], object]


def run_benchmark(
    index: DatasetIndex,
    cfg: SessionConfig,
    provider,
    parallelism: int = 1,
    runs_dir: Path | None = None,
) -> list[SessionReport]:
    """Run one session per case over a bounded worker pool.

    ``provider`` is either a shared provider instance or a factory
    ``BugCase -> provider``; scripted benchmarks want the factory so each
    session replays its own script regardless of scheduling.  Individual
    session failures become error-annotated NoImprovement reports
    instead of aborting the run, and results come back in case order.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    factory: ProviderFactory = provider if callable(provider) else (lambda _bug: provider)

    def one(desc: CaseDescriptor) -> SessionReport:
        try:
            bug = load_case(desc)
            return run_session(bug, cfg, factory(bug), runs_dir=runs_dir)
        except Exception as exc:  # per-case isolation, never abort the run
            log.warning("case %s errored: %s", desc.bug_id, exc)
            return SessionReport(
                bug_id=desc.bug_id,
                scenario=cfg.scenario,
                model_id="unknown",
                verdict=Verdict.NO_IMPROVEMENT,
                iterations_used=0,
                initial_failing=frozenset(),
                final_failing=frozenset(),
                regressions=frozenset(),
                wall_time=0.0,
                provider_time=0.0,
                error=f"{type(exc).__name__}: {exc}",
            )

    if not index.cases:
        return []
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, index.cases))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    """Outcome distribution and timing for one (model, scenario) cell."""

    model_id: str
    scenario: int
    cases: int
    complete_pct: float
    partial_pct: float
    none_pct: float
    mean_time: float
    median_time: float
    mean_response_time: float
    verdicts: tuple[tuple[str, str], ...]  # (bug_id, verdict), sorted by bug_id

    def counts(self) -> tuple[int, int, int]:
        values = [v for _, v in self.verdicts]
        return (
            values.count(Verdict.COMPLETE_FIX.value),
            values.count(Verdict.PARTIAL_IMPROVEMENT.value),
            values.count(Verdict.NO_IMPROVEMENT.value),
        )


@dataclass(frozen=True)
class MetricsReport:
    rows: tuple[MetricsRow, ...]

    def to_json_dict(self) -> dict:
        return {
            "rows": [
                {
                    "model_id": r.model_id,
                    "scenario": r.scenario,
                    "cases": r.cases,
                    "complete_pct": r.complete_pct,
                    "partial_pct": r.partial_pct,
                    "none_pct": r.none_pct,
                    "mean_time": r.mean_time,
                    "median_time": r.median_time,
                    "mean_response_time": r.mean_response_time,
                    "verdicts": [list(v) for v in r.verdicts],
                }
                for r in self.rows
            ]
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> MetricsReport:
        rows = tuple(
            MetricsRow(
                model_id=r["model_id"],
                scenario=r["scenario"],
                cases=r["cases"],
                complete_pct=r["complete_pct"],
                partial_pct=r["partial_pct"],
                none_pct=r["none_pct"],
                mean_time=r["mean_time"],
                median_time=r["median_time"],
                mean_response_time=r["mean_response_time"],
                verdicts=tuple((v[0], v[1]) for v in r["verdicts"]),
            )
            for r in data["rows"]
        )
        return cls(rows=rows)


def compute_metrics(reports: list[SessionReport]) -> MetricsReport:
    """Fold session reports into per-(model, scenario) percentage rows.

    Percentages are over all cases in the group, carried at two decimal
    places; complete/partial/none partition the group so every row sums
    to 100 within rounding.  The fold is order-independent.
    """
    if not reports:
        raise ValueError("compute_metrics needs at least one report")
    groups: dict[tuple[str, int], list[SessionReport]] = {}
    for r in reports:
        groups.setdefault((r.model_id, r.scenario), []).append(r)

    rows = []
    for (model_id, scenario), group in sorted(groups.items()):
        total = len(group)
        n_complete = sum(r.verdict is Verdict.COMPLETE_FIX for r in group)
        n_partial = sum(r.verdict is Verdict.PARTIAL_IMPROVEMENT for r in group)
        n_none = total - n_complete - n_partial
        times = [r.wall_time for r in group]
        rows.append(
            MetricsRow(
                model_id=model_id,
                scenario=scenario,
                cases=total,
                complete_pct=round(100.0 * n_complete / total, 2),
                partial_pct=round(100.0 * n_partial / total, 2),
                none_pct=round(100.0 * n_none / total, 2),
                mean_time=round(statistics.fmean(times), 3),
                median_time=round(statistics.median(times), 3),
                mean_response_time=round(
                    statistics.fmean([r.provider_time for r in group]), 3
                ),
                verdicts=tuple(
                    sorted((r.bug_id, r.verdict.value) for r in group)
                ),
            )
        )
    return MetricsReport(rows=tuple(rows))


def load_reports_from_runs(runs_dir: Path) -> list[SessionReport]:
    """Rebuild session reports from persisted run logs.

    Reads the final ``report`` record of every ``*.jsonl`` under
    ``runs_dir``; a log without one, or with an unparseable line, raises
    a named error.
    """
    runs_dir = Path(runs_dir)
    logs = sorted(runs_dir.rglob("*.jsonl"))
    if not logs:
        raise DatasetError(f"no run logs under {runs_dir}")
    reports: list[SessionReport] = []
    for path in logs:
        last_report: dict | None = None
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: corrupt run log line: {exc}") from exc
            if record.get("type") == "report":
                last_report = record
        if last_report is None:
            raise DatasetError(f"{path}: no report record (session incomplete?)")
        reports.append(SessionReport.from_json_dict(last_report))
    return reports


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def emit_report(metrics: MetricsReport, out_dir: Path) -> tuple[Path, Path]:
    """Write the machine-readable report and the text table.

    Returns (json_path, table_path).  The JSON round-trips through
    :meth:`MetricsReport.from_json_dict`;  the table puts scenarios in
    fixed column order with one row per model.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "metrics.json"
    table_path = out_dir / "metrics.txt"
    json_path.write_text(json.dumps(metrics.to_json_dict(), indent=2, sort_keys=True) + "\n")
    table_path.write_text(format_table(metrics))
    return json_path, table_path


def format_table(metrics: MetricsReport) -> str:
    """Accuracy per scenario (model rows), then the full per-row breakdown."""
    scenarios = sorted(
        {r.scenario for r in metrics.rows}, key=SCENARIO_ORDER.index
    )
    models = sorted({r.model_id for r in metrics.rows})
    cell = {(r.model_id, r.scenario): r for r in metrics.rows}

    header = ["Model"] + [f"Scenario {s}" for s in scenarios]
    lines = ["Repair accuracy (complete-fix %)", "\t".join(header)]
    for model in models:
        row = [model]
        for s in scenarios:
            r = cell.get((model, s))
            row.append(f"{r.complete_pct:.2f}%" if r else "-")
        lines.append("\t".join(row))

    lines.append("")
    lines.append("Breakdown per model/scenario")
    lines.append(
        "\t".join(
            [
                "Model",
                "Scenario",
                "Cases",
                "Complete",
                "Partial",
                "None",
                "MeanTime(s)",
                "MedianTime(s)",
                "MeanResponse(s)",
            ]
        )
    )
    for r in metrics.rows:
        lines.append(
            "\t".join(
                [
                    r.model_id,
                    str(r.scenario),
                    str(r.cases),
                    f"{r.complete_pct:.2f}%",
                    f"{r.partial_pct:.2f}%",
                    f"{r.none_pct:.2f}%",
                    f"{r.mean_time:.3f}",
                    f"{r.median_time:.3f}",
                    f"{r.mean_response_time:.3f}",
                ]
            )
        )
    return "\n".join(lines) + "\n"
