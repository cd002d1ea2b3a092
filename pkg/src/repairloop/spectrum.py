"""Coverage spectrum model and per-line suspiciousness scoring.

A spectrum records, per test, which source lines executed.  Combined with
pass/fail verdicts it yields the four counts every suspiciousness formula
is built from, and from those the Ochiai, Jaccard and Tarantula scores.
All formulas are total: degenerate inputs (no failing tests, a line no
test executes, an empty passing suite) score 0 instead of raising.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field


class InputMismatchError(ValueError):
    """Verdicts and coverage matrix do not describe the same test suite."""


@dataclass(frozen=True, order=True)
class LineId:
    """A 1-based source line within a file."""

    file: str
    line: int

    def __post_init__(self) -> None:
        if not self.file:
            raise ValueError("LineId.file must be non-empty")
        if self.line < 1:
            raise ValueError(f"LineId.line must be >= 1, got {self.line}")

    def __str__(self) -> str:
        return f"{self.file}:{self.line}"


@dataclass(frozen=True)
class TestVerdict:
    """Pass/fail outcome of one test, as seen by the spectrum."""

    test_id: str
    passed: bool
    timed_out: bool = False

    def __post_init__(self) -> None:
        if self.timed_out and self.passed:
            raise ValueError(f"test {self.test_id!r}: timed_out implies passed=False")


@dataclass(frozen=True)
class CoverageMatrix:
    """Per-test executed-line sets, in suite order.

    ``executed`` maps every test id in ``tests`` to the set of lines that
    ran at least once under that test (execution count > 0; counts beyond
    one carry no extra weight).
    """

    tests: tuple[str, ...]
    executed: Mapping[str, frozenset[LineId]]

    def __post_init__(self) -> None:
        unknown = set(self.executed) - set(self.tests)
        if unknown:
            raise ValueError(f"executed rows for unknown tests: {sorted(unknown)}")

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, Iterable[LineId]]]) -> CoverageMatrix:
        ordered = [(tid, frozenset(lines)) for tid, lines in rows]
        return cls(tests=tuple(t for t, _ in ordered), executed=dict(ordered))

    def lines(self) -> frozenset[LineId]:
        """Union of all executed lines across the suite."""
        result: set[LineId] = set()
        for row in self.executed.values():
            result |= row
        return frozenset(result)


@dataclass(frozen=True)
class SpectrumCounts:
    """The four counts behind every suspiciousness formula.

    t_f / t_p: failing / passing tests in the suite.
    t_f_e / t_p_e: failing / passing tests that executed the line.
    """

    t_f: int
    t_p: int
    t_f_e: int
    t_p_e: int

    def __post_init__(self) -> None:
        if min(self.t_f, self.t_p, self.t_f_e, self.t_p_e) < 0:
            raise ValueError("spectrum counts must be non-negative")
        if self.t_f_e > self.t_f or self.t_p_e > self.t_p:
            raise ValueError(f"executing counts exceed totals: {self}")


@dataclass(frozen=True)
class SuspiciousnessRanking:
    """Filtered, deterministically ordered suspicious lines.

    Entries are sorted by score descending, ties broken by (file, line)
    ascending so identical inputs always serialize identically.
    """

    formula: str
    entries: tuple[tuple[LineId, float], ...]
    threshold: float
    fallback_used: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        for line, score in self.entries:
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"score out of [0,1] for {line}: {score}")
        if list(self.entries) != sorted(
            self.entries, key=lambda e: (-e[1], e[0].file, e[0].line)
        ):
            raise ValueError("ranking entries violate sort invariant")


def tally(
    matrix: CoverageMatrix, verdicts: list[TestVerdict], line: LineId
) -> SpectrumCounts:
    """Count failing/passing tests, total and line-executing, for one line.

    Every test in the matrix must have exactly one verdict; a verdict for
    a test the matrix does not know raises :class:`InputMismatchError`.
    """
    seen: set[str] = set()
    for v in verdicts:
        if v.test_id not in matrix.executed:
            raise InputMismatchError(f"verdict for unknown test {v.test_id!r}")
        if v.test_id in seen:
            raise InputMismatchError(f"duplicate verdict for test {v.test_id!r}")
        seen.add(v.test_id)
    missing = set(matrix.tests) - seen
    if missing:
        raise InputMismatchError(f"tests without a verdict: {sorted(missing)}")

    t_f = t_p = t_f_e = t_p_e = 0
    for v in verdicts:
        executed = line in matrix.executed[v.test_id]
        if v.passed:
            t_p += 1
            t_p_e += executed
        else:
            t_f += 1
            t_f_e += executed
    return SpectrumCounts(t_f=t_f, t_p=t_p, t_f_e=t_f_e, t_p_e=t_p_e)


def ochiai(c: SpectrumCounts) -> float:
    denom = math.sqrt(c.t_f * (c.t_f_e + c.t_p_e))
    if denom == 0.0:
        return 0.0
    return c.t_f_e / denom


def jaccard(c: SpectrumCounts) -> float:
    denom = c.t_f + c.t_p_e
    if denom == 0:
        return 0.0
    return c.t_f_e / denom


def tarantula(c: SpectrumCounts) -> float:
    # Inner ratios with a zero denominator contribute 0, as does a zero
    # outer denominator; keeps the score total over degenerate suites.
    fail_ratio = c.t_f_e / c.t_f if c.t_f else 0.0
    pass_ratio = c.t_p_e / c.t_p if c.t_p else 0.0
    denom = fail_ratio + pass_ratio
    if denom == 0.0:
        return 0.0
    return fail_ratio / denom


FORMULAS = {
    "ochiai": ochiai,
    "jaccard": jaccard,
    "tarantula": tarantula,
}


def score_lines(
    matrix: CoverageMatrix, verdicts: list[TestVerdict], formula: str = "ochiai"
) -> dict[LineId, float]:
    """Score every line that appears in the matrix with one formula."""
    fn = FORMULAS[formula]
    return {line: fn(tally(matrix, verdicts, line)) for line in matrix.lines()}


def rank_and_filter(
    scores: Mapping[LineId, float],
    threshold: float,
    fallback_k: int = 5,
    formula: str = "ochiai",
) -> SuspiciousnessRanking:
    """Keep lines scoring above the threshold, ordered for prompting.

    When no line clears the threshold the top ``fallback_k`` lines are
    kept instead, so downstream prompts never lose the localization
    section entirely on a weak spectrum.
    """
    ordered = sorted(scores.items(), key=lambda e: (-e[1], e[0].file, e[0].line))
    kept = [(line, s) for line, s in ordered if s > threshold]
    fallback_used = False
    if not kept and ordered:
        kept = ordered[:fallback_k]
        fallback_used = True
    return SuspiciousnessRanking(
        formula=formula,
        entries=tuple(kept),
        threshold=threshold,
        fallback_used=fallback_used,
    )


def serialize_ranking(ranking: SuspiciousnessRanking) -> str:
    """One ``file:line<TAB>score`` record per line, scores at 4 decimals.

    This exact text is embedded in prompts and run logs.
    """
    return "\n".join(f"{line}\t{score:.4f}" for line, score in ranking.entries)
