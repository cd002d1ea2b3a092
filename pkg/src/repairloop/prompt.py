"""Prompt construction and response parsing for the repair loop.

The provider sees a two-part prompt: a per-scenario system text loaded
from a versioned template file, and a user text assembled from fixed,
ordered sections:

    [CODE] -> [FAILING TESTS] -> [PASSING TESTS] -> [SUSPICIOUS LINES]
    -> [WARNINGS] -> [PREVIOUS ATTEMPTS]

Sections that do not apply to a scenario are omitted, never reordered.
Construction is pure and deterministic: identical inputs give
byte-identical prompts, which makes golden-file testing and reproducible
run logs possible.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

from .harness import ExecutionRecord, SourceUnit, TestSpec
from .spectrum import SuspiciousnessRanking, serialize_ranking

SCENARIOS = (1, 2, 3, 4, 5)
SBFL_SCENARIOS = frozenset({3, 5})
ITERATIVE_SCENARIOS = frozenset({4, 5})

TEST_EXCERPT_BYTES = 2000
REASONING_DIGEST_CHARS = 500
PATCH_DIGEST_LINES = 40
MAX_USER_PROMPT_CHARS = 24000
DEFAULT_HISTORY_CAP = 3

_FENCE_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)


class PatchExtractionError(ValueError):
    """The model response contained nothing usable as a patch."""


@dataclass(frozen=True)
class PromptBundle:
    """The system + user message pair sent to a provider."""

    system_text: str
    user_text: str
    scenario: int
    iteration: int

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be 1..5, got {self.scenario}")
        if not self.system_text or not self.user_text:
            raise ValueError("prompt texts must be non-empty")


@dataclass(frozen=True)
class AttemptSummary:
    """Digest of one earlier attempt, kept in episodic memory."""

    iteration: int
    reasoning_digest: str
    patch_digest: str
    failing_after: tuple[str, ...]


@dataclass(frozen=True)
class FeedbackPacket:
    """Everything the user prompt may draw on for one iteration.

    ``tests`` carries the stdin/expected bytes the failing-tests section
    shows next to each outcome's actual output.
    """

    outcomes: tuple[ExecutionRecord, ...] = ()
    tests: tuple[TestSpec, ...] = ()
    ranking: SuspiciousnessRanking | None = None
    warnings: tuple[str, ...] = ()
    history: tuple[AttemptSummary, ...] = ()


def make_attempt_summary(
    iteration: int,
    reasoning: str,
    patch_code: str,
    failing_after: set[str] | list[str] | tuple[str, ...],
) -> AttemptSummary:
    """Digest a finished attempt for the episodic memory.

    The full reasoning and patch stay in the run log; the summary keeps
    only the first 500 characters of reasoning and 40 lines of patch.
    """
    reasoning = reasoning.strip()
    if len(reasoning) > REASONING_DIGEST_CHARS:
        reasoning = reasoning[:REASONING_DIGEST_CHARS] + "..."
    patch_lines = patch_code.splitlines()
    if len(patch_lines) > PATCH_DIGEST_LINES:
        patch_lines = patch_lines[:PATCH_DIGEST_LINES] + ["... (truncated)"]
    return AttemptSummary(
        iteration=iteration,
        reasoning_digest=reasoning,
        patch_digest="\n".join(patch_lines),
        failing_after=tuple(sorted(failing_after)),
    )


def build_system_prompt(scenario: int) -> str:
    """Load the fixed system text for a scenario from its template file."""
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be 1..5, got {scenario}")
    ref = resources.files("repairloop") / "templates" / f"system_{scenario}.txt"
    return ref.read_text()


def _excerpt(data: bytes) -> str:
    clipped = data[:TEST_EXCERPT_BYTES]
    text = clipped.decode("utf-8", errors="replace")
    if len(data) > TEST_EXCERPT_BYTES:
        text += "... (truncated)"
    return repr(text)


def _render_failing(
    outcomes: tuple[ExecutionRecord, ...], tests: tuple[TestSpec, ...]
) -> str:
    if not outcomes:
        return "(no test executions: the program did not compile)"
    failing = [r for r in outcomes if not r.passed]
    if not failing:
        return "(none)"
    by_id = {t.test_id: t for t in tests}
    blocks = []
    for r in failing:
        spec = by_id.get(r.test_id)
        stdin = _excerpt(spec.stdin) if spec else "(unknown)"
        expected = _excerpt(spec.expected_stdout) if spec else "(unknown)"
        blocks.append(
            f"- id: {r.test_id}\n"
            f"  stdin: {stdin}\n"
            f"  expected: {expected}\n"
            f"  actual: {_excerpt(r.actual_stdout)}\n"
            f"  status: {r.status_label()}"
        )
    return "\n".join(blocks)


def _render_passing(outcomes: tuple[ExecutionRecord, ...]) -> str:
    passing = [r.test_id for r in outcomes if r.passed]
    return ", ".join(passing) if passing else "(none)"


def _render_ranking(ranking: SuspiciousnessRanking | None) -> str:
    if ranking is None or not ranking.entries:
        return "(none)"
    return serialize_ranking(ranking)


def summarize_history(
    attempts: list[AttemptSummary] | tuple[AttemptSummary, ...],
    cap: int = DEFAULT_HISTORY_CAP,
) -> str:
    """Render the episodic memory, newest attempt last.

    The most recent ``cap`` attempts appear in full; anything older
    collapses to a single line so the history stays bounded no matter
    how many iterations ran.  Empty history renders as empty text and
    the section is omitted.
    """
    if cap < 1:
        cap = 0
    attempts = sorted(attempts, key=lambda a: a.iteration)
    if not attempts:
        return ""
    collapsed = attempts[:-cap] if cap else attempts
    full = attempts[-cap:] if cap else []
    parts: list[str] = [
        f"iteration {a.iteration}: {len(a.failing_after)} tests still failing"
        for a in collapsed
    ]
    for a in full:
        patch = "\n".join(
            "    " + line if line else "" for line in a.patch_digest.splitlines()
        )
        failing = ", ".join(a.failing_after) if a.failing_after else "(none)"
        parts.append(
            f"--- iteration {a.iteration} ---\n"
            f"reasoning: {a.reasoning_digest}\n"
            f"patch:\n{patch}\n"
            f"still failing: {failing}"
        )
    return "\n".join(parts)


def build_user_prompt(
    code: SourceUnit,
    fb: FeedbackPacket,
    scenario: int,
    history_cap: int = DEFAULT_HISTORY_CAP,
) -> str:
    """Assemble the user message for one provider call.

    Scenario 1 carries the code alone; scenarios 2-5 add the feedback
    sections their scenario allows.  The overall prompt is capped at
    24,000 characters, collapsing the history first before hard
    truncation.
    """
    _check_packet(fb, scenario)
    text = _assemble(code, fb, scenario, history_cap)
    if len(text) > MAX_USER_PROMPT_CHARS:
        text = _assemble(code, fb, scenario, history_cap=0)
    if len(text) > MAX_USER_PROMPT_CHARS:
        text = text[:MAX_USER_PROMPT_CHARS]
    return text


def _check_packet(fb: FeedbackPacket, scenario: int) -> None:
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be 1..5, got {scenario}")
    if (fb.ranking is not None) != (scenario in SBFL_SCENARIOS):
        raise ValueError(
            f"ranking must be present exactly for scenarios 3 and 5 (scenario={scenario})"
        )
    if fb.history and scenario not in ITERATIVE_SCENARIOS:
        raise ValueError(f"history is only valid for scenarios 4 and 5 (scenario={scenario})")


def _assemble(
    code: SourceUnit, fb: FeedbackPacket, scenario: int, history_cap: int
) -> str:
    sections: list[str] = [f"[CODE]\n```c\n{code.code.rstrip(chr(10))}\n```"]
    if scenario >= 2:
        sections.append(f"[FAILING TESTS]\n{_render_failing(fb.outcomes, fb.tests)}")
        sections.append(f"[PASSING TESTS]\n{_render_passing(fb.outcomes)}")
        if scenario in SBFL_SCENARIOS:
            sections.append(f"[SUSPICIOUS LINES]\n{_render_ranking(fb.ranking)}")
        if fb.warnings:
            warn = "\n".join(f"- {w}" for w in fb.warnings)
            sections.append(f"[WARNINGS]\n{warn}")
        if scenario in ITERATIVE_SCENARIOS and fb.history:
            history = summarize_history(fb.history, cap=history_cap)
            if history:
                sections.append(f"[PREVIOUS ATTEMPTS]\n{history}")
    return "\n\n".join(sections) + "\n"


def extract_patch(response: str, label: str = "patch") -> tuple[SourceUnit, str]:
    """Split a model response into (code, reasoning).

    The last fenced code block is the patch; everything outside fences
    is reasoning.  A response without fences is treated as bare code.
    An empty response raises :class:`PatchExtractionError` and counts as
    a failed attempt upstream.
    """
    if not response.strip():
        raise PatchExtractionError("empty model response")
    blocks = _FENCE_RE.findall(response)
    if blocks:
        code = blocks[-1].strip("\n")
        reasoning = _FENCE_RE.sub("", response).strip()
    else:
        code = response.strip()
        reasoning = ""
    if not code:
        raise PatchExtractionError("fenced block was empty")
    return SourceUnit(code=code, label=label), reasoning
