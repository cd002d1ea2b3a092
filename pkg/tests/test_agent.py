"""Repair-loop semantics: outcome classification and whole scripted sessions.

Every end-to-end test compiles and runs real C through the harness; the
only faked part is the model, replaced by scripted responses.
"""

from __future__ import annotations

import json

import pytest

from repairloop.agent import (
    RepairAttempt,
    SessionConfig,
    Verdict,
    classify_outcome,
    run_session,
    select_best_attempt,
)
from repairloop.bench import BugCase
from repairloop.provider import ProviderUnavailableError, ScriptedProvider

from conftest import (
    ADD_BUG_SRC,
    ADD_FIX_SRC,
    ADD_NOCOMPILE_SRC,
    ADD_PARTIAL_SRC,
    ADD_USELESS_SRC,
    add_bug_tests,
    response_with,
)


class CountingProvider:
    def __init__(self, inner):
        self.inner = inner
        self.calls = 0
        self.model_id = inner.model_id

    def complete(self, bundle):
        self.calls += 1
        return self.inner.complete(bundle)


class DeadProvider:
    model_id = "dead"

    def complete(self, bundle):
        raise ProviderUnavailableError("no backend reachable")


def cfg(scenario: int = 4, **kw) -> SessionConfig:
    kw.setdefault("max_iterations", 4)
    kw.setdefault("test_timeout", 5.0)
    return SessionConfig(scenario=scenario, **kw)


class TestClassifyOutcome:
    def test_all_fixed_is_complete(self):
        v = classify_outcome({"t1", "t2"}, set(), {"t1", "t2", "t3"})
        assert v is Verdict.COMPLETE_FIX

    def test_some_fixed_is_partial(self):
        v = classify_outcome({"t1", "t2", "t3"}, {"t3"}, {"t1", "t2", "t3"})
        assert v is Verdict.PARTIAL_IMPROVEMENT

    def test_nothing_fixed_is_none(self):
        v = classify_outcome({"t1"}, {"t1"}, {"t1", "t2"})
        assert v is Verdict.NO_IMPROVEMENT

    def test_regression_blocks_complete_and_partial(self):
        # every initially-failing test fixed, but a passing test broke:
        # "some but not all" does not hold, so this is NoImprovement
        v = classify_outcome({"t1"}, {"t2"}, {"t1", "t2"})
        assert v is Verdict.NO_IMPROVEMENT

    def test_partial_with_regression_stays_partial(self):
        v = classify_outcome({"t1", "t2"}, {"t2", "t3"}, {"t1", "t2", "t3"})
        assert v is Verdict.PARTIAL_IMPROVEMENT

    def test_initial_must_be_subset(self):
        with pytest.raises(ValueError):
            classify_outcome({"ghost"}, set(), {"t1"})


def _attempt(iteration: int, failing: set[str]) -> RepairAttempt:
    return RepairAttempt(
        iteration=iteration,
        prompt=None,
        exchange=None,
        patch=None,
        compile=None,
        outcomes=(),
        failing_after=frozenset(failing),
    )


class TestSelectBestAttempt:
    def test_minimum_failing_wins(self):
        attempts = [
            _attempt(1, {"a", "b", "c"}),
            _attempt(2, {"a"}),
            _attempt(3, {"a", "b"}),
        ]
        assert select_best_attempt(attempts).iteration == 2

    def test_tie_goes_to_earliest(self):
        attempts = [_attempt(1, {"a", "b"}), _attempt(2, {"b", "c"})]
        assert select_best_attempt(attempts).iteration == 1

    def test_single_attempt(self):
        attempts = [_attempt(1, {"a"})]
        assert select_best_attempt(attempts).iteration == 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            select_best_attempt([])


class TestEndToEnd:
    def test_ground_truth_fix_converges_first_iteration(self, add_bug, tmp_path):
        provider = ScriptedProvider([response_with(ADD_FIX_SRC)])
        report = run_session(add_bug, cfg(4), provider, workdir=tmp_path / "s")
        assert report.verdict is Verdict.COMPLETE_FIX
        assert report.iterations_used == 1
        assert report.initial_failing == {"1", "2"}
        assert report.final_failing == frozenset()

    def test_fix_at_third_position(self, add_bug, tmp_path):
        provider = ScriptedProvider(
            [
                response_with(ADD_USELESS_SRC),
                response_with(ADD_BUG_SRC),
                response_with(ADD_FIX_SRC),
            ]
        )
        report = run_session(add_bug, cfg(4), provider, workdir=tmp_path / "s")
        assert report.verdict is Verdict.COMPLETE_FIX
        assert report.iterations_used == 3

    def test_four_useless_patches_hit_loop_limit(self, add_bug, tmp_path):
        provider = CountingProvider(ScriptedProvider([response_with(ADD_USELESS_SRC)]))
        report = run_session(add_bug, cfg(4), provider, workdir=tmp_path / "s")
        assert report.verdict is Verdict.NO_IMPROVEMENT
        assert report.iterations_used == 4
        assert provider.calls == 4

    def test_partial_fix_detected(self, add_bug, tmp_path):
        provider = ScriptedProvider([response_with(ADD_PARTIAL_SRC)])
        report = run_session(add_bug, cfg(4, max_iterations=1), provider,
                             workdir=tmp_path / "s")
        assert report.verdict is Verdict.PARTIAL_IMPROVEMENT
        assert report.final_failing == {"2"}
        assert report.regressions == frozenset()

    def test_early_exit_stops_provider_calls(self, add_bug, tmp_path):
        provider = CountingProvider(
            ScriptedProvider([response_with(ADD_FIX_SRC), response_with(ADD_USELESS_SRC)])
        )
        report = run_session(add_bug, cfg(5), provider, workdir=tmp_path / "s")
        assert report.verdict is Verdict.COMPLETE_FIX
        assert provider.calls == 1

    @pytest.mark.parametrize("scenario", [1, 2, 3])
    def test_single_shot_scenarios_call_once(self, add_bug, tmp_path, scenario):
        provider = CountingProvider(ScriptedProvider([response_with(ADD_USELESS_SRC)]))
        report = run_session(add_bug, cfg(scenario), provider, workdir=tmp_path / "s")
        assert provider.calls == 1
        assert report.iterations_used == 1
        assert report.verdict is Verdict.NO_IMPROVEMENT

    def test_noncompiling_patch_fails_all_and_feeds_diagnostics(self, add_bug, tmp_path):
        provider = ScriptedProvider(
            [response_with(ADD_NOCOMPILE_SRC), response_with(ADD_FIX_SRC)]
        )
        report = run_session(add_bug, cfg(4), provider, workdir=tmp_path / "s")
        assert report.verdict is Verdict.COMPLETE_FIX
        assert report.iterations_used == 2
        first, second = report.attempts
        assert first.failing_after == {"1", "2"}
        assert first.compile is not None and not first.compile.success
        assert "[WARNINGS]" in second.prompt.user_text
        assert "error:" in second.prompt.user_text

    def test_extraction_failure_keeps_previous_failing_set(self, add_bug, tmp_path):
        provider = ScriptedProvider(["   ", response_with(ADD_FIX_SRC)])
        report = run_session(add_bug, cfg(4), provider, workdir=tmp_path / "s")
        assert report.iterations_used == 2
        assert report.attempts[0].patch is None
        assert report.attempts[0].failing_after == {"1", "2"}
        assert report.verdict is Verdict.COMPLETE_FIX

    def test_provider_outage_yields_no_improvement_report(self, add_bug, tmp_path):
        report = run_session(add_bug, cfg(5), DeadProvider(), workdir=tmp_path / "s")
        assert report.verdict is Verdict.NO_IMPROVEMENT
        assert report.error is not None
        assert "no backend" in report.error

    def test_baseline_compile_failure_proceeds(self, tmp_path):
        bug = BugCase(
            bug_id="broken-bug",
            buggy_source=ADD_NOCOMPILE_SRC,
            tests=add_bug_tests(),
        )
        provider = ScriptedProvider([response_with(ADD_FIX_SRC)])
        report = run_session(bug, cfg(5), provider, workdir=tmp_path / "s")
        assert report.initial_failing == {"1", "2"}
        assert report.verdict is Verdict.COMPLETE_FIX

    def test_already_passing_bug_short_circuits(self, tmp_path):
        bug = BugCase(bug_id="fine", buggy_source=ADD_FIX_SRC, tests=add_bug_tests())
        provider = CountingProvider(ScriptedProvider(["unused"]))
        report = run_session(bug, cfg(5), provider, workdir=tmp_path / "s")
        assert report.verdict is Verdict.COMPLETE_FIX
        assert report.iterations_used == 0
        assert provider.calls == 0

    def test_http_and_scripted_providers_behave_identically(self, add_bug, tmp_path):
        from repairloop.provider import HttpProvider, ProviderConfig

        text = response_with(ADD_FIX_SRC)
        http = HttpProvider(
            ProviderConfig(endpoint="http://unused/v1", model_id="scripted"),
            send=lambda payload: text,
            sleep=lambda _: None,
        )
        scripted = ScriptedProvider([text])
        r_http = run_session(add_bug, cfg(5), http, workdir=tmp_path / "h")
        r_scripted = run_session(add_bug, cfg(5), scripted, workdir=tmp_path / "s")
        assert r_http.verdict == r_scripted.verdict
        assert r_http.iterations_used == r_scripted.iterations_used
        assert [a.prompt.user_text for a in r_http.attempts] == [
            a.prompt.user_text for a in r_scripted.attempts
        ]


class TestPromptProgression:
    def run_two_iterations(self, add_bug, tmp_path, scenario: int):
        provider = ScriptedProvider(
            [response_with(ADD_USELESS_SRC), response_with(ADD_FIX_SRC)]
        )
        workdir = tmp_path / f"s{scenario}-{len(list(tmp_path.iterdir()))}"
        return run_session(add_bug, cfg(scenario), provider, workdir=workdir)

    def test_scenario5_iteration1_has_sbfl_no_history(self, add_bug, tmp_path):
        report = self.run_two_iterations(add_bug, tmp_path, 5)
        first = report.attempts[0].prompt.user_text
        assert "[SUSPICIOUS LINES]" in first
        assert "[PREVIOUS ATTEMPTS]" not in first

    def test_iteration2_references_exactly_one_prior_attempt(self, add_bug, tmp_path):
        report = self.run_two_iterations(add_bug, tmp_path, 5)
        second = report.attempts[1].prompt.user_text
        assert "[PREVIOUS ATTEMPTS]" in second
        assert second.count("--- iteration") == 1
        assert "--- iteration 1 ---" in second

    def test_scenario5_sections_superset_of_scenario4(self, add_bug, tmp_path):
        r4 = self.run_two_iterations(add_bug, tmp_path, 4)
        r5 = self.run_two_iterations(add_bug, tmp_path, 5)
        for i in range(2):
            sections4 = {l for l in r4.attempts[i].prompt.user_text.splitlines()
                         if l.startswith("[")}
            sections5 = {l for l in r5.attempts[i].prompt.user_text.splitlines()
                         if l.startswith("[")}
            assert sections4 <= sections5

    def test_stage_timings_recorded(self, add_bug, tmp_path):
        report = self.run_two_iterations(add_bug, tmp_path, 4)
        for attempt in report.attempts:
            assert set(attempt.stage_timings) == {
                "feedback", "prompt", "complete", "extract", "execute",
            }
            assert all(t >= 0 for t in attempt.stage_timings.values())

    def test_scripted_session_is_deterministic(self, add_bug, tmp_path):
        (tmp_path / "1").mkdir()
        (tmp_path / "2").mkdir()
        reports = [
            self.run_two_iterations(add_bug, tmp_path / str(i), 5) for i in (1, 2)
        ]
        a, b = reports
        assert a.verdict == b.verdict
        assert a.iterations_used == b.iterations_used
        assert [x.prompt.user_text for x in a.attempts] == [
            x.prompt.user_text for x in b.attempts
        ]


class TestRunLog:
    def test_log_contains_full_session_trace(self, add_bug, tmp_path):
        provider = ScriptedProvider([response_with(ADD_FIX_SRC)])
        report = run_session(
            add_bug, cfg(5), provider, workdir=tmp_path / "s", runs_dir=tmp_path / "runs"
        )
        logs = list((tmp_path / "runs" / "add-bug").glob("*.jsonl"))
        assert len(logs) == 1
        records = [json.loads(line) for line in logs[0].read_text().splitlines()]
        types = [r["type"] for r in records]
        assert types[0] == "config"
        assert "prompt" in types and "response" in types and "execution" in types
        assert types[-1] == "report"
        final = records[-1]
        assert final["verdict"] == report.verdict.value
        assert final["bug_id"] == "add-bug"
        prompt_record = next(r for r in records if r["type"] == "prompt")
        assert prompt_record["user_text"] == report.attempts[0].prompt.user_text

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SessionConfig(scenario=7)
        with pytest.raises(ValueError):
            SessionConfig(max_iterations=0)
        with pytest.raises(ValueError):
            SessionConfig(threshold=1.5)
        with pytest.raises(ValueError):
            SessionConfig(formula="dstar")
