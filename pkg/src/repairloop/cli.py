"""Command-line surface: localize, repair, bench, report.

Exit codes are a function of outcome class only:
  0  success (repair: complete fix)
  1  repair ran but did not reach a complete fix
  2  input problems (compile failure, bad manifest, corrupt logs, usage)
  3  provider misconfiguration
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from pathlib import Path

from . import bench as bench_mod
from .agent import SessionConfig, Verdict, run_session
from .bench import (
    BugCase,
    DatasetError,
    compute_metrics,
    emit_report,
    format_table,
    load_dataset,
    load_reports_from_runs,
    run_benchmark,
)
from .harness import (
    CompilerNotFoundError,
    SourceUnit,
    clean_workdir,
    compile_with_coverage,
    run_suite,
)
from .provider import (
    HttpProvider,
    ProviderConfig,
    ProviderUnavailableError,
    ScriptedProvider,
)
from .spectrum import (
    FORMULAS,
    LineId,
    SuspiciousnessRanking,
    TestVerdict,
    rank_and_filter,
    score_lines,
    serialize_ranking,
)

EXIT_OK = 0
EXIT_UNFIXED = 1
EXIT_INPUT = 2
EXIT_PROVIDER = 3

SCENARIO_NAMES = {
    "standalone": 1,
    "tests": 2,
    "tests-sbfl": 3,
    "sbfl": 3,
    "cot": 4,
    "cot-tests": 4,
    "cot-sbfl": 5,
}


def parse_scenario(value: str) -> int:
    """Accept a scenario as a number (``5``) or a name (``cot-sbfl``)."""
    if value in SCENARIO_NAMES:
        return SCENARIO_NAMES[value]
    try:
        scenario = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"unknown scenario {value!r} (use 1-5 or one of {sorted(SCENARIO_NAMES)})"
        ) from None
    if scenario not in (1, 2, 3, 4, 5):
        raise argparse.ArgumentTypeError(f"scenario must be 1..5, got {scenario}")
    return scenario


def _parse_scenario_set(value: str) -> list[int]:
    parts = [p for p in value.split(",") if p.strip()]
    if not parts:
        raise argparse.ArgumentTypeError("scenario set must not be empty")
    seen: list[int] = []
    for part in parts:
        s = parse_scenario(part.strip())
        if s not in seen:
            seen.append(s)
    return sorted(seen)


def _add_session_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", type=parse_scenario, default=5,
                   help="feedback scenario, 1-5 or name (default: 5 / cot-sbfl)")
    p.add_argument("--formula", choices=sorted(FORMULAS), default="ochiai",
                   help="suspiciousness formula (default: ochiai)")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="suspiciousness filter threshold (default: 0.5)")
    p.add_argument("--max-iterations", type=int, default=4,
                   help="loop limit for iterative scenarios (default: 4)")
    p.add_argument("--timeout", type=float, default=120.0,
                   help="per-test wall-clock limit in seconds (default: 120)")
    p.add_argument("--fallback-k", type=int, default=5,
                   help="lines kept when nothing clears the threshold (default: 5)")
    p.add_argument("--history-cap", type=int, default=3,
                   help="prior attempts rendered in full (default: 3)")
    p.add_argument("--memory-limit", type=int, default=1 << 30,
                   help="test address-space cap in bytes (default: 1 GiB)")


def _add_provider_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--provider", choices=("http", "scripted"), default="http",
                   help="LLM backend (default: http)")
    p.add_argument("--script", type=Path, default=None,
                   help="JSON list of canned responses for --provider scripted")
    p.add_argument("--model", default=None,
                   help="model id for the HTTP provider (default: $REPAIRLOOP_MODEL)")


def _session_config(args: argparse.Namespace, scenario: int | None = None) -> SessionConfig:
    return SessionConfig(
        scenario=scenario if scenario is not None else args.scenario,
        max_iterations=args.max_iterations,
        formula=args.formula,
        threshold=args.threshold,
        fallback_k=args.fallback_k,
        test_timeout=args.timeout,
        history_cap=args.history_cap,
        memory_limit=args.memory_limit,
    )


def _make_provider(args: argparse.Namespace):
    """Build a provider, or a per-case factory for scripted benchmarks."""
    if args.provider == "scripted":
        if args.script is None:
            raise ProviderUnavailableError("--provider scripted requires --script FILE")
        try:
            script = json.loads(args.script.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ProviderUnavailableError(f"cannot read script {args.script}: {exc}") from exc
        if not isinstance(script, list) or not all(isinstance(s, str) for s in script):
            raise ProviderUnavailableError(f"{args.script} must hold a JSON list of strings")
        return script
    config = ProviderConfig.from_env(model_id=args.model)
    return HttpProvider(config)


def _load_bug(source: Path, tests_dir: Path) -> BugCase:
    tests = bench_mod.load_tests_from_dir(tests_dir)
    return BugCase(bug_id=source.stem, buggy_source=source.read_text(), tests=tests)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_localize(args: argparse.Namespace) -> int:
    source = Path(args.source)
    bug = _load_bug(source, Path(args.tests_dir))
    workdir = Path(tempfile.mkdtemp(prefix="rl-localize-"))
    try:
        compiled = compile_with_coverage(SourceUnit(bug.buggy_source), workdir)
        if not compiled.success:
            for d in compiled.diagnostics:
                print(d.text, file=sys.stderr)
            return EXIT_INPUT
        suite = run_suite(compiled, list(bug.tests), timeout=args.timeout,
                          memory_limit=args.memory_limit)
        verdicts = [TestVerdict(r.test_id, r.passed, r.timed_out) for r in suite.records]
        scores = score_lines(suite.matrix, verdicts, args.formula)
        ranking = rank_and_filter(scores, args.threshold, args.fallback_k, args.formula)
        ranking = _relabel(ranking, source.name)
        serialized = serialize_ranking(ranking)
        if serialized:
            print(serialized)
        return EXIT_OK
    finally:
        clean_workdir(workdir)


def _relabel(ranking: SuspiciousnessRanking, filename: str) -> SuspiciousnessRanking:
    # The harness compiles a copy named src.c; report lines against the
    # user's own file name instead.
    return SuspiciousnessRanking(
        formula=ranking.formula,
        entries=tuple((LineId(filename, l.line), s) for l, s in ranking.entries),
        threshold=ranking.threshold,
        fallback_used=ranking.fallback_used,
    )


def cmd_repair(args: argparse.Namespace) -> int:
    source = Path(args.source)
    bug = _load_bug(source, Path(args.tests_dir))
    provider_or_script = _make_provider(args)
    provider = (
        ScriptedProvider(provider_or_script)
        if isinstance(provider_or_script, list)
        else provider_or_script
    )
    out_dir = Path(args.out)
    cfg = _session_config(args)
    report = run_session(bug, cfg, provider, runs_dir=out_dir / "runs")
    delta = len(report.final_failing) - len(report.initial_failing)
    print(f"bug: {report.bug_id}")
    print(f"verdict: {report.verdict.value}")
    print(f"iterations used: {report.iterations_used}")
    print(
        f"failing tests: {len(report.initial_failing)} -> {len(report.final_failing)}"
        f" ({delta:+d})"
    )
    if report.regressions:
        print(f"regressions: {', '.join(sorted(report.regressions))}")
    if report.error:
        print(f"error: {report.error}")
    print(f"run log under: {out_dir / 'runs' / report.bug_id}")
    return EXIT_OK if report.verdict is Verdict.COMPLETE_FIX else EXIT_UNFIXED


def cmd_bench(args: argparse.Namespace) -> int:
    root = Path(args.manifest)
    if root.is_file():
        root = root.parent
    index = load_dataset(root)
    provider_or_script = _make_provider(args)
    out_dir = Path(args.out)

    reports = []
    for scenario in args.scenarios:
        cfg = _session_config(args, scenario=scenario)
        if isinstance(provider_or_script, list):
            script = provider_or_script
            provider = lambda bug: ScriptedProvider(script)  # noqa: E731 - fresh script per case
        else:
            provider = provider_or_script
        reports.extend(
            run_benchmark(index, cfg, provider, parallelism=args.parallelism,
                          runs_dir=out_dir / "runs")
        )
    if not reports:
        print("no cases in corpus", file=sys.stderr)
        return EXIT_INPUT
    metrics = compute_metrics(reports)
    json_path, table_path = emit_report(metrics, out_dir)
    print(format_table(metrics), end="")
    print(f"reports written to {json_path} and {table_path}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    reports = load_reports_from_runs(Path(args.runs_dir))
    metrics = compute_metrics(reports)
    print(format_table(metrics), end="")
    if args.out:
        emit_report(metrics, Path(args.out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repairloop",
        description="SBFL-guided iterative LLM repair for single-file C programs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_loc = sub.add_parser("localize", help="rank suspicious lines for one program")
    p_loc.add_argument("source", help="C source file")
    p_loc.add_argument("tests_dir", help="directory of <n>.in / <n>.out pairs")
    _add_session_flags(p_loc)
    p_loc.set_defaults(func=cmd_localize)

    p_rep = sub.add_parser("repair", help="run one repair session")
    p_rep.add_argument("source", help="C source file")
    p_rep.add_argument("tests_dir", help="directory of <n>.in / <n>.out pairs")
    _add_session_flags(p_rep)
    _add_provider_flags(p_rep)
    p_rep.add_argument("--out", default="out", help="output directory (default: out)")
    p_rep.set_defaults(func=cmd_repair)

    p_bench = sub.add_parser("bench", help="run the benchmark over a corpus")
    p_bench.add_argument("manifest", help="corpus root (or its manifest.tsv)")
    p_bench.add_argument("--scenarios", dest="scenarios",
                         type=_parse_scenario_set, default=[5],
                         help="comma-separated scenario set, e.g. 1,5 (default: 5)")
    p_bench.add_argument("--parallelism", type=int, default=1,
                         help="concurrent sessions (default: 1)")
    _add_session_flags(p_bench)
    _add_provider_flags(p_bench)
    p_bench.add_argument("--out", default="out", help="output directory (default: out)")
    p_bench.set_defaults(func=cmd_bench)

    p_report = sub.add_parser("report", help="recompute metrics from run logs")
    p_report.add_argument("runs_dir", help="directory containing session .jsonl logs")
    p_report.add_argument("--out", default=None, help="also write report files here")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ProviderUnavailableError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (DatasetError, FileNotFoundError, CompilerNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
