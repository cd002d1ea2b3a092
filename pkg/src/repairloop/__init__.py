"""SBFL-guided iterative LLM repair loop for single-file C programs.

The pipeline: compile with coverage instrumentation, run the test suite,
localize suspicious lines from the per-test spectrum, prompt a model
with structured feedback, validate its patch, and iterate with memory of
earlier attempts until the suite passes or the loop limit is reached.
"""

from .agent import SessionConfig, SessionReport, Verdict, run_session
from .bench import BugCase, compute_metrics, load_dataset, run_benchmark
from .harness import SourceUnit, TestSpec
from .provider import HttpProvider, ProviderConfig, RetryPolicy, ScriptedProvider
from .spectrum import (
    CoverageMatrix,
    LineId,
    SuspiciousnessRanking,
    TestVerdict,
    jaccard,
    ochiai,
    rank_and_filter,
    tally,
    tarantula,
)

__version__ = "0.1.0"

__all__ = [
    "BugCase",
    "CoverageMatrix",
    "HttpProvider",
    "LineId",
    "ProviderConfig",
    "RetryPolicy",
    "ScriptedProvider",
    "SessionConfig",
    "SessionReport",
    "SourceUnit",
    "SuspiciousnessRanking",
    "TestSpec",
    "TestVerdict",
    "Verdict",
    "compute_metrics",
    "jaccard",
    "load_dataset",
    "ochiai",
    "rank_and_filter",
    "run_benchmark",
    "run_session",
    "tally",
    "tarantula",
]
