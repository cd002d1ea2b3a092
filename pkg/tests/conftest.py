"""Shared fixtures: handcrafted C programs, corpora, and scripted responses.

The C sources are written so their interesting line numbers are stable;
coverage tests freeze expectations against these exact texts.
"""

from __future__ import annotations

from pathlib import Path

import pytest

from repairloop.bench import BugCase
from repairloop.harness import TestSpec

# --- C sources ------------------------------------------------------------

HELLO_SRC = """\
#include <stdio.h>

int main(void) {
    printf("hello\\n");
    return 0;
}
"""

BAD_SYNTAX_SRC = """\
#include <stdio.h>

int main(void) {
    int x = 1
    printf("%d\\n", x);
    return 0;
}
"""

IMPLICIT_DECL_SRC = """\
#include <stdio.h>

int main(void) {
    printf("%d\\n", helper());
    return 0;
}

int helper(void) {
    return 7;
}
"""

ECHO_SRC = """\
#include <stdio.h>

int main(void) {
    int x;
    if (scanf("%d", &x) != 1) {
        return 1;
    }
    printf("%d\\n", x);
    return 0;
}
"""

INFINITE_LOOP_SRC = """\
int main(void) {
    for (;;) {
    }
    return 0;
}
"""

SIGFPE_SRC = """\
#include <stdio.h>

int main(void) {
    int a;
    if (scanf("%d", &a) != 1) {
        return 1;
    }
    printf("%d\\n", 100 / a);
    return 0;
}
"""

# Branch taken depends on the sign of the input; used to pin per-test
# coverage rows.  Line numbers matter: pos-branch body is line 7, neg is 9.
BRANCH_SRC = """\
#include <stdio.h>

int main(void) {
    int x;
    if (scanf("%d", &x) != 1) return 1;
    if (x > 0) {
        printf("pos\\n");
    } else {
        printf("neg\\n");
    }
    return 0;
}
"""

# Line 9 (the special-case branch body) is executed only by input 42; a
# test feeding 42 and expecting plain echo fails, making line 9 the
# perfectly correlated suspect.
LOCALIZE_SRC = """\
#include <stdio.h>

int main(void) {
    int x;
    if (scanf("%d", &x) != 1) {
        return 1;
    }
    if (x == 42) {
        printf("special\\n");
    } else {
        printf("%d\\n", x);
    }
    return 0;
}
"""
LOCALIZE_BUGGY_LINE = 9

# The repair-loop workhorse: should print a + b, prints a - b instead.
ADD_BUG_SRC = """\
#include <stdio.h>

int main(void) {
    int a, b;
    if (scanf("%d %d", &a, &b) != 2) {
        return 1;
    }
    printf("%d\\n", a - b);
    return 0;
}
"""

ADD_FIX_SRC = ADD_BUG_SRC.replace("a - b", "a + b")
# Fixes the a=0 test only: prints b instead of a + b.
ADD_PARTIAL_SRC = ADD_BUG_SRC.replace("a - b", "b")
# Compiles, still fails every test.
ADD_USELESS_SRC = ADD_BUG_SRC.replace("a - b", "a * b")
ADD_NOCOMPILE_SRC = ADD_BUG_SRC.replace("a - b);", "a - b)")


def add_bug_tests() -> tuple[TestSpec, ...]:
    return (
        TestSpec("1", b"0 5\n", b"5\n"),
        TestSpec("2", b"2 3\n", b"5\n"),
    )


@pytest.fixture
def add_bug() -> BugCase:
    return BugCase(bug_id="add-bug", buggy_source=ADD_BUG_SRC, tests=add_bug_tests())


def response_with(code: str, reasoning: str = "The arithmetic operator is wrong.") -> str:
    return f"{reasoning}\n\n```c\n{code}```\n"


def write_tests_dir(tests_dir: Path, tests: tuple[TestSpec, ...]) -> None:
    tests_dir.mkdir(parents=True, exist_ok=True)
    for t in tests:
        (tests_dir / f"{t.test_id}.in").write_bytes(t.stdin)
        (tests_dir / f"{t.test_id}.out").write_bytes(t.expected_stdout)


def make_corpus(root: Path, n_cases: int = 3) -> Path:
    """A small manifest corpus of add-bug clones."""
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(1, n_cases + 1):
        bug_id = f"case{i}"
        src = root / f"{bug_id}.c"
        src.write_text(ADD_BUG_SRC)
        write_tests_dir(root / "tests" / bug_id, add_bug_tests())
        rows.append(f"{bug_id}\t{bug_id}.c\ttests/{bug_id}")
    (root / "manifest.tsv").write_text("\n".join(rows) + "\n")
    return root


# --- acceptance reporting --------------------------------------------------

_ACCEPTANCE_RESULTS: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(criterion, title): marks a top-level acceptance criterion"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and report.when == "call":
        key = str(marker.kwargs.get("criterion", "?"))
        title = marker.kwargs.get("title", item.name)
        _ACCEPTANCE_RESULTS[key] = ("PASS" if report.passed else "FAIL", title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE_RESULTS, key=lambda k: (len(k), k)):
        status, title = _ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {status} - {title}")
