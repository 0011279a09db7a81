import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from forestseg.synthetic import make_forest  # noqa: E402


@pytest.fixture(scope="session")
def forest():
    return make_forest(n_trees=50, seed=7)


@pytest.fixture(scope="session")
def small_forest():
    return make_forest(n_trees=9, seed=3)


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
