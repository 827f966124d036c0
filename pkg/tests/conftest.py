import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def paper_truth():
    from factorgibbs.study import fixture

    return fixture("paper-sim-1")


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report():
    """Record (and print) one pass/fail line for an acceptance criterion."""

    def _report(number: int, title: str, ok: bool, detail: str = "", seconds: float | None = None):
        timing = f" [{seconds:.1f} s]" if seconds is not None else ""
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}{timing}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
