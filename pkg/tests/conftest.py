import numpy as np
import pytest

from emmdit.numcore.tensor import set_precision

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _standard_precision():
    set_precision("standard")
    yield
    set_precision("standard")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def report_criterion():
    """Record and print one pass/fail line for an acceptance criterion."""

    def record(label: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
