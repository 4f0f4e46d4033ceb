import numpy as np
import pytest

_CRITERIA = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record ``(number, passed, detail)`` for the acceptance summary."""

    def record(number, passed, detail):
        _CRITERIA.append((number, bool(passed), detail))
        return passed

    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiment (acceptance criteria 5-8)")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
