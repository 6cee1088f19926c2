import numpy as np
import pytest

from nlrestore import sinusoid_mixture_prior

SR = 16000
LENGTH = 8192


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mixture_prior():
    return sinusoid_mixture_prior(LENGTH, SR)


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion and assert on it."""

    def record(name, ok, detail, hard=True):
        status = "PASS" if ok else ("FAIL" if hard else "WARN")
        line = f"{status} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        if hard:
            assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
