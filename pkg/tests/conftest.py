import numpy as np
import pytest

from bartdr.bart import BartConfig
from bartdr.rng import RngStream

DESK = BartConfig(m=50, burn=100, draws=200)
QUICK = BartConfig(m=20, burn=50, draws=100)


@pytest.fixture
def gen():
    return RngStream(20240101).generator()


@pytest.fixture
def stream():
    return RngStream(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running Monte Carlo checks")


VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the acceptance summary and echo it."""

    def record(label: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
