"""Shared fixtures: the hand-checkable 8-row instance and cached simulated samples."""

from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from peeriv import DgpConfig, DyadDataset, generate, load_csv

DATA = Path(__file__).parent / "data"


def hand8() -> DyadDataset:
    """Eight covariate-free dyads, four per instrument arm.

    Arm z1=1: D2*Y1 = (2, 2, 1, 0), D1*D2 = (1, 1, 0, 0);
    arm z1=0: D2*Y1 = (2, 1, 1, 0), D1*D2 = (1, 0, 0, 0).
    Wald ratio (1.25 - 1.00) / (0.50 - 0.25) = 1.
    """
    return load_csv(DATA / "hand8.csv")


@lru_cache(maxsize=None)
def sim(n: int, seed: int) -> DyadDataset:
    return generate(DgpConfig(n, seed))


@pytest.fixture
def hand():
    return hand8()


@pytest.fixture(scope="session")
def sim5000():
    return sim(5000, 101)


@pytest.fixture(scope="session")
def sim20000():
    return sim(20000, 202)


def constant_x(ds: DyadDataset, value=0.3) -> DyadDataset:
    return ds.replace(x=np.full((ds.n, 1), value))


# -- acceptance report -------------------------------------------------------

ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion():
    """Record one ``PASS``/``FAIL`` line per acceptance criterion."""
    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
