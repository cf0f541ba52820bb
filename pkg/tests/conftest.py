import numpy as np
import pytest

from funcox.coxcore import build_risk_structure
from funcox.design import SurvivalDataset


def small_dataset(n=80, p=3, k=2, m=31, seed=0, ties=False):
    """Survival data with a modest signal on the first scalar and first curve."""
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, m)
    scalar = rng.normal(size=(n, p))
    functional = []
    for _ in range(k):
        a, b, c = rng.normal(size=(3, n, 1))
        functional.append(a * np.sin(np.pi * grid) + b * np.cos(2 * np.pi * grid) + c * grid
                          + 0.1 * rng.normal(size=(n, m)))
    eta = 0.8 * scalar[:, 0]
    if k:
        eta = eta + functional[0] @ np.sin(np.pi * grid) / m
    t = rng.exponential(np.exp(-eta))
    if ties:
        t = np.ceil(t * 4) / 4
    c = rng.exponential(2.0, size=n)
    if ties:
        c = np.ceil(c * 4) / 4 + 0.125
    y = np.minimum(t, c)
    delta = (t <= c).astype(int)
    return SurvivalDataset(y, delta, scalar, functional, grid)


@pytest.fixture
def dataset():
    return small_dataset()


@pytest.fixture
def risk(dataset):
    return build_risk_structure(dataset.y, dataset.delta)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion."""
    def record(criterion: str, passed: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
