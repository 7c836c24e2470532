import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_subset(rng, side: int, p: float) -> np.ndarray:
    """Random non-empty subset of the ``side**3`` grid, sorted lexicographically."""
    g = np.stack(np.meshgrid(*[np.arange(side)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    keep = rng.random(len(g)) < p
    if not keep.any():
        keep[rng.integers(len(g))] = True
    return g[keep]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, printed as one line per criterion at the end of the run
ACCEPTANCE: dict = {}


def record(criterion: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n}. {title}: {detail}")
