import numpy as np
import pytest
from hypothesis import settings

from molbuild.chem import Canvas

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_canvas(rng: np.random.Generator, n: int, elements=(1, 6, 7, 8), spacing: float = 1.1) -> Canvas:
    """Random canvas whose atoms are at least ``0.7 * spacing`` apart.

    Bond lengths are jittered so nearest-neighbour ties have probability zero.
    """
    pos = []
    while len(pos) < n:
        if not pos:
            pos.append(np.zeros(3))
            continue
        anchor = pos[rng.integers(len(pos))]
        v = rng.standard_normal(3)
        cand = anchor + spacing * rng.uniform(0.95, 1.2) * v / np.linalg.norm(v)
        if min(np.linalg.norm(cand - p) for p in pos) > 0.7 * spacing:
            pos.append(cand)
    return Canvas(rng.choice(elements, size=n).tolist(), np.array(pos))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
