import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cme.model import DataSet, SubjectBlock, draw_projection_pair

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_dataset(rng, n=3, m=4, p=5, q=3, sizes=None):
    sizes = [m] * n if sizes is None else list(sizes)
    blocks = []
    for i, mi in enumerate(sizes):
        X = rng.standard_normal((mi, p))
        Z = rng.standard_normal((mi, q))
        y = rng.standard_normal(mi)
        blocks.append(SubjectBlock(i, y, X, Z))
    return DataSet.from_blocks(blocks, p, q)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny(rng):
    d = make_dataset(rng, n=4, m=3, p=5, q=3)
    proj = draw_projection_pair(3, 2, 2, seed=7)
    return d, proj


# one PASS/FAIL line per acceptance criterion, shown at the end of the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
