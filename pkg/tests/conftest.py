import numpy as np
import pytest
from scipy.special import expit

from ordtwophase.ordinal import Cohort

ACCEPTANCE_LINES = []


def make_cohort(seed, n=1500, beta=(0.5, -0.1, -0.1), alphas=(1.16, 1.82, 2.29), rho=0.2):
    rng = np.random.default_rng(seed)
    C = np.eye(3)
    C[0, 1] = C[1, 0] = rho
    W = rng.standard_normal((n, 3)) @ np.linalg.cholesky(C).T
    F = expit(np.asarray(alphas)[None, :] + (W @ np.asarray(beta))[:, None])
    y = 1 + (rng.random(n)[:, None] > F).sum(1)
    return Cohort(y=y, z=W[:, 1:], x=W[:, 0], k=len(alphas) + 1)


@pytest.fixture
def cohort():
    return make_cohort(11)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
