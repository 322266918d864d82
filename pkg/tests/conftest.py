import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.register_profile("ci", deadline=None, max_examples=50)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def chain_moments(probs):
    """Return-time mean and variance from the transition matrix.

    Solves the first-passage equations ``h = 1 + Q h`` and
    ``s = 1 + Q (2 h + s)`` over the non-zero states directly with numpy, so
    it shares no code with the recursions under test.
    """
    p = np.asarray(probs, dtype=float)
    m = p.size - 1
    P = np.zeros((m + 1, m + 1))
    for j in range(m + 1):
        P[j, 0] += p[j]
        P[j, min(j + 1, m)] += 1.0 - p[j]
    # hitting time of 0 from each state, counting the step into 0
    Q = P.copy()
    Q[:, 0] = 0.0
    A = np.eye(m + 1) - Q
    h = np.linalg.solve(A, np.ones(m + 1))
    s = np.linalg.solve(A, np.ones(m + 1) + 2.0 * (Q @ h))
    # X is the time to come back to 0 starting from 0
    return h[0], s[0] - h[0] ** 2


def chain_stationary(probs):
    p = np.asarray(probs, dtype=float)
    m = p.size - 1
    P = np.zeros((m + 1, m + 1))
    for j in range(m + 1):
        P[j, 0] += p[j]
        P[j, min(j + 1, m)] += 1.0 - p[j]
    w, v = np.linalg.eig(P.T)
    vec = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    return vec / vec.sum()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, filled by tests/test_acceptance.py and echoed in the summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
