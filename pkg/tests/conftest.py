import numpy as np
import pytest

from provprof.dataset import BINARY, CONTINUOUS, from_arrays
from provprof.learners import LearnerSpec
from provprof.nuisance import NuisanceConfig


def toy4():
    return from_arrays(np.full((4, 1), 0.5), [1, 1, 2, 2], [1.0, 0.0, 1.0, 1.0], BINARY)


def toy6():
    W = np.array([0, 0, 1, 0, 1, 1], dtype=float)[:, None]
    return from_arrays(W, [1, 1, 1, 2, 2, 2], [1.0, 0.0, 1.0, 0.0, 1.0, 1.0], BINARY)


def glm_config(**kw):
    g = LearnerSpec.make("glm")
    return NuisanceConfig(propensity=g, outcome=g, **kw)


def synthetic(n, m, k, seed, binary=False):
    """Smooth confounded data: softmax assignment, outcome depending on W and A."""
    rng = np.random.default_rng(seed)
    W = rng.random((n, k))
    coef = rng.normal(size=(k, m))
    logits = W @ coef
    P = np.exp(logits - logits.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    A = (rng.random(n)[:, None] > np.cumsum(P, axis=1)).sum(axis=1)
    A = np.minimum(A, m - 1)
    # guarantee every provider appears at least a few times
    A[: 3 * m] = np.repeat(np.arange(m), 3)
    eta = W.sum(axis=1) - 0.5 * k + 0.3 * (A - m / 2) / m
    if binary:
        Y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
        kind = BINARY
    else:
        Y = 3.0 + eta + rng.normal(size=n)
        kind = CONTINUOUS
    return from_arrays(W, A + 1, Y, kind)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance-criterion outcomes, filled in by test_acceptance and echoed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[2:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
