import numpy as np
import pytest

from edrough.dichotomy import DichotomyEstimate, ProjectionFamily
from edrough.flows import FULL_LINE, HALF_LINE_PLUS, ClosedFormFlow, TimeGrid


def exp_flow(rates, interval=FULL_LINE):
    rates = np.asarray(rates, dtype=float)
    n = len(rates)

    def func(t, s):
        t, s = np.broadcast_arrays(np.asarray(t, float), np.asarray(s, float))
        out = np.zeros(t.shape + (n, n))
        for k, r in enumerate(rates):
            out[..., k, k] = np.exp(r * (t - s))
        return out

    return ClosedFormFlow(n, func, generator=lambda t: np.diag(rates), interval=interval)


def exact_estimate(grid, p, K=1.0, alpha=1.0, eps=0.0):
    return DichotomyEstimate(K, alpha, eps, ProjectionFamily.constant(grid, p))


@pytest.fixture
def decay():
    return exp_flow([-1.0])


@pytest.fixture
def saddle():
    return exp_flow([-1.0, 1.0])


@pytest.fixture
def plus_grid():
    return TimeGrid(0.0, 10.0, 1e-2, HALF_LINE_PLUS)


@pytest.fixture
def line_grid():
    return TimeGrid(-10.0, 10.0, 1e-2)
