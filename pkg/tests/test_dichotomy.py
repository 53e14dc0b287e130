import warnings

import numpy as np
import pytest

from edrough.dichotomy import (DichotomyEstimate, ProjectionFamily, check_commutation,
                               check_dichotomy, envelope_table, fit_dichotomy, sample_nodes)
from edrough.errors import DomainError, NoDichotomyError
from edrough.flows import HALF_LINE_PLUS, TimeGrid
from edrough.scenarios import example_sys_flow

from conftest import exact_estimate, exp_flow


def test_projection_family_validation():
    g = TimeGrid(0.0, 1.0, 0.1)
    with pytest.raises(DomainError):
        ProjectionFamily.constant(g, [[1.0, 1.0], [0.0, 1.0]])
    p = ProjectionFamily.constant(g, np.diag([1.0, 0.0]))
    assert p.rank == 1 and p.dim == 2
    assert np.allclose(p.Q[3], np.diag([0.0, 1.0]))
    assert p.swapped().rank == 1


def test_sample_nodes_deterministic():
    a = sample_nodes(5000, 200, seed=3)
    b = sample_nodes(5000, 200, seed=3)
    assert np.array_equal(a, b)
    assert len(a) <= 200 and a[0] == 0 and a[-1] == 4999
    assert np.array_equal(sample_nodes(50, 200), np.arange(50))


def test_fit_scalar_decay():
    g = TimeGrid(0.0, 20.0, 1e-2, HALF_LINE_PLUS)
    est = fit_dichotomy(exp_flow([-1.0]), ProjectionFamily.constant(g, [[1.0]]), g)
    assert est.alpha == pytest.approx(1.0, abs=1e-6)
    assert 1.0 <= est.K <= 1.0 + 1e-6
    assert est.eps <= 1e-6


def test_fit_saddle_both_branches():
    g = TimeGrid(-10.0, 10.0, 1e-2)
    est = fit_dichotomy(exp_flow([-2.0, 1.0]), ProjectionFamily.constant(g, np.diag([1.0, 0.0])), g)
    assert est.alpha == pytest.approx(1.0, abs=1e-6)
    assert check_dichotomy(exp_flow([-2.0, 1.0]), est, g).passes


def test_fit_recovers_nonuniform_eps():
    # U(t,s) = exp(-(t-s) + 0.2(|t|... )) style growth: a(t) = -t + 0.2 |t| sin-free surrogate
    a = lambda t: -t + 0.2 * np.abs(t)
    f = exp_flow([0.0])
    from edrough.flows import ClosedFormFlow

    def func(t, s):
        t, s = np.broadcast_arrays(np.asarray(t, float), np.asarray(s, float))
        return np.exp(a(t) - a(s))[..., None, None]

    flow = ClosedFormFlow(1, func)
    g = TimeGrid(-10.0, 10.0, 5e-2)
    est = fit_dichotomy(flow, ProjectionFamily.constant(g, [[1.0]]), g)
    assert check_dichotomy(flow, est, g).passes
    assert est.alpha > 0.5
    del f


def test_fit_rejects_non_dichotomy():
    g = TimeGrid(0.0, 10.0, 0.1, HALF_LINE_PLUS)
    with pytest.raises(NoDichotomyError):
        fit_dichotomy(exp_flow([1.0]), ProjectionFamily.constant(g, [[1.0]]), g)


def test_fit_short_span_pins_eps():
    g = TimeGrid(0.0, 2.0, 0.01, HALF_LINE_PLUS)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        est = fit_dichotomy(exp_flow([-1.0]), ProjectionFamily.constant(g, [[1.0]]), g)
    assert est.eps == 0.0
    assert any("eps" in str(x.message) for x in w)


def test_fit_small_grid():
    g = TimeGrid(0.0, 1.0, 0.25)
    with pytest.raises(DomainError):
        fit_dichotomy(exp_flow([-1.0]), ProjectionFamily.constant(g, [[1.0]]), g)


def test_example_sys_envelope():
    g = TimeGrid(0.0, 30.0, 2e-2, HALF_LINE_PLUS)
    flow = example_sys_flow()
    est = fit_dichotomy(flow, ProjectionFamily.constant(g, np.diag([1.0, 0.0])), g, eps_fixed=0.0)
    assert est.K <= np.e ** 2 * 1.05
    assert est.alpha >= 0.95


def test_check_detects_wrong_projection():
    g = TimeGrid(0.0, 5.0, 0.05, HALF_LINE_PLUS)
    p = np.array([[0.5, 0.5], [0.5, 0.5]])
    assert check_commutation(exp_flow([-1.0, 1.0]), ProjectionFamily.constant(g, p), g) > 1
    est = exact_estimate(g, np.diag([1.0, 0.0]), K=0.5)
    rep = check_dichotomy(exp_flow([-1.0, 1.0]), est, g)
    assert not rep.passes
    assert rep.stable_violation == pytest.approx(2.0)


def test_estimate_validation():
    g = TimeGrid(0.0, 1.0, 0.1)
    p = ProjectionFamily.constant(g, [[1.0]])
    with pytest.raises(DomainError):
        DichotomyEstimate(0.0, 1.0, 0.0, p)
    with pytest.raises(DomainError):
        DichotomyEstimate(1.0, -1.0, 0.0, p)
    with pytest.raises(DomainError):
        DichotomyEstimate(1.0, 1.0, -0.1, p)


def test_envelope_table_rows_below_bound():
    g = TimeGrid(-5.0, 5.0, 0.05)
    est = exact_estimate(g, np.diag([1.0, 0.0]))
    rows = envelope_table(exp_flow([-1.0, 1.0]), est, g)
    assert {r[0] for r in rows} == {"stable", "unstable"}
    assert all(r[3] <= r[4] * (1 + 1e-12) for r in rows)
