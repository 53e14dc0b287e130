import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edrough.errors import DivergenceError, DomainError, PreconditionError
from edrough.flows import HALF_LINE_PLUS, GridFunction, TimeGrid
from edrough.roughness import (PairSamples, Perturbation, StarNorm, compute_theta,
                               perturbed_dichotomy, picard_perturbed, select_exponents,
                               star_norm_eval, tabulated_cocycle_residual, theta_for,
                               verify_perturbed_identity)

from conftest import exact_estimate, exp_flow


def _const_b(grid, delta):
    return GridFunction(grid, np.full(grid.size, delta))


def test_theta_constant_oracle():
    g = TimeGrid(-20.0, 20.0, 1e-2)
    rep = compute_theta(_const_b(g, 0.05), 1.0, 0.5)
    assert abs(rep.theta - 0.2) <= 1e-5 + rep.tail_bound
    # the profile plus tail always covers the infinite-line value
    assert rep.theta + rep.tail_bound >= 0.2 - 1e-5


def test_theta_half_line_tail_one_sided():
    g = TimeGrid(0.0, 20.0, 1e-2, HALF_LINE_PLUS)
    rep = compute_theta(_const_b(g, 0.05), 1.0, 0.5)
    # sup at the midpoint: 2 delta (1 - e^{-c T/2}) / c
    assert rep.theta == pytest.approx(0.2 * (1 - np.exp(-5.0)), abs=1e-5)
    # tail only beyond t_max, largest there: delta / c
    assert rep.tail_bound == pytest.approx(0.1, abs=1e-12)


def test_theta_trapezoid_against_quad():
    from scipy.integrate import quad

    g = TimeGrid(-6.0, 6.0, 1e-3)
    bf = lambda t: np.exp(-t ** 2)
    rep = compute_theta(GridFunction.from_callable(g, bf), 1.0, 0.25)
    i = int(np.argmax(rep.profile))
    t = g.nodes[i]
    ref = quad(lambda s: np.exp(-0.75 * abs(t - s)) * bf(s), -6, 6, points=[t])[0]
    assert rep.profile[i] == pytest.approx(ref, abs=1e-6)


def test_theta_errors():
    g = TimeGrid(0.0, 1.0, 0.1)
    b = _const_b(g, 0.1)
    with pytest.raises(DomainError):
        compute_theta(b, 0.5, 0.5)
    with pytest.raises(DomainError):
        compute_theta(b, 0.5, 0.0)
    with pytest.raises(DivergenceError):
        compute_theta(b, 1.0, 0.5, tail_rate=0.5)
    with pytest.raises(DomainError):
        compute_theta(_const_b(g, -0.1), 1.0, 0.5)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 100.0))
def test_theta_homogeneous(lam):
    g = TimeGrid(-5.0, 5.0, 0.05)
    b = GridFunction.from_callable(g, lambda t: 1 + np.sin(t) ** 2)
    r1 = compute_theta(b, 1.0, 0.3)
    r2 = compute_theta(GridFunction(g, lam * b.values), 1.0, 0.3)
    assert r2.theta == pytest.approx(lam * r1.theta, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.45), st.floats(0.01, 0.4))
def test_theta_monotone_in_beta(b1, gap):
    b2 = min(b1 + gap, 0.95)
    g = TimeGrid(-5.0, 5.0, 0.05)
    b = GridFunction.from_callable(g, lambda t: np.exp(-np.abs(t)))
    assert compute_theta(b, 1.0, b2).theta >= compute_theta(b, 1.0, b1).theta - 1e-15


def test_star_norm():
    t = np.array([1.0, 2.0])
    s = np.array([0.0, 2.0])
    vals = np.array([[[np.exp(-1.0)]], [[1.0]]])
    assert star_norm_eval(PairSamples(t, s, vals), StarNorm(0.5)) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        star_norm_eval(PairSamples(s, t, vals), StarNorm(0.5))
    with pytest.raises(DomainError):
        StarNorm(0.0)


def _scalar_pf(delta=0.1, T=5.0, h=1e-2, **kw):
    g = TimeGrid(0.0, T, h, HALF_LINE_PLUS)
    est = exact_estimate(g, [[1.0]])
    B = Perturbation.constant([[delta]])
    return g, est, B, picard_perturbed(exp_flow([-1.0]), est, B, g, StarNorm(0.5), **kw)


def test_picard_scalar_contraction():
    g, est, B, pf = _scalar_pf()
    assert pf.theta.K_theta <= 0.4 + 1e-9
    assert np.all(pf.ratios[1:] <= 0.42)
    t = g.nodes
    for a, i in enumerate(pf.anchors[:5]):
        live = slice(i, None)
        exact = np.exp(-0.9 * (t[live] - t[i]))
        assert np.max(np.abs(pf.values[live, a, 0, 0] - exact)) <= 1e-5
    assert verify_perturbed_identity(pf, exp_flow([-1.0]), B, g) <= 1e-5
    assert tabulated_cocycle_residual(pf) <= 1e-5


def test_picard_zero_perturbation():
    g = TimeGrid(0.0, 3.0, 1e-2, HALF_LINE_PLUS)
    est = exact_estimate(g, [[1.0]])
    pf = picard_perturbed(exp_flow([-1.0]), est, Perturbation.zero(1), g, StarNorm(0.5))
    assert pf.iterations <= 1
    i = pf.anchors[0]
    assert np.allclose(pf.values[i:, 0, 0, 0], np.exp(-g.nodes[i:]), atol=1e-12)


def test_picard_identity_on_diagonal():
    _, _, _, pf = _scalar_pf(T=3.0)
    for a, i in enumerate(pf.anchors):
        assert abs(pf.values[i, a, 0, 0] - 1.0) <= 1e-10


def test_picard_refuses_large_theta():
    g = TimeGrid(0.0, 5.0, 1e-2, HALF_LINE_PLUS)
    est = exact_estimate(g, [[1.0]])
    with pytest.raises(PreconditionError):
        picard_perturbed(exp_flow([-1.0]), est, Perturbation.constant([[0.6]]), g, StarNorm(0.5))
    with pytest.raises(PreconditionError):
        picard_perturbed(exp_flow([-1.0]), exact_estimate(g, [[1.0]], eps=0.6),
                         Perturbation.constant([[0.01]]), g, StarNorm(0.5, eps=0.6))


def test_perturbed_dichotomy_scalar_rate():
    g, est, B, pf = _scalar_pf(T=10.0)
    pest = perturbed_dichotomy(pf, g, 0.5)
    assert pest.alpha == pytest.approx(0.9, abs=0.02)


def test_perturbed_dichotomy_saddle():
    g = TimeGrid(-4.0, 4.0, 2e-2)
    flow = exp_flow([-1.0, 1.0])
    est = exact_estimate(g, np.diag([1.0, 0.0]))
    B = Perturbation.constant([[0.0, 0.05], [0.05, 0.0]])
    pf = picard_perturbed(flow, est, B, g, StarNorm(0.5))
    assert verify_perturbed_identity(pf, flow, B, g) <= 1e-4
    pest = perturbed_dichotomy(pf, g, 0.5)
    assert pest.alpha >= 0.45


def test_theta_for_uses_dichotomy_eps():
    g = TimeGrid(-5.0, 5.0, 0.05)
    est = exact_estimate(g, [[1.0]], eps=0.1)
    rep = theta_for(est, Perturbation.constant([[0.01]]), g, 0.5)
    assert rep.theta >= 0.01 * np.exp(0.1 * 5.0) * 0.5


def test_select_exponents_prefers_largest_beta():
    g = TimeGrid(0.0, 10.0, 0.05, HALF_LINE_PLUS)
    est = exact_estimate(g, [[1.0]])
    ch = select_exponents(exp_flow([-1.0]), est, Perturbation.constant([[0.1]]), g)
    assert ch.theta.certified <= 0.9
    # beta = 0.75 gives K theta near 0.8 plus tail; 0.5 gives 0.4
    assert ch.beta == pytest.approx(0.5)
