import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edrough.errors import DomainError, EvaluationError
from edrough.flows import (HALF_LINE_MINUS, HALF_LINE_PLUS, ClosedFormFlow,
                           CoefficientFlow, GridFunction, TimeGrid, cocycle_residual,
                           reflect_function, reflect_time, verify_mild_solution)
from edrough.scenarios import example_sys_flow

from conftest import exp_flow


def test_grid_invariants():
    g = TimeGrid(0.0, 1.0, 0.1)
    assert g.size == 11
    assert np.all(np.diff(g.nodes) > 0)
    assert g.nodes[-1] == 1.0
    with pytest.raises(DomainError):
        TimeGrid(1.0, 1.0, 0.1)
    with pytest.raises(DomainError):
        TimeGrid(0.0, 1.0, 0.3)
    with pytest.raises(DomainError):
        TimeGrid(0.0, 1.0, -0.1)


def test_grid_stride_and_reflect():
    g = TimeGrid(0.0, 1.0, 0.01, HALF_LINE_PLUS)
    sub = g.stride(10)
    assert sub.size == 11 and sub.h == pytest.approx(0.1)
    r = g.reflected()
    assert r.interval == HALF_LINE_MINUS and r.t_min == -1.0


def test_grid_function_checks():
    g = TimeGrid(0.0, 1.0, 0.5)
    with pytest.raises(DomainError):
        GridFunction(g, np.ones(2))
    with pytest.raises(EvaluationError):
        GridFunction(g, [0.0, np.nan, 1.0])
    f = GridFunction(g, [1.0, -2.0, 3.0])
    assert np.allclose((f + f * 2).values[:, 0], [3.0, -6.0, 9.0])


def test_identity_at_equal_times():
    f = example_sys_flow()
    for t in (0.0, 1.3, 7.0):
        assert np.array_equal(f.evaluate(t, t), np.eye(2))


def test_example_flow_closed_form():
    f = example_sys_flow()
    t, s = 3.0, 1.0
    a = lambda x: -x + np.sin(x)
    b = lambda x: x - np.cos(x)
    expect = np.diag([np.exp(a(t) - a(s)), np.exp(b(t) - b(s))])
    assert np.allclose(f.evaluate(t, s), expect, rtol=0, atol=1e-15)


def test_rk4_scalar_decay():
    f = CoefficientFlow(1, lambda t: [[-1.0]], 1e-3)
    assert abs(f.evaluate(1.0, 0.0)[0, 0] - np.exp(-1)) < 1e-12


def test_coefficient_flow_errors():
    f = CoefficientFlow(1, lambda t: [[-1.0]], 1e-2)
    with pytest.raises(DomainError):
        f.evaluate(0.0, 1.0)
    bad = CoefficientFlow(1, lambda t: [[np.nan]], 1e-2)
    with pytest.raises(EvaluationError):
        bad.evaluate(1.0, 0.0)


def test_coefficient_table_matches_evaluate():
    f = CoefficientFlow(2, lambda t: [[-1.0, np.sin(t)], [0.0, 0.5]], 1e-2)
    g = TimeGrid(0.0, 1.0, 1e-2)
    tab = f.table(g, [50, 100], [0, 20, 100])
    assert np.allclose(tab[0, 1], f.evaluate(0.5, 0.2), atol=1e-13)
    assert np.allclose(tab[1, 2], np.eye(2))
    assert np.isnan(tab[0, 2]).all()


def test_cocycle_residuals():
    g = TimeGrid(0.0, 5.0, 1e-3)
    assert cocycle_residual(example_sys_flow(), TimeGrid(0.0, 5.0, 1e-2)) <= 1e-12
    fine = cocycle_residual(CoefficientFlow(1, lambda t: [[-1.0]], 1e-3), g)
    coarse = cocycle_residual(CoefficientFlow(1, lambda t: [[-1.0]], 1e-2),
                              TimeGrid(0.0, 5.0, 1e-2))
    assert fine <= 1e-8
    assert fine <= coarse


def test_cocycle_needs_samples():
    with pytest.raises(DomainError):
        cocycle_residual(exp_flow([-1.0]), TimeGrid(0.0, 1.0, 0.1), samples=0)


def test_mild_solution_scalar():
    g = TimeGrid(0.0, 5.0, 1e-3)
    f = exp_flow([-1.0])
    x0 = 3.0
    x = GridFunction(g, 1 + (x0 - 1) * np.exp(-g.nodes))
    y = GridFunction(g, np.ones(g.size))
    assert verify_mild_solution(x, f, y, 0.0) <= 1e-6
    z = GridFunction(g, np.zeros(g.size))
    hom = GridFunction(g, x0 * np.exp(-g.nodes))
    assert verify_mild_solution(hom, f, z, 0.0) <= 1e-12
    bumped = x.values.copy()
    bumped[1234] += 0.1
    assert verify_mild_solution(GridFunction(g, bumped), f, y, 0.0) >= 0.09


def test_mild_solution_grid_mismatch():
    f = exp_flow([-1.0])
    a = GridFunction(TimeGrid(0.0, 1.0, 0.1), np.ones(11))
    b = GridFunction(TimeGrid(0.0, 2.0, 0.2), np.ones(11))
    with pytest.raises(DomainError):
        verify_mild_solution(a, f, b, 0.0)


def test_mild_solution_second_order():
    f = exp_flow([-1.0])
    res = []
    for h in (1e-2, 5e-3):
        g = TimeGrid(0.0, 4.0, h)
        # trapezoid-built solution of x' = -x + cos t, x(0) = 0
        t = g.nodes
        x = np.zeros(g.size)
        for i in range(1, g.size):
            x[i] = (x[i - 1] * np.exp(-h)
                    + h / 2 * (np.exp(-h) * np.cos(t[i - 1]) + np.cos(t[i])))
        res.append(verify_mild_solution(GridFunction(g, x), f,
                                        GridFunction(g, np.cos(t)), 0.0))
    assert res[0] / res[1] > 3.5


def test_reflection_involution_and_sign():
    f = exp_flow([-1.0], interval=HALF_LINE_MINUS)
    r = reflect_time(f)
    assert r.interval == HALF_LINE_PLUS
    # on the negative half line x' = -x grows backward; reflected it decays forward
    assert r.evaluate(2.0, 1.0)[0, 0] == pytest.approx(np.exp(1.0))
    rr = reflect_time(r)
    for t, s in [(-1.0, -3.0), (-0.5, -0.7)]:
        assert np.allclose(rr.evaluate(t, s), f.evaluate(t, s), atol=1e-12)
    assert rr.name == f.name


def test_reflect_identity_flow():
    ident = ClosedFormFlow(2, lambda t, s: np.broadcast_to(np.eye(2), np.shape(t) + (2, 2)))
    r = reflect_time(ident)
    assert np.array_equal(r.evaluate(1.0, -2.0), np.eye(2))


def test_reflect_coefficient_flow():
    f = CoefficientFlow(1, lambda t: [[-1.0 + 0.1 * t]], 1e-3)
    r = reflect_time(reflect_time(f))
    assert np.allclose(r.evaluate(1.0, 0.0), f.evaluate(1.0, 0.0), atol=1e-12)


def test_reflect_function():
    g = TimeGrid(0.0, 1.0, 0.5, HALF_LINE_PLUS)
    f = GridFunction(g, [1.0, 2.0, 3.0])
    r = reflect_function(f)
    assert r.grid.t_min == -1.0
    assert np.array_equal(r.values[:, 0], [3.0, 2.0, 1.0])


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 3), st.floats(0, 3))
def test_closed_form_cocycle_property(s, d1, d2):
    f = example_sys_flow()
    r, t = s + d1, s + d1 + d2
    lhs = f.evaluate(t, r) @ f.evaluate(r, s)
    rhs = f.evaluate(t, s)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)
