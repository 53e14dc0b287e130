"""Acceptance suite: one printed PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines are printed even when
output is captured).
"""

import time
from pathlib import Path

import numpy as np
import pytest
from scipy import special

from edrough.admissibility import ABSOLUTE, WeightedNormSpec, solve_admissible
from edrough.cli import RunConfig, dumps_report, load_config, run
from edrough.dichotomy import ProjectionFamily, fit_dichotomy
from edrough.flows import HALF_LINE_PLUS, GridFunction, TimeGrid
from edrough.green import GreenFunction, verify_green_solution
from edrough.roughness import (Perturbation, StarNorm, compute_theta, perturbed_dichotomy,
                               picard_perturbed, select_exponents)
from edrough.scenarios import (FractionalIntegralSpec, build_example_sys, build_scalar_decay,
                               riemann_liouville)

from conftest import exact_estimate

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail, elapsed):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'} {title}: {detail} ({elapsed:.2f} s)"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return emit


def test_criterion_01_dichotomy_recovery(verdict):
    t0 = time.perf_counter()
    sc = build_scalar_decay(interval=HALF_LINE_PLUS)
    g = TimeGrid(0.0, 20.0, 1e-2, HALF_LINE_PLUS)
    est = fit_dichotomy(sc.flow, sc.projections(g), g)
    dt = time.perf_counter() - t0
    ok = 0.99 <= est.alpha <= 1.01 and 1.0 <= est.K <= 1.01 and est.eps <= 0.01 and dt < 5
    verdict(1, "dichotomy recovery", ok,
            f"alpha={est.alpha:.6f} K={est.K:.6f} eps={est.eps:.2e}", dt)


def test_criterion_02_example_envelope(verdict):
    t0 = time.perf_counter()
    sc = build_example_sys(0.5, 0.5)
    g = TimeGrid(0.0, 30.0, 2e-2, HALF_LINE_PLUS)
    est = fit_dichotomy(sc.flow, sc.projections(g), g, eps_fixed=0.0)
    dt = time.perf_counter() - t0
    ok = est.K <= np.e ** 2 * 1.05 and est.alpha >= 0.95 and dt < 10
    verdict(2, "example envelope", ok,
            f"K={est.K:.5f} (e^2*1.05={np.e ** 2 * 1.05:.5f}) alpha={est.alpha:.6f}", dt)


def test_criterion_03_theta_oracle(verdict):
    t0 = time.perf_counter()
    g = TimeGrid(-20.0, 20.0, 1e-2)
    rep = compute_theta(GridFunction(g, np.full(g.size, 0.05)), 1.0, 0.5)
    dt = time.perf_counter() - t0
    err = abs(rep.theta - 0.2)
    ok = err <= 1e-5 + rep.tail_bound and dt < 1
    verdict(3, "theta oracle", ok,
            f"theta={rep.theta:.10f} |theta-0.2|={err:.2e} tail={rep.tail_bound:.2e}", dt)


def test_criterion_04_contraction_rate(verdict):
    t0 = time.perf_counter()
    g = TimeGrid(0.0, 10.0, 1e-2, HALF_LINE_PLUS)
    sc = build_scalar_decay(0.1, HALF_LINE_PLUS)
    est = exact_estimate(g, [[1.0]])
    pf = picard_perturbed(sc.flow, est, sc.perturbation, g, StarNorm(0.5, 0.0))
    t = g.nodes
    err = 0.0
    for a, i in enumerate(pf.anchors):
        exact = np.exp(-0.9 * (t[i:] - t[i]))
        err = max(err, float(np.max(np.abs(pf.values[i:, a, 0, 0] - exact))))
    ratios = pf.ratios[1:]
    dt = time.perf_counter() - t0
    worst = float(ratios.max()) if len(ratios) else 0.0
    ok = worst <= 0.42 and err <= 1e-5 and dt < 30
    verdict(4, "contraction rate", ok,
            f"K*theta={pf.theta.K_theta:.6f} max ratio(k>=1)={worst:.4f} "
            f"iterations={pf.iterations} |U_B-e^(-0.9(t-s))|={err:.2e}", dt)


def test_criterion_05_green_residual(verdict):
    t0 = time.perf_counter()
    res = []
    for h in (1e-2, 5e-3):
        g = TimeGrid(0.0, 10.0, h, HALF_LINE_PLUS)
        sc = build_scalar_decay(interval=HALF_LINE_PLUS)
        G = GreenFunction(sc.flow, exact_estimate(g, [[1.0]]))
        res.append(verify_green_solution(G, GridFunction(g, np.ones(g.size)), g))
    dt = time.perf_counter() - t0
    factor = res[0] / res[1]
    ok = res[0] <= 1e-5 and factor >= 3
    verdict(5, "Green representation residual", ok,
            f"residual(h=1e-2)={res[0]:.2e} residual(h=5e-3)={res[1]:.2e} factor={factor:.2f}",
            dt)


def test_criterion_06_perturbed_dichotomy(verdict):
    t0 = time.perf_counter()
    sc = build_example_sys(0.5, 0.5)
    g = TimeGrid(0.0, 30.0, 2e-2, HALF_LINE_PLUS)
    base = fit_dichotomy(sc.flow, sc.projections(g), g, eps_fixed=0.0)
    choice = select_exponents(sc.flow, base, sc.perturbation, g, target=0.9)
    est, beta = choice.est, choice.beta
    pf = picard_perturbed(sc.flow, est, sc.perturbation, g, StarNorm(beta, est.eps))
    pest = perturbed_dichotomy(pf, g, beta)
    dt = time.perf_counter() - t0
    ok = (choice.theta.certified <= 0.9 and pest.alpha >= beta - 0.05
          and pest.diagnostics["passes"] and dt < 120)
    verdict(6, "perturbed dichotomy", ok,
            f"alpha={est.alpha:.4f} K={est.K:.4f} beta={beta:.4f} "
            f"K(theta+tail)={choice.theta.certified:.4f} perturbed alpha={pest.alpha:.4f} "
            f"K_B={pest.K:.4f}", dt)


def test_criterion_07_admissibility_fixed_point(verdict):
    t0 = time.perf_counter()
    g = TimeGrid(-10.0, 10.0, 1e-2)
    sc = build_scalar_decay()
    est = exact_estimate(g, [[1.0]])
    y = GridFunction(g, np.ones(g.size))
    x, cert = solve_admissible(sc.flow, est, Perturbation.zero(1), y,
                               WeightedNormSpec(0.0, 0.5, ABSOLUTE))
    err = np.abs(x.values[:, 0] - 1.0)
    excess = float(np.max(err - cert.tail_bound))
    dt = time.perf_counter() - t0
    ok = excess <= 1e-5 and cert.ode_residual <= 1e-4 and cert.bound_slack >= 0
    verdict(7, "admissibility fixed point", ok,
            f"max|x-1|={err.max():.2e} max(|x-1|-tail)={excess:.2e} "
            f"|x(0)-1|={err[g.index_of(0.0)]:.2e} ode_residual={cert.ode_residual:.2e} "
            f"bound slack={cert.bound_slack:.4f}", dt)


def test_criterion_08_fractional_integral(verdict):
    t0 = time.perf_counter()
    g = TimeGrid(0.0, 5.0, 1e-3, HALF_LINE_PLUS)
    half = FractionalIntegralSpec(0.5, "identity")
    out = riemann_liouville(half, g).values[:, 0]
    exact = special.gamma(2) / special.gamma(2.5) * g.nodes ** 1.5
    e1 = float(np.max(np.abs(out - exact)))
    v = g.nodes
    twice = riemann_liouville(half, g, riemann_liouville(half, g, v).values[:, 0]).values[:, 0]
    once = riemann_liouville(FractionalIntegralSpec(1.0, "identity"), g, v).values[:, 0]
    e2 = float(np.max(np.abs(twice - once)))
    dt = time.perf_counter() - t0
    ok = e1 <= 1e-5 and e2 <= 1e-4
    verdict(8, "fractional integral", ok,
            f"|I^0.5 t - closed form|={e1:.2e} |I^0.5 I^0.5 t - I^1 t|={e2:.2e}", dt)


def test_criterion_09_nonlocal_gap(verdict):
    t0 = time.perf_counter()
    cfg = RunConfig.from_mapping(load_config(CONFIGS / "nonlocal_gap.json"))
    report, _ = run(cfg)
    ex = {c["check"]: c for c in report["checks"]}["example"]["record"]
    pw, ic = ex["pointwise_bound"], ex["integral_condition"]
    dt = time.perf_counter() - t0
    ok = (not pw["passes"]) and ic["passes"] and ex["gap_demonstrated"]
    verdict(9, "nonlocal gap", ok,
            f"pointwise needs delta={pw['required_delta']:.4f} > {pw['delta']} (fails); "
            f"K(theta+tail)={ic['K_theta_certified']:.4f} < 1 at alpha={ic['alpha']:.4f} "
            f"beta={ic['beta']:.4f} (passes)", dt)


@pytest.mark.parametrize("name", ["nonlocal_gap", "scalar_decay"])
def test_criterion_10_determinism(verdict, name):
    t0 = time.perf_counter()
    data = load_config(CONFIGS / f"{name}.json")
    first = dumps_report(run(RunConfig.from_mapping(dict(data)))[0])
    second = dumps_report(run(RunConfig.from_mapping(dict(data)))[0])
    dt = time.perf_counter() - t0
    verdict(10, f"determinism ({name})", first.encode() == second.encode(),
            f"{len(first)} bytes, identical={first == second}", dt)
