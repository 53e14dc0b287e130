"""Weighted function classes and bounded solutions of ``x' = (A + B) x + y``.

Norms
-----
``||y||_{eps,beta} = sup_t w(t) int_t^{t+1} exp(eps |tau|) ||y(tau)|| dtau``
(the window is ``[t-1, t]`` on the negative half line) and
``||x||_beta = sup_t w(t) ||x(t)||`` with ``w(t) = exp(-beta t)`` (signed) or
``exp(-beta |t|)`` (absolute).

Solutions
---------
The bounded solution is the fixed point of

    (phi_y x)(t) = [U(t,0) P(0) xi] + int_J G(t,tau) (B(tau) x(tau) + y(tau)) dtau,

where the bracketed term only appears on a half line and ``xi`` is chosen so
that ``x(0)`` lies in a prescribed subspace ``Z``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._linalg import range_basis, simpson_weights, trapezoid_weights, vec_norm
from .dichotomy import DichotomyEstimate
from .errors import DomainError, NonConvergenceError, PreconditionError
from .flows import (FULL_LINE, HALF_LINE_MINUS, HALF_LINE_PLUS, GridFunction, LinearFlow,
                    TimeGrid, verify_mild_solution)
from .green import GreenFunction, GreenOperator, forcing_sup, green_table, tail_bound
from .roughness import Perturbation, PerturbedFlow, theta_for

log = logging.getLogger(__name__)

SIGNED = "signed"
ABSOLUTE = "absolute"


class NormGrowthWarning(UserWarning):
    """The weighted sup is still growing at the edge of the grid."""


@dataclass(frozen=True)
class WeightedNormSpec:
    eps: float = 0.0
    beta: float = 0.5
    weight_style: str = SIGNED
    interval: str = FULL_LINE

    def __post_init__(self):
        if self.eps < 0:
            raise DomainError("eps must be nonnegative")
        if self.weight_style not in (SIGNED, ABSOLUTE):
            raise DomainError(f"unknown weight style {self.weight_style!r}")

    def weight(self, t):
        t = np.asarray(t, dtype=float)
        if self.weight_style == SIGNED:
            return np.exp(-self.beta * t)
        return np.exp(-self.beta * np.abs(t))

    def label(self) -> str:
        return f"eps={self.eps:g},beta={self.beta:g},{self.weight_style}"

    def to_record(self) -> dict:
        return {"eps": self.eps, "beta": self.beta, "weight_style": self.weight_style,
                "interval": self.interval}


def _window_steps(grid: TimeGrid) -> int:
    m = 1.0 / grid.h
    if abs(m - round(m)) > 1e-9 * m:
        raise DomainError("grid step must be 1/m for an integer m")
    m = int(round(m))
    if m >= grid.size:
        raise DomainError("unit window does not fit in the grid")
    return m


def _flag_growth(vals, interval, name):
    """Warn when the sup sits at an open end of the interval and is still rising there."""
    k = min(5, len(vals) - 1)
    ends = []
    if interval != HALF_LINE_MINUS:
        ends.append(vals[-k - 1:])
    if interval != HALF_LINE_PLUS:
        ends.append(vals[:k + 1][::-1])
    top = vals.max()
    for tail in ends:
        if k >= 1 and tail[-1] == top and np.all(np.diff(tail) > 0):
            warnings.warn(f"{name}: weighted sup still increasing at the grid edge; "
                          "the norm may be unbounded on the full interval", NormGrowthWarning,
                          stacklevel=3)
            return True
    return False


def window_profile(y: GridFunction, spec: WeightedNormSpec) -> tuple[np.ndarray, np.ndarray]:
    """Window start times and weighted window integrals of ``y``.

    Windows span ``m = 1/h`` intervals; composite Simpson when ``m`` is even,
    trapezoid otherwise.
    """
    grid = y.grid
    m = _window_steps(grid)
    w = simpson_weights(m, grid.h) if m % 2 == 0 else trapezoid_weights(m, grid.h)
    g = np.exp(spec.eps * np.abs(grid.nodes)) * y.norms()
    sums = np.convolve(g, w[::-1], mode="valid")  # sums[i] = sum_k w_k g_{i+k}
    if spec.interval == HALF_LINE_MINUS:
        t = grid.nodes[m:]  # window [t-1, t]
    else:
        t = grid.nodes[:len(sums)]
    return t, spec.weight(t) * sums


def norm_Y(y: GridFunction, spec: WeightedNormSpec) -> float:
    """``sup_t w(t) int_{window(t)} exp(eps |tau|) ||y(tau)|| dtau`` over windows inside the grid."""
    _, vals = window_profile(y, spec)
    _flag_growth(vals, spec.interval, "norm_Y")
    return float(vals.max())


def norm_Gamma(x: GridFunction, spec: WeightedNormSpec) -> float:
    """``sup_t w(t) ||x(t)||`` over the grid."""
    return float(np.max(spec.weight(x.nodes) * x.norms()))


def admissible_norm_bound(K: float, alpha: float, beta: float, theta: float,
                          y_norm: float) -> float:
    """A priori bound on ``||x||_beta`` in terms of ``||y||_{eps,beta}``.

    ``(1 - 2 K theta)^(-1) K ||y|| (e^alpha / (1 - e^-(alpha+beta)) + 1 / (1 - e^-(alpha-beta)))``;
    infinite when ``2 K theta >= 1``.
    """
    if not alpha > abs(beta):
        raise DomainError("need alpha > |beta|")
    if 2 * K * theta >= 1:
        return float("inf")
    b = abs(beta)
    series = np.exp(alpha) / (1 - np.exp(-(alpha + b))) + 1 / (1 - np.exp(-(alpha - b)))
    return float(K * y_norm * series / (1 - 2 * K * theta))


@dataclass
class AdmissibilityCertificate:
    y_norm: float
    x_norm: float
    fixed_point_residual: float
    ode_residual: float
    iterations: int
    history: list = field(default_factory=list)
    tail_bound: float = 0.0
    z_residual: float = 0.0
    theta: float = 0.0
    K: float = 1.0
    norm_bound: float = float("inf")
    spec: Optional[WeightedNormSpec] = None

    @property
    def ratios(self) -> np.ndarray:
        h = np.asarray(self.history)
        if len(h) < 2:
            return np.zeros(0)
        return h[1:] / np.where(h[:-1] > 0, h[:-1], np.inf)

    @property
    def bound_slack(self) -> float:
        return self.norm_bound - self.x_norm

    def to_record(self) -> dict:
        r = self.ratios
        return {"y_norm": self.y_norm, "x_norm": self.x_norm,
                "fixed_point_residual": self.fixed_point_residual,
                "ode_residual": self.ode_residual, "iterations": self.iterations,
                "max_ratio": float(r.max()) if len(r) else 0.0,
                "tail_bound": self.tail_bound, "z_residual": self.z_residual,
                "theta": self.theta, "K": self.K, "norm_bound": self.norm_bound,
                "bound_slack": self.bound_slack,
                "spec": self.spec.to_record() if self.spec else None}


def _initial_term(G: GreenFunction, grid: TimeGrid, proj, j0: int, half_plus: bool):
    """Columns ``U(t,0) P(0)`` (half line plus) or ``U(t,0) Q(0)`` (half line minus) at every node."""
    if half_plus:
        basis = proj.stable_basis[j0]
        col = G.flow.table(grid, None, [j0])[:, 0]
        return col @ basis, basis
    basis = proj.unstable_basis[j0]
    col = -green_table(G, grid)[:, j0]
    return col @ basis, basis


def ode_residual(x: GridFunction, flow: LinearFlow, B: Perturbation, y: GridFunction) -> float:
    """Centred-difference defect of ``x' - (A + B) x - y`` at interior nodes."""
    grid = x.grid
    if grid.size < 3:
        raise DomainError("need at least three nodes")
    h = grid.h
    xv = x.values
    dx = (xv[2:] - xv[:-2]) / (2 * h)
    t = grid.nodes[1:-1]
    A = np.array([np.asarray(flow.generator(s), dtype=float).reshape(flow.dim, flow.dim)
                  for s in t])
    Bm = B.matrices(grid)[1:-1]
    res = dx - np.einsum("ixy,iy->ix", A + Bm, xv[1:-1]) - y.values[1:-1]
    return float(vec_norm(res).max())


def solve_admissible(flow: LinearFlow, est: DichotomyEstimate, B: Perturbation, y: GridFunction,
                     spec: WeightedNormSpec, Z=None, tol: float = 1e-10, max_iter: int = 200,
                     x0: Optional[GridFunction] = None, operator: Optional[GreenOperator] = None):
    """Bounded solution of ``x' = (A + B) x + y`` by iterating ``phi_y``.

    On a half line the initial value is constrained to the span of ``Z``
    (columns of a matrix; default the kernel of ``P(0)`` on the positive half
    line, the range of ``P(0)`` on the negative one). Iteration stops when the
    ``Gamma``-norm change drops below ``tol``.

    Returns ``(x, certificate)``.
    """
    grid = y.grid
    proj = est.projections
    if proj.grid.key != grid.key:
        raise DomainError("forcing and dichotomy live on different grids")
    if B.dim != flow.dim or y.values.shape[1] != flow.dim:
        raise DomainError("dimension mismatch")
    beta = abs(spec.beta)
    if not beta < est.alpha:
        raise DomainError("need |beta| < alpha")
    th = theta_for(est, B, grid, max(beta, 1e-9))
    if not th.passes:
        raise PreconditionError(f"K (theta + tail) = {th.certified:.4g} >= 1")
    y_norm = norm_Y(y, spec)
    if not np.isfinite(y_norm):
        raise DomainError("forcing has infinite weighted norm")

    G = GreenFunction(flow, est)
    op = operator if operator is not None else GreenOperator(G, grid)
    Bm = B.matrices(grid)
    N, n = grid.size, flow.dim
    const = op.apply(y.values)

    half = grid.interval in (HALF_LINE_PLUS, HALF_LINE_MINUS)
    if half:
        j0 = grid.index_of(0.0)
        init, E = _initial_term(G, grid, proj, j0, grid.interval == HALF_LINE_PLUS)
        if Z is None:
            Zb = proj.unstable_basis[j0] if grid.interval == HALF_LINE_PLUS else proj.stable_basis[j0]
        else:
            Zb = np.atleast_2d(np.asarray(Z, dtype=float))
            if Zb.shape[0] != n:
                Zb = Zb.T
            Zb = range_basis(Zb, np.linalg.matrix_rank(Zb)) if Zb.size else np.zeros((n, 0))
        lhs = np.concatenate([E, -Zb], axis=1)

    def phi(xv):
        v = const + op.apply(np.einsum("ixy,iy->ix", Bm, xv))
        if not half:
            return v, 0.0
        r = v[j0]
        if lhs.shape[1]:
            coef = np.linalg.lstsq(lhs, -r, rcond=None)[0]
            v = v + init @ coef[:E.shape[1]]
        x0v = v[j0]
        zres = float(vec_norm(x0v - Zb @ (Zb.T @ x0v))) if Zb.shape[1] else float(vec_norm(x0v))
        return v, zres

    x = np.zeros((N, n)) if x0 is None else np.array(x0.values, dtype=float)
    w = spec.weight(grid.nodes)
    history = []
    zres = 0.0
    for _ in range(max_iter):
        xn, zres = phi(x)
        delta = float(np.max(w * vec_norm(xn - x)))
        history.append(delta)
        x = xn
        if delta <= tol:
            break
    else:
        raise NonConvergenceError(f"phi_y iteration did not reach {tol:g} in {max_iter} steps",
                                  history)
    fx, _ = phi(x)
    xf = GridFunction(grid, x)
    fp = float(np.max(w * vec_norm(fx - x)))

    # truncation of int_J G (B x + y): bound the forcing by its sup over the grid
    g = GridFunction(grid, np.einsum("ixy,iy->ix", Bm, x) + y.values)
    tails = tail_bound(est, grid, grid.nodes, forcing_sup(g), 0.0)
    cert = AdmissibilityCertificate(
        y_norm=y_norm, x_norm=norm_Gamma(xf, spec), fixed_point_residual=fp,
        ode_residual=ode_residual(xf, flow, B, y), iterations=len(history), history=history,
        tail_bound=float(np.max(tails)), z_residual=zres, theta=th.theta, K=est.K,
        norm_bound=admissible_norm_bound(est.K, est.alpha, beta, th.theta, y_norm), spec=spec,
    )
    return xf, cert


def tail_profile(est: DichotomyEstimate, B: Perturbation, x: GridFunction, y: GridFunction):
    """Per-node truncation bound for the Green integral of ``B x + y``."""
    Bm = B.matrices(x.grid)
    g = GridFunction(x.grid, np.einsum("ixy,iy->ix", Bm, x.values) + y.values)
    return tail_bound(est, x.grid, x.nodes, forcing_sup(g), 0.0)


def default_pair_specs(interval: str, eps: float, beta: float) -> list[WeightedNormSpec]:
    """Pairs checked by default: both signs of ``beta`` plus the absolute weight on the line."""
    specs = [WeightedNormSpec(eps, beta, SIGNED, interval),
             WeightedNormSpec(eps, -beta, SIGNED, interval)]
    if interval == FULL_LINE:
        specs.append(WeightedNormSpec(eps, beta, ABSOLUTE, interval))
    return specs


def default_forcings(grid: TimeGrid, dim: int) -> dict:
    t = grid.nodes
    return {
        "constant": GridFunction(grid, np.ones((grid.size, dim))),
        "sine": GridFunction(grid, np.sin(t)[:, None] * np.ones((1, dim))),
    }


@dataclass
class PairCase:
    spec: WeightedNormSpec
    forcing: str
    passes: bool
    representation_residual: float
    certificate: Optional[AdmissibilityCertificate] = None
    error: str = ""

    def to_record(self) -> dict:
        return {"spec": self.spec.label(), "forcing": self.forcing, "passes": self.passes,
                "representation_residual": self.representation_residual,
                "certificate": self.certificate.to_record() if self.certificate else None,
                "error": self.error}


@dataclass
class PairReport:
    cases: list
    warnings: list = field(default_factory=list)

    @property
    def passes(self) -> bool:
        return all(c.passes for c in self.cases)

    def to_record(self) -> dict:
        return {"passes": self.passes, "warnings": list(self.warnings),
                "cases": [c.to_record() for c in self.cases]}


def check_pair_admissible(flow_B: PerturbedFlow, y_specs: Optional[Sequence] = None,
                          forcings: Optional[dict] = None, tol: float = 1e-3,
                          solver_tol: float = 1e-10, max_iter: int = 200, Z=None) -> PairReport:
    """Solve for each (spec, forcing) and check ``x`` against the perturbed family.

    The check is the variation-of-constants identity
    ``x(t) = U_B(t,s) x(s) + int_s^t U_B(t,tau) y(tau) dtau`` with ``s`` the
    grid start, evaluated on the anchor grid of ``flow_B`` with Simpson
    weights; a case passes when the residual (relative to ``max(1, sup ||x||)``)
    is at most ``tol`` and the fixed-point iteration converged. The default
    ``tol`` covers the single trapezoid panel the check must use next to ``s``
    on an anchor grid of spacing ``0.1``.
    """
    grid = flow_B.grid
    est = flow_B.est
    flow = flow_B.flow
    B = flow_B.perturbation
    if y_specs is None:
        y_specs = default_pair_specs(grid.interval, est.eps, flow_B.norm.beta)
    if forcings is None:
        forcings = default_forcings(grid, flow.dim)
    report = PairReport([])
    if not forcings or not y_specs:
        msg = "empty forcing or spec set; admissibility holds vacuously"
        warnings.warn(msg, stacklevel=2)
        report.warnings.append(msg)
        return report
    sub = flow_B.anchor_grid
    stride = flow_B.stride
    sub_flow = flow_B.anchor_flow()
    op = GreenOperator(GreenFunction(flow, est), grid)
    for spec in y_specs:
        for name in sorted(forcings):
            y = forcings[name]
            try:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", NormGrowthWarning)
                    x, cert = solve_admissible(flow, est, B, y, spec, Z=Z, tol=solver_tol,
                                               max_iter=max_iter, operator=op)
            except (NonConvergenceError, PreconditionError, DomainError) as exc:
                report.cases.append(PairCase(spec, name, False, float("nan"), error=str(exc)))
                continue
            for w in caught:
                report.warnings.append(f"{spec.label()}/{name}: {w.message}")
            xs = GridFunction(sub, x.values[::stride])
            ys = GridFunction(sub, y.values[::stride])
            res = verify_mild_solution(xs, sub_flow, ys, sub.t_min)
            scale = max(1.0, float(np.max(x.norms())))
            rel = res / scale
            ok = rel <= tol and cert.fixed_point_residual <= 2 * solver_tol
            report.cases.append(PairCase(spec, name, bool(ok), float(rel), cert))
    return report


__all__ = ["WeightedNormSpec", "AdmissibilityCertificate", "NormGrowthWarning", "norm_Y",
           "norm_Gamma", "window_profile", "admissible_norm_bound", "solve_admissible",
           "ode_residual", "tail_profile", "default_pair_specs", "default_forcings",
           "check_pair_admissible", "PairCase", "PairReport", "SIGNED", "ABSOLUTE"]
