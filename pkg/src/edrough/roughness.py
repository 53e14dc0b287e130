"""Persistence of a dichotomy under a perturbation ``A(t) -> A(t) + B(t)``.

The smallness quantity is

    theta = sup_t int exp(-(alpha - beta)|t - tau|) b(tau) dtau,
    b(t)  = ||B(t)|| exp(eps |t|),

and the perturbed flow is obtained as the fixed point of

    (F V)(t, s) = U(t,s) P(s) + int_s^inf G(t, tau) B(tau) V(tau, s) dtau,

which contracts with modulus ``K theta`` in the weighted sup norm
``||V||_* = sup ||V(t,s)|| exp(beta (t - s) - eps |s|)``. The fixed point is
the stable part of the perturbed family; the whole family then follows from
the Volterra identity ``U_B = U + int_s^t U(t,tau) B(tau) U_B(tau,s) dtau``.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._linalg import COND_MAX, op_norm, range_basis
from .dichotomy import (DichotomyEstimate, ProjectionFamily, check_dichotomy, fit_dichotomy,
                        sample_nodes)
from .errors import (DivergenceError, DomainError, EvaluationError, InvertibilityError,
                     NoDichotomyError, NonConvergenceError, PreconditionError)
from .flows import HALF_LINE_MINUS, HALF_LINE_PLUS, GridFunction, LinearFlow, TabulatedFlow, TimeGrid
from .green import GreenFunction, GreenOperator

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Perturbation:
    """Matrix-valued perturbation ``B(t)``.

    ``eps_weight`` is the ``eps`` of ``b(t) = ||B(t)|| exp(eps |t|)``;
    ``tail_rate`` declares how ``b`` behaves beyond any grid it is sampled on
    (``b(tau) <= b(edge) exp(tail_rate * distance)``). ``norm`` optionally
    supplies ``||B(t)||`` directly for large operators. ``envelope`` is an
    analytic upper bound on ``||B(t)||``; when given, tail bounds start from
    it instead of the sampled value at the grid edge.
    """

    B: Callable
    dim: int
    eps_weight: float = 0.0
    tail_rate: float = 0.0
    norm: Optional[Callable] = None
    name: str = ""
    envelope: Optional[Callable] = None

    def __post_init__(self):
        if self.eps_weight < 0:
            raise DomainError("eps_weight must be nonnegative")

    def matrices(self, grid: TimeGrid) -> np.ndarray:
        vals = np.array([np.asarray(self.B(t), dtype=float).reshape(self.dim, self.dim)
                         for t in grid.nodes])
        if not np.all(np.isfinite(vals)):
            raise EvaluationError("perturbation B(t) has non-finite entries")
        return vals

    def norms(self, grid: TimeGrid) -> np.ndarray:
        if self.norm is not None:
            vals = np.array([float(self.norm(t)) for t in grid.nodes])
            if not np.all(np.isfinite(vals)):
                raise EvaluationError("perturbation norm is non-finite")
            return vals
        return op_norm(self.matrices(grid))

    def with_eps(self, eps: float) -> "Perturbation":
        return dataclasses.replace(self, eps_weight=float(eps))

    @classmethod
    def zero(cls, dim: int, eps_weight: float = 0.0) -> "Perturbation":
        z = np.zeros((dim, dim))
        return cls(lambda t: z, dim, eps_weight, tail_rate=0.0, norm=lambda t: 0.0, name="zero")

    @classmethod
    def constant(cls, m, eps_weight: float = 0.0) -> "Perturbation":
        m = np.atleast_2d(np.asarray(m, dtype=float))
        nm = float(op_norm(m))
        return cls(lambda t: m, m.shape[0], eps_weight, tail_rate=0.0, norm=lambda t: nm,
                   name="constant")


def weighted_bound(B: Perturbation, grid: TimeGrid) -> GridFunction:
    """Samples of ``b(t) = ||B(t)|| exp(eps |t|)``."""
    return GridFunction(grid, B.norms(grid) * np.exp(B.eps_weight * np.abs(grid.nodes)))


def edge_values(B: Perturbation, grid: TimeGrid, b: GridFunction) -> tuple[float, float]:
    """Values of ``b`` that seed the tails beyond each grid end."""
    lo, hi = float(b.values[0, 0]), float(b.values[-1, 0])
    if B.envelope is not None:
        w = np.exp(B.eps_weight * np.abs([grid.t_min, grid.t_max]))
        lo = max(lo, float(B.envelope(grid.t_min)) * w[0])
        hi = max(hi, float(B.envelope(grid.t_max)) * w[1])
    return lo, hi


@dataclass(frozen=True)
class ThetaReport:
    theta: float
    tail_bound: float
    K: float
    alpha: float
    beta: float
    profile: np.ndarray = field(repr=False, compare=False, default=None)

    @property
    def K_theta(self) -> float:
        return self.K * self.theta

    @property
    def certified(self) -> float:
        """``K (theta + tail)``, the quantity that must stay below one."""
        return self.K * (self.theta + self.tail_bound)

    @property
    def passes(self) -> bool:
        return self.certified < 1.0

    def to_record(self) -> dict:
        return {"theta": self.theta, "tail_bound": self.tail_bound, "K": self.K,
                "alpha": self.alpha, "beta": self.beta, "K_theta": self.K_theta,
                "K_theta_certified": self.certified, "passes": self.passes}


def _two_sided_sums(b, w, decay):
    """``sum_j w_j exp(-c |t_i - t_j|) b_j`` for all ``i`` by two recursions.

    ``decay`` is ``exp(-c h)``; every term is nonnegative so the recursions are
    free of cancellation.
    """
    v = w * b
    left = np.empty_like(v)
    right = np.empty_like(v)
    acc = 0.0
    for i in range(len(v)):
        acc = acc * decay + v[i]
        left[i] = acc
    acc = 0.0
    for i in range(len(v) - 1, -1, -1):
        acc = acc * decay + v[i]
        right[i] = acc
    return left + right - v


def compute_theta(b: GridFunction, alpha: float, beta: float, tail_rate: float = 0.0,
                  K: float = 1.0, edges: Optional[tuple] = None) -> ThetaReport:
    """Trapezoid value of ``theta`` on the grid plus an analytic tail bound.

    Beyond the grid ``b`` is assumed to satisfy
    ``b(tau) <= b(edge) exp(tail_rate |tau - edge|)``; the tail is then
    ``b(edge) exp(-c d) / (c - tail_rate)`` with ``c = alpha - beta`` and ``d``
    the distance from ``t`` to that edge. ``edges`` may override the two
    edge values of ``b`` with analytic bounds.
    """
    if not alpha > beta:
        raise DomainError("need alpha > beta")
    if not beta > 0:
        raise DomainError("need beta > 0")
    c = alpha - beta
    if tail_rate >= c:
        raise DivergenceError(f"b grows at rate {tail_rate} >= alpha - beta = {c}")
    vals = b.values[:, 0]
    if np.any(vals < 0):
        raise DomainError("b must be nonnegative")
    grid = b.grid
    h = grid.h
    w = np.full(grid.size, h)
    w[0] = w[-1] = h / 2
    profile = _two_sided_sums(vals, w, np.exp(-c * h))
    t = grid.nodes
    lo, hi = (vals[0], vals[-1]) if edges is None else edges
    tail = np.zeros_like(t)
    if grid.interval != HALF_LINE_MINUS or grid.t_max < 0:
        tail += hi * np.exp(-c * (grid.t_max - t)) / (c - tail_rate)
    if grid.interval != HALF_LINE_PLUS or grid.t_min > 0:
        tail += lo * np.exp(-c * (t - grid.t_min)) / (c - tail_rate)
    return ThetaReport(theta=float(profile.max()), tail_bound=float(tail.max()), K=float(K),
                       alpha=float(alpha), beta=float(beta), profile=profile)


def theta_for(est: DichotomyEstimate, B: Perturbation, grid: TimeGrid, beta: float) -> ThetaReport:
    """``compute_theta`` with the constants of a dichotomy estimate."""
    B = B if B.eps_weight >= est.eps else B.with_eps(est.eps)
    b = weighted_bound(B, grid)
    return compute_theta(b, est.alpha, beta, B.tail_rate, est.K, edges=edge_values(B, grid, b))


@dataclass(frozen=True)
class StarNorm:
    beta: float
    eps: float = 0.0

    def __post_init__(self):
        if not self.beta > 0:
            raise DomainError("beta must be positive")
        if self.eps < 0:
            raise DomainError("eps must be nonnegative")

    def weights(self, t, s):
        return np.exp(self.beta * (np.asarray(t) - np.asarray(s)) - self.eps * np.abs(s))


@dataclass(frozen=True)
class PairSamples:
    """Matrices ``M(t_k, s_k)`` on pairs with ``t_k >= s_k``."""

    t: np.ndarray
    s: np.ndarray
    values: np.ndarray


def star_norm_eval(M: PairSamples, norm: StarNorm) -> float:
    """``max ||M(t,s)|| exp(beta (t - s) - eps |s|)`` over the samples."""
    if len(M.t) == 0:
        raise DomainError("star norm of an empty sample set")
    if np.any(np.asarray(M.t) < np.asarray(M.s)):
        raise DomainError("star norm samples need t >= s")
    return float(np.max(op_norm(M.values) * norm.weights(M.t, M.s)))


def _table_star(diff, grid, anchors, valid, norm):
    t = grid.nodes[:, None]
    s = grid.nodes[anchors][None, :]
    w = np.where(valid, norm.weights(t, s), 0.0)
    return float(np.max(op_norm(np.nan_to_num(diff)) * w))


@dataclass
class PerturbedFlow:
    """Tabulated perturbed family on grid pairs ``(t_i, s_a)`` with ``t_i >= s_a``.

    ``stable`` holds the fixed point of the stable-part map, ``values`` the
    full family ``U_B``; both have shape ``(N, A, n, n)`` with NaN where
    ``t_i < s_a``. ``anchors`` are node indices (every ``stride``-th node).
    """

    grid: TimeGrid
    anchors: np.ndarray
    stride: int
    stable: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    iterations: int
    contraction_history: list
    fixed_point_residual: float
    tail_profile: np.ndarray = field(repr=False)
    theta: ThetaReport
    norm: StarNorm
    flow: LinearFlow = field(repr=False)
    est: DichotomyEstimate = field(repr=False)
    perturbation: Perturbation = field(repr=False)

    @property
    def tail_bound(self) -> float:
        return float(np.max(self.tail_profile))

    @property
    def ratios(self) -> np.ndarray:
        h = np.asarray(self.contraction_history)
        if len(h) < 2:
            return np.zeros(0)
        return h[1:] / np.where(h[:-1] > 0, h[:-1], np.inf)

    @property
    def anchor_grid(self) -> TimeGrid:
        return self.grid.stride(self.stride)

    def as_flow(self) -> TabulatedFlow:
        return TabulatedFlow(self.grid, self.values, cols=self.anchors, name="perturbed")

    def anchor_flow(self) -> TabulatedFlow:
        return self.as_flow().restricted(self.anchor_grid)

    def summary(self) -> dict:
        r = self.ratios
        return {"iterations": self.iterations,
                "final_delta": float(self.contraction_history[-1]),
                "max_ratio": float(r.max()) if len(r) else 0.0,
                "fixed_point_residual": self.fixed_point_residual,
                "tail_bound_max": self.tail_bound,
                "tail_bound_mid": float(self.tail_profile[len(self.tail_profile) // 2]),
                "anchors": int(len(self.anchors)), "stride": self.stride}


def anchor_indices(grid: TimeGrid, stride: int) -> np.ndarray:
    sub = grid.stride(stride)
    return np.arange(sub.size) * stride


def picard_perturbed(flow: LinearFlow, est: DichotomyEstimate, B: Perturbation, grid: TimeGrid,
                     norm: StarNorm, tol: float = 1e-10, max_iter: int = 200,
                     stride: int = 10) -> PerturbedFlow:
    """Perturbed evolution family by Picard iteration on the stable-part map.

    Iterates ``V_{k+1} = U P + int_s^{t_max} G B V_k`` on all pairs
    ``(t_i, s_a)`` from ``V_0 = U P`` until the star-norm change drops below
    ``tol``; then solves the Volterra identity for ``U_B`` on the same pairs.
    Raises :class:`PreconditionError` unless ``K (theta + tail) < 1``.
    """
    proj = est.projections
    if proj.grid.key != grid.key:
        raise DomainError("estimate projections live on a different grid")
    if B.dim != flow.dim:
        raise DomainError("perturbation and flow dimensions differ")
    if abs(norm.eps - est.eps) > 1e-12:
        raise DomainError("star norm eps must match the dichotomy eps")
    if not est.eps < est.alpha - norm.beta:
        raise PreconditionError("need 0 <= eps < alpha - beta")
    th = theta_for(est, B, grid, norm.beta)
    if not th.passes:
        raise PreconditionError(
            f"K (theta + tail) = {th.certified:.4g} >= 1; no contraction guaranteed"
        )
    N, n, h = grid.size, flow.dim, grid.h
    anchors = anchor_indices(grid, stride)
    A = len(anchors)
    t = grid.nodes

    forward = flow.table(grid)
    G = GreenFunction(flow, est)
    W = GreenOperator(G, grid, forward=forward).matrix
    Bm = B.matrices(grid)
    valid = np.arange(N)[:, None] >= anchors[None, :]

    C = np.zeros((N, A, n, n))
    r, a = np.nonzero(valid)
    C[r, a] = forward[r, anchors[a]] @ proj.P[anchors[a]]

    def sweep(V):
        Z = np.einsum("jxy,jayz->jaxz", Bm, V)
        Z[~valid] = 0.0
        R = (W @ Z.transpose(0, 2, 1, 3).reshape(N * n, A * n))
        R = R.reshape(N, n, A, n).transpose(0, 2, 1, 3)
        # restrict the integral to [s_a, t_max]: halve the endpoint weight at s_a
        za = Z[anchors, np.arange(A)]
        corr = np.einsum("iaxy,ayz->iaxz", C, za) * (h / 2)
        corr[:, anchors == 0] = 0.0
        out = C + R - corr
        out[~valid] = 0.0
        return out

    V = C.copy()
    history = []
    for k in range(1, max_iter + 1):
        Vn = sweep(V)
        delta = _table_star(Vn - V, grid, anchors, valid, norm)
        history.append(delta)
        V = Vn
        log.debug("picard sweep %d: delta %.3e", k, delta)
        if delta <= tol:
            break
    else:
        raise NonConvergenceError(
            f"Picard iteration did not reach {tol:g} in {max_iter} sweeps", history
        )
    fp_res = _table_star(sweep(V) - V, grid, anchors, valid, norm)

    vstar = _table_star(V, grid, anchors, valid, norm)
    Bw = B if B.eps_weight >= est.eps else B.with_eps(est.eps)
    _, b_edge = edge_values(Bw, grid, weighted_bound(Bw, grid))
    c = est.alpha - norm.beta
    if B.tail_rate >= c:
        raise DivergenceError("perturbation grows too fast beyond the grid")
    if grid.interval == HALF_LINE_MINUS and grid.t_max >= 0:
        tail = np.zeros(N)
    else:
        tail = est.K * vstar * b_edge * np.exp(-c * (grid.t_max - t)) / (c - B.tail_rate)

    values = _volterra_family(forward, Bm, anchors, h)
    values[~valid] = np.nan
    V[~valid] = np.nan
    return PerturbedFlow(
        grid=grid, anchors=anchors, stride=stride, stable=V, values=values,
        iterations=len(history), contraction_history=history, fixed_point_residual=fp_res,
        tail_profile=tail, theta=th, norm=norm, flow=flow, est=est, perturbation=B,
    )


def _volterra_family(forward, Bm, anchors, h):
    """March the trapezoid Volterra identity forward in ``t`` for every anchor."""
    N, _, n, _ = forward.shape
    A = len(anchors)
    eye = np.eye(n)
    UB = np.zeros((N, A, n, n))
    # weighted history, row block j holds w_{j,a} B_j U_B(t_j, s_a)
    hist = np.zeros((N * n, A * n))
    for i in range(N):
        born = anchors == i
        live = anchors < i
        if born.any():
            UB[i, born] = eye
        if live.any():
            rhs = forward[i, anchors].copy()
            if i > 0:
                Ci = forward[i, :i].transpose(1, 0, 2).reshape(n, i * n)
                rhs += (Ci @ hist[: i * n]).reshape(n, A, n).transpose(1, 0, 2)
            lhs = eye - (h / 2) * Bm[i]
            sol = np.linalg.solve(lhs[None], rhs[live])
            UB[i, live] = sol
        # record this row with its weight for later rows
        w = np.where(anchors == i, h / 2, np.where(anchors < i, h, 0.0))
        contrib = np.einsum("xy,ayz->axz", Bm[i], UB[i]) * w[:, None, None]
        hist[i * n:(i + 1) * n] = contrib.transpose(1, 0, 2).reshape(n, A * n)
    return UB


def _simpson_weight(d, k, h):
    """Composite Simpson weight of offset ``d`` in a rule over ``k`` intervals (vectorized)."""
    d = np.asarray(d)
    k = np.broadcast_to(np.asarray(k), d.shape)
    w = np.zeros(d.shape)
    inside = (d >= 0) & (d <= k)
    trap = inside & (k == 1)
    w[trap] = h / 2
    even_part_end = np.where(k % 2 == 0, k, k - 3)
    simp = inside & (k >= 2) & (d <= even_part_end) & (even_part_end > 0)
    base = np.where(d % 2 == 1, 4 * h / 3, 2 * h / 3)
    base = np.where((d == 0) | (d == even_part_end), h / 3, base)
    w[simp] += base[simp]
    odd = inside & (k >= 3) & (k % 2 == 1) & (d >= k - 3)
    coef = np.choose(np.clip(d - (k - 3), 0, 3), [3, 9, 9, 3]) * h / 8
    w[odd] += coef[odd]
    return w


def verify_perturbed_identity(pf: PerturbedFlow, flow: LinearFlow, B: Perturbation,
                              grid: TimeGrid, max_rows: int = 200) -> float:
    """Largest defect of ``U_B(t,s) = U(t,s) + int_s^t U(t,tau) B(tau) U_B(tau,s) dtau``.

    Uses composite Simpson weights over sampled rows ``t`` and all anchors.
    Each defect is divided by ``max(1, ||U_B(t,s)||)`` so that growing
    unstable directions are measured relative to their size.
    """
    if grid.key != pf.grid.key:
        raise DomainError("perturbed flow lives on a different grid")
    N = grid.size
    anchors = pf.anchors
    rows = sample_nodes(N, max_rows)
    forward = flow.table(grid, rows, np.arange(N))
    Bm = B.matrices(grid)
    UB = np.nan_to_num(pf.values)
    BU = np.einsum("jxy,jayz->jaxz", Bm, UB)
    worst = 0.0
    for r, i in enumerate(rows):
        live = anchors <= i
        if not live.any():
            continue
        d = np.arange(i + 1)[:, None] - anchors[None, live]
        w = _simpson_weight(d, (i - anchors[live])[None, :], grid.h)
        integral = np.einsum("ja,jxy,jayz->axz", w, forward[r, :i + 1], BU[:i + 1][:, live])
        res = UB[i, live] - forward[r, anchors[live]] - integral
        scale = np.maximum(1.0, op_norm(UB[i, live]))
        worst = max(worst, float((op_norm(res) / scale).max()))
    return worst


def tabulated_cocycle_residual(pf: PerturbedFlow, samples: int = 200, seed: int = 0) -> float:
    """Largest ``||U_B(t,r) U_B(r,s) - U_B(t,s)||`` over random anchor triples."""
    sub = pf.anchor_flow()
    vals = sub.values
    A = vals.shape[0]
    if A < 2:
        raise DomainError("need at least two anchors")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        s, r, t = np.sort(rng.integers(0, A, 3))
        d = vals[t, r] @ vals[r, s] - vals[t, s]
        scale = max(1.0, float(op_norm(vals[t, s])))
        worst = max(worst, float(op_norm(d)) / scale)
    return worst


def perturbed_projections(pf: PerturbedFlow) -> ProjectionFamily:
    """Projections of the perturbed dichotomy on the anchor grid.

    The range is spanned by the orthonormalized columns of the converged
    stable solution operator ``V(s, s)``; the kernel is the unperturbed
    unstable subspace at ``t_min`` carried forward by ``U_B``.
    """
    proj = pf.est.projections
    n = pf.flow.dim
    k = proj.rank
    anchors = pf.anchors
    A = len(anchors)
    diag_v = pf.stable[anchors, np.arange(A)]
    S = range_basis(diag_v, k) if k else np.zeros((A, n, 0))
    if k < n:
        E0 = proj.unstable_basis[0]
        carried = pf.values[anchors, 0] @ E0
        R = range_basis(carried, n - k)
    else:
        R = np.zeros((A, n, 0))
    M = np.concatenate([S, R], axis=2)
    sv = np.linalg.svd(M, compute_uv=False)
    if np.any(sv[:, -1] <= sv[:, 0] / COND_MAX):
        raise InvertibilityError("perturbed stable and unstable subspaces are not complementary")
    D = np.diag(np.r_[np.ones(k), np.zeros(n - k)])
    P = M @ D @ np.linalg.inv(M)
    return ProjectionFamily(pf.anchor_grid, P)


def perturbed_dichotomy(pf: PerturbedFlow, grid: TimeGrid, beta: float, slack: float = 0.05,
                        tol: float = 1e-6, eps_fixed: Optional[float] = None) -> DichotomyEstimate:
    """Fit and check a dichotomy for the perturbed family.

    Raises :class:`NoDichotomyError` when the envelope check fails or the
    fitted exponent falls below ``beta - slack``.
    """
    if grid.key != pf.grid.key:
        raise DomainError("perturbed flow lives on a different grid")
    proj_b = perturbed_projections(pf)
    sub = pf.anchor_grid
    flow_b = pf.anchor_flow()
    est = fit_dichotomy(flow_b, proj_b, sub, eps_fixed=eps_fixed)
    report = check_dichotomy(flow_b, est, sub, tol=tol)
    diagnostics = dict(est.diagnostics)
    diagnostics.update(report.to_record())
    est = dataclasses.replace(est, diagnostics=diagnostics)
    if not report.passes:
        raise NoDichotomyError("perturbed family fails the fitted dichotomy bounds", diagnostics)
    if est.alpha < beta - slack:
        raise NoDichotomyError(
            f"perturbed exponent {est.alpha:.4g} below beta = {beta:.4g}", diagnostics
        )
    return est


@dataclass(frozen=True)
class ExponentChoice:
    est: DichotomyEstimate
    beta: float
    theta: ThetaReport
    candidates: list


def select_exponents(flow: LinearFlow, base: DichotomyEstimate, B: Perturbation, grid: TimeGrid,
                     target: float = 0.9, alpha_fractions=(1.0, 0.8, 0.6, 0.5, 0.4, 0.3, 0.2,
                                                           0.15, 0.1, 0.05),
                     beta_fractions=(0.75, 0.5, 0.25, 0.1)) -> ExponentChoice:
    """Trade exponent for bound to make ``K theta`` small.

    For each trial exponent below the fitted one the smallest admissible ``K``
    is refitted with ``alpha`` pinned; ``theta`` is computed for several
    ``beta``. Among pairs with ``K (theta + tail) <= target`` the one with the
    largest ``beta`` wins; otherwise the smallest ``K (theta + tail)``.
    """
    rows = []
    best = None
    for fa in alpha_fractions:
        alpha = base.alpha * fa
        if fa == 1.0:
            est = base
        else:
            est = fit_dichotomy(flow, base.projections, grid, eps_fixed=base.eps, alpha_fixed=alpha)
        for fb in beta_fractions:
            beta = alpha * fb
            if not est.eps < alpha - beta:
                continue
            th = theta_for(est, B, grid, beta)
            rows.append({"alpha": alpha, "K": est.K, "beta": beta, "theta": th.theta,
                         "tail": th.tail_bound, "K_theta": th.certified})
            key = (th.certified <= target, beta if th.certified <= target else -th.certified)
            if best is None or key > best[0]:
                best = (key, est, beta, th)
    if best is None:
        raise DomainError("no admissible (alpha, beta) candidates")
    _, est, beta, th = best
    return ExponentChoice(est, beta, th, rows)
