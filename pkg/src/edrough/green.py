"""Green function of a dichotomy and the integral operator it defines.

``G(t, s) = U(t,s) P(s)`` for ``t >= s`` and ``-U(t,s) Q(s)`` for ``t < s``.
Applying ``f -> int_J G(t, tau) f(tau) dtau`` produces the bounded solution of
``x' = A(t) x + f``. Integrals are truncated to the grid with the composite
trapezoid rule; the part of ``J`` beyond the grid is bounded analytically
from the dichotomy estimate and reported, never dropped silently.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ._linalg import op_norm, restricted_inverse
from .dichotomy import DichotomyEstimate
from .errors import DivergenceError, DomainError
from .flows import (HALF_LINE_MINUS, HALF_LINE_PLUS, GridFunction, LinearFlow, TimeGrid,
                    verify_mild_solution)


class GreenValue(NamedTuple):
    value: np.ndarray
    tail_bound: float


class GreenFunction:
    def __init__(self, flow: LinearFlow, est: DichotomyEstimate):
        if est.projections.dim != flow.dim:
            raise DomainError("estimate and flow have different dimensions")
        self.flow = flow
        self.est = est

    @property
    def grid(self) -> TimeGrid:
        return self.est.projections.grid

    def __call__(self, t: float, s: float) -> np.ndarray:
        return green_eval(self, t, s)


def green_eval(G: GreenFunction, t: float, s: float) -> np.ndarray:
    proj = G.est.projections
    grid = proj.grid
    i, j = grid.index_of(t), grid.index_of(s)
    if i >= j:
        return G.flow.evaluate(t, s) @ proj.P[j]
    fwd = G.flow.evaluate(s, t)
    return -restricted_inverse(fwd, proj.unstable_basis[i], proj.Q[j])


def green_table(G: GreenFunction, grid: TimeGrid, rows=None, forward=None) -> np.ndarray:
    """``G(t_rows[r], t_j)`` for every node ``j``; shape ``(R, N, n, n)``.

    ``forward`` may carry a precomputed full table ``U(t_i, t_j)``.
    """
    proj = G.est.projections
    if proj.grid.key != grid.key:
        raise DomainError("grid differs from the projection grid")
    rows = np.arange(grid.size) if rows is None else np.asarray(rows, dtype=int)
    n = G.flow.dim
    N = grid.size
    out = np.zeros((len(rows), N, n, n))
    if forward is None:
        lower = G.flow.table(grid, rows, np.arange(N))
    else:
        lower = forward[rows]
    mask = rows[:, None] >= np.arange(N)[None, :]
    r, j = np.nonzero(mask)
    out[r, j] = lower[r, j] @ proj.P[j]
    if proj.rank < n:
        # U(tau_j, t_i) for j > i, inverted on range Q(t_i)
        if forward is None:
            fwd = G.flow.table(grid, np.arange(N), rows)  # (N, R)
        else:
            fwd = forward[:, rows]
        r, j = np.nonzero(~mask)
        if len(r):
            out[r, j] = -restricted_inverse(fwd[j, r], proj.unstable_basis[rows[r]], proj.Q[j])
    return out


def tail_bound(est: DichotomyEstimate, grid: TimeGrid, t, fsup: float, growth: float = 0.0):
    """Bound on ``int ||G(t,tau) f(tau)|| dtau`` over ``J`` minus the grid.

    Assumes ``||f(tau)|| <= fsup * exp(growth |tau|)`` beyond the grid and uses
    ``||G(t,tau)|| <= K exp(-alpha |t - tau| + eps |tau|)``.
    """
    c = est.eps + growth
    if c >= est.alpha:
        raise DivergenceError(
            f"forcing growth {growth} plus eps {est.eps} reaches the exponent {est.alpha}"
        )
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    scale = est.K * fsup / (est.alpha - c)
    if grid.interval != HALF_LINE_MINUS or grid.t_max < 0:
        out = out + scale * np.exp(c * abs(grid.t_max) - est.alpha * (grid.t_max - t))
    if grid.interval != HALF_LINE_PLUS or grid.t_min > 0:
        out = out + scale * np.exp(c * abs(grid.t_min) - est.alpha * (t - grid.t_min))
    return out


def forcing_sup(f: GridFunction, growth: float = 0.0) -> float:
    """``sup ||f(tau)|| exp(-growth |tau|)`` over the grid."""
    return float(np.max(f.norms() * np.exp(-growth * np.abs(f.nodes))))


class GreenOperator:
    """Trapezoid discretization of ``f -> int G(t, tau) f(tau) dtau`` on a grid.

    The kernel jumps from ``P(t)`` to ``-Q(t)`` across ``tau = t``; each half of
    the split integral gets its own endpoint weight ``h/2`` at the diagonal.
    """

    def __init__(self, G: GreenFunction, grid: TimeGrid, forward=None):
        self.G = G
        self.grid = grid
        N, h = grid.size, grid.h
        proj = G.est.projections
        W = green_table(G, grid, forward=forward)
        w = np.full(N, h)
        w[0] = w[-1] = h / 2
        W *= w[None, :, None, None]
        left = np.full(N, h / 2)
        left[0] = 0.0
        right = np.full(N, h / 2)
        right[-1] = 0.0
        idx = np.arange(N)
        W[idx, idx] = left[:, None, None] * proj.P - right[:, None, None] * proj.Q
        n = G.flow.dim
        #: dense ``(N n, N n)`` weighted kernel
        self.matrix = W.transpose(0, 2, 1, 3).reshape(N * n, N * n)

    def apply(self, values: np.ndarray) -> np.ndarray:
        N, n = self.grid.size, self.G.flow.dim
        v = np.asarray(values, dtype=float).reshape(N * n, -1)
        out = self.matrix @ v
        return out.reshape((N, n) + np.asarray(values).shape[2:])


def green_apply(G: GreenFunction, f: GridFunction, t: float, growth: float = 0.0) -> GreenValue:
    """``int_J G(t, tau) f(tau) dtau`` at one node, with its truncation tail bound."""
    grid = f.grid
    i = grid.index_of(t)
    fsup = forcing_sup(f, growth)
    tail = float(tail_bound(G.est, grid, t, fsup, growth))
    row = green_table(G, grid, [i])[0]
    N, h = grid.size, grid.h
    w = np.full(N, h)
    w[0] = w[-1] = h / 2
    vals = np.einsum("j,jab,jb->a", w, row, f.values)
    proj = G.est.projections
    # split weights on the jump at tau = t
    vals -= w[i] * row[i] @ f.values[i]
    left = 0.0 if i == 0 else h / 2
    right = 0.0 if i == N - 1 else h / 2
    vals += (left * proj.P[i] - right * proj.Q[i]) @ f.values[i]
    return GreenValue(vals, tail)


def green_solution(G: GreenFunction, f: GridFunction, growth: float = 0.0):
    """Green integral at every node plus the per-node tail bound."""
    op = GreenOperator(G, f.grid)
    x = GridFunction(f.grid, op.apply(f.values))
    tails = tail_bound(G.est, f.grid, f.nodes, forcing_sup(f, growth), growth)
    return x, tails


def verify_green_solution(G: GreenFunction, f: GridFunction, grid: TimeGrid,
                          growth: float = 0.0) -> float:
    """Mild-solution defect of the Green integral of ``f``, started at ``t_min``."""
    if f.grid.key != grid.key:
        raise DomainError("forcing lives on a different grid")
    x, _ = green_solution(G, f, growth)
    return verify_mild_solution(x, G.flow, f, grid.t_min)


def green_bound_violation(G: GreenFunction, grid: TimeGrid) -> float:
    """Largest ``||G(t,s)|| / (K exp(-alpha|t-s| + eps|s|))`` over all node pairs."""
    tab = green_table(G, grid)
    t = grid.nodes
    bound = G.est.K * np.exp(-G.est.alpha * np.abs(t[:, None] - t[None, :])
                             + G.est.eps * np.abs(t[None, :]))
    return float((op_norm(tab) / bound).max())


__all__ = ["GreenFunction", "GreenOperator", "GreenValue", "green_apply", "green_eval",
           "green_solution", "green_table", "tail_bound", "verify_green_solution",
           "green_bound_violation", "forcing_sup"]
