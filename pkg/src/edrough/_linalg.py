"""Norms, subspace bases and quadrature weights used across the package.

All vector norms are the l1 norm and all matrix norms the operator norm it
induces (maximum absolute column sum), so that bounds for diagonal systems
are attained exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import InvertibilityError

RANK_RTOL = 1e-10
COND_MAX = 1e12


def vec_norm(x):
    """l1 norm over the last axis."""
    return np.abs(np.asarray(x)).sum(axis=-1)


def op_norm(m):
    """Operator norm induced by l1, batched over leading axes."""
    return np.abs(np.asarray(m)).sum(axis=-2).max(axis=-1)


def projection_rank(p):
    """Rank of a (batched) projection, read off its trace."""
    return np.rint(np.trace(np.asarray(p), axis1=-2, axis2=-1)).astype(int)


def range_basis(m, rank):
    """Orthonormal basis of the leading ``rank``-dimensional range of ``m``.

    Works on stacks of matrices; returns shape ``(..., n, rank)``.
    """
    m = np.asarray(m, dtype=float)
    if rank == 0:
        return np.zeros(m.shape[:-1] + (0,))
    u, sv, _ = np.linalg.svd(m)
    if np.any(sv[..., rank - 1] <= RANK_RTOL * sv[..., 0]):
        raise InvertibilityError("matrix has rank below the requested basis size")
    return u[..., :, :rank]


def restricted_inverse(forward, basis_t, proj_s):
    """Backward evaluation on an invariant bundle.

    For ``forward = U(s, t)`` with ``s >= t``, ``basis_t`` an orthonormal basis
    of the bundle at ``t`` and ``proj_s`` the projection onto the bundle at
    ``s``, returns ``E_t (U(s, t) E_t)^+ Q(s)``, i.e. the inverse of the
    restriction composed with the projection. Raises when the restriction is
    numerically singular.
    """
    f = forward @ basis_t
    if f.shape[-1] == 0:
        return np.zeros(forward.shape)
    u, sv, vt = np.linalg.svd(f, full_matrices=False)
    smin = sv[..., -1]
    smax = sv[..., 0]
    if np.any(~np.isfinite(sv)) or np.any(smin <= smax / COND_MAX):
        raise InvertibilityError(
            "restriction of U(t,s) to the unstable bundle has condition number above 1e12"
        )
    pinv = np.swapaxes(vt, -1, -2) @ (np.swapaxes(u, -1, -2) / sv[..., :, None])
    return basis_t @ pinv @ proj_s


def trapezoid_weights(k, h):
    """Composite trapezoid weights for ``k`` intervals of width ``h``."""
    w = np.full(k + 1, h)
    w[0] = w[-1] = h / 2
    if k == 0:
        w[:] = 0.0
    return w


def simpson_weights(k, h):
    """Composite Simpson weights for ``k`` intervals of width ``h``.

    Odd ``k >= 3`` closes with a Simpson 3/8 panel; ``k == 1`` falls back to
    the trapezoid rule.
    """
    if k == 0:
        return np.zeros(1)
    if k == 1:
        return np.array([h / 2, h / 2])
    w = np.zeros(k + 1)
    m = k if k % 2 == 0 else k - 3
    if m > 0:
        w[0:m + 1:2] += 2 * h / 3
        w[1:m:2] += 4 * h / 3
        w[0] -= h / 3
        w[m] -= h / 3
    if k % 2 == 1:
        w[m:m + 4] += np.array([3, 9, 9, 3]) * h / 8
    return w
