"""Evolution families of linear nonautonomous systems on a time grid.

A flow maps a pair of times ``(t, s)`` to the matrix ``U(t, s)`` that
propagates solutions of ``x' = A(t) x`` from ``s`` to ``t``. Two sources are
supported: closed-form maps and coefficient functions integrated with the
classical fourth-order Runge-Kutta method. Both can produce whole tables of
``U(t_i, t_j)`` over grid nodes, which is what every downstream operator
consumes.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from ._linalg import op_norm, simpson_weights, vec_norm
from .errors import DomainError, EvaluationError

FULL_LINE = "full_line"
HALF_LINE_PLUS = "half_line_plus"
HALF_LINE_MINUS = "half_line_minus"
INTERVALS = (FULL_LINE, HALF_LINE_PLUS, HALF_LINE_MINUS)

_FLIP = {FULL_LINE: FULL_LINE, HALF_LINE_PLUS: HALF_LINE_MINUS, HALF_LINE_MINUS: HALF_LINE_PLUS}


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_min, t_min + h, ..., t_max`` on one of the intervals."""

    t_min: float
    t_max: float
    h: float
    interval: str = FULL_LINE

    def __post_init__(self):
        if self.interval not in INTERVALS:
            raise DomainError(f"unknown interval tag {self.interval!r}")
        if not (np.isfinite(self.t_min) and np.isfinite(self.t_max) and np.isfinite(self.h)):
            raise DomainError("grid bounds must be finite")
        if not self.h > 0:
            raise DomainError("grid step must be positive")
        if not self.t_min < self.t_max:
            raise DomainError("grid needs t_min < t_max (a single node admits no pairs)")
        k = (self.t_max - self.t_min) / self.h
        if abs(k - round(k)) > 1e-8 * max(1.0, k):
            raise DomainError("grid step must divide t_max - t_min")

    @property
    def size(self) -> int:
        return int(round((self.t_max - self.t_min) / self.h)) + 1

    @cached_property
    def nodes(self) -> np.ndarray:
        t = self.t_min + self.h * np.arange(self.size)
        t[-1] = self.t_max
        return t

    def index_of(self, t: float) -> int:
        """Index of the node equal to ``t`` (up to rounding)."""
        k = (t - self.t_min) / self.h
        i = int(round(k))
        if abs(k - i) > 1e-6 or not 0 <= i < self.size:
            raise DomainError(f"time {t} is not a node of {self}")
        return i

    def stride(self, m: int) -> "TimeGrid":
        """Subgrid made of every ``m``-th node, starting at ``t_min``."""
        if m < 1:
            raise DomainError("stride must be a positive integer")
        last = ((self.size - 1) // m) * m
        if last == 0:
            raise DomainError("stride leaves fewer than two nodes")
        return TimeGrid(self.t_min, float(self.nodes[last]), self.h * m, self.interval)

    def reflected(self) -> "TimeGrid":
        return TimeGrid(-self.t_max, -self.t_min, self.h, _FLIP[self.interval])

    @property
    def key(self):
        return (float(self.t_min), float(self.t_max), float(self.h), self.size)


@dataclass(frozen=True)
class GridFunction:
    """Vector- or matrix-valued samples, one per grid node."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.size:
            raise DomainError(
                f"{v.shape[0]} samples given for a grid with {self.grid.size} nodes"
            )
        if not np.all(np.isfinite(v)):
            raise EvaluationError("grid function has non-finite samples")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, grid: TimeGrid, f: Callable) -> "GridFunction":
        return cls(grid, np.array([np.atleast_1d(f(t)) for t in grid.nodes], dtype=float))

    @property
    def nodes(self):
        return self.grid.nodes

    def norms(self) -> np.ndarray:
        """Pointwise norms: l1 for vectors, induced norm for matrices."""
        if self.values.ndim == 2:
            return vec_norm(self.values)
        return op_norm(self.values)

    def __add__(self, other: "GridFunction") -> "GridFunction":
        _same_grid(self.grid, other.grid)
        return GridFunction(self.grid, self.values + other.values)

    def __mul__(self, scalar: float) -> "GridFunction":
        return GridFunction(self.grid, scalar * self.values)

    __rmul__ = __mul__


def _same_grid(a: TimeGrid, b: TimeGrid):
    if a.key != b.key:
        raise DomainError("grid functions live on different grids")


class LinearFlow:
    """Common interface of evolution families.

    Subclasses implement :meth:`evaluate` and :meth:`table`. Instances are
    immutable once built; internal caches are guarded by a lock.
    """

    dim: int
    interval: str = FULL_LINE
    name: str = ""

    def evaluate(self, t: float, s: float) -> np.ndarray:
        raise NotImplementedError

    def generator(self, t: float) -> np.ndarray:
        """Coefficient matrix ``A(t)``."""
        raise NotImplementedError

    def table(self, grid: TimeGrid, rows=None, cols=None) -> np.ndarray:
        """Array ``T[r, c] = U(t_rows[r], t_cols[c])`` for ``rows[r] >= cols[c]``.

        Entries below the diagonal constraint are NaN.
        """
        raise NotImplementedError


def _index_array(grid: TimeGrid, idx):
    if idx is None:
        return np.arange(grid.size)
    idx = np.asarray(idx, dtype=int)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= grid.size)):
        raise DomainError("node indices out of range")
    return idx


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"{what} produced non-finite values")
    return arr


class ClosedFormFlow(LinearFlow):
    """Flow given by an explicit map ``(t, s) -> U(t, s)``.

    ``func`` must accept broadcastable float arrays ``t`` and ``s`` and return
    an array of shape ``broadcast(t, s).shape + (n, n)``. It is evaluated for
    any order of ``t`` and ``s``.
    """

    def __init__(self, dim: int, func: Callable, generator: Optional[Callable] = None,
                 name: str = "", interval: str = FULL_LINE):
        if dim < 1:
            raise DomainError("dimension must be positive")
        self.dim = int(dim)
        self.func = func
        self._generator = generator
        self.name = name
        self.interval = interval

    def evaluate(self, t, s):
        t = float(t)
        s = float(s)
        if t == s:
            return np.eye(self.dim)
        with np.errstate(over="ignore", invalid="ignore"):
            u = np.asarray(self.func(np.float64(t), np.float64(s)), dtype=float)
        return _check_finite(u.reshape(self.dim, self.dim), "closed-form flow")

    def generator(self, t):
        if self._generator is not None:
            return np.asarray(self._generator(float(t)), dtype=float).reshape(self.dim, self.dim)
        eta = 1e-5
        return (self.evaluate(t + eta, t) - self.evaluate(t - eta, t)) / (2 * eta)

    def table(self, grid, rows=None, cols=None):
        rows = _index_array(grid, rows)
        cols = _index_array(grid, cols)
        t = grid.nodes[rows][:, None]
        s = grid.nodes[cols][None, :]
        valid = rows[:, None] >= cols[None, :]
        with np.errstate(over="ignore", invalid="ignore"):
            u = np.asarray(self.func(t * np.ones_like(s), s * np.ones_like(t)), dtype=float)
        u = u.reshape(len(rows), len(cols), self.dim, self.dim).copy()
        diag = rows[:, None] == cols[None, :]
        u[diag] = np.eye(self.dim)
        _check_finite(u[valid], "closed-form flow")
        u[~valid] = np.nan
        return u


def rk4_step_matrix(a: Callable, t: float, dt: float, dim: int) -> np.ndarray:
    """One classical Runge-Kutta step for the matrix equation ``Y' = A(t) Y``."""
    eye = np.eye(dim)
    a0 = np.asarray(a(t), dtype=float).reshape(dim, dim)
    am = np.asarray(a(t + dt / 2), dtype=float).reshape(dim, dim)
    a1 = np.asarray(a(t + dt), dtype=float).reshape(dim, dim)
    k1 = a0
    k2 = am @ (eye + dt / 2 * k1)
    k3 = am @ (eye + dt / 2 * k2)
    k4 = a1 @ (eye + dt * k3)
    m = eye + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return _check_finite(m, "coefficient A(t)")


class CoefficientFlow(LinearFlow):
    """Flow of ``x' = A(t) x`` integrated by fixed-step RK4.

    Forward propagation only: ``evaluate(t, s)`` needs ``t >= s``. Between two
    times the step is ``(t - s) / ceil((t - s) / h)``, so node-to-node
    evaluation on a grid of step ``h`` uses exactly ``h``.
    """

    def __init__(self, dim: int, coefficient: Callable, h: float, name: str = "",
                 interval: str = FULL_LINE):
        if dim < 1:
            raise DomainError("dimension must be positive")
        if not h > 0:
            raise DomainError("integrator step must be positive")
        self.dim = int(dim)
        self.coefficient = coefficient
        self.h = float(h)
        self.name = name
        self.interval = interval
        self._steps = {}
        self._lock = threading.Lock()

    def generator(self, t):
        return _check_finite(
            np.asarray(self.coefficient(float(t)), dtype=float).reshape(self.dim, self.dim),
            "coefficient A(t)",
        )

    def _n_steps(self, span):
        return max(1, math.ceil(span / self.h - 1e-9))

    def evaluate(self, t, s):
        t = float(t)
        s = float(s)
        if t < s:
            raise DomainError("coefficient flows propagate forward only (need t >= s)")
        if t == s:
            return np.eye(self.dim)
        k = self._n_steps(t - s)
        dt = (t - s) / k
        u = np.eye(self.dim)
        for j in range(k):
            u = rk4_step_matrix(self.coefficient, s + j * dt, dt, self.dim) @ u
        return u

    def step_matrices(self, grid: TimeGrid) -> np.ndarray:
        """Node-to-node propagators ``U(t_{k+1}, t_k)``, cached per grid."""
        with self._lock:
            cached = self._steps.get(grid.key)
        if cached is not None:
            return cached
        t = grid.nodes
        steps = np.stack([self.evaluate(t[k + 1], t[k]) for k in range(grid.size - 1)])
        steps.setflags(write=False)
        with self._lock:
            self._steps[grid.key] = steps
        return steps

    def table(self, grid, rows=None, cols=None):
        rows = _index_array(grid, rows)
        cols = _index_array(grid, cols)
        steps = self.step_matrices(grid)
        n = self.dim
        out = np.full((len(rows), len(cols), n, n), np.nan)
        if len(rows) == 0 or len(cols) == 0:
            return out
        row_pos = {}
        for r, i in enumerate(rows):
            row_pos.setdefault(int(i), []).append(r)
        # march forward in time, one state per requested column
        state = np.full((len(cols), n, n), np.nan)
        active = np.zeros(len(cols), dtype=bool)
        start = int(cols.min())
        stop = int(rows.max())
        for i in range(start, stop + 1):
            born = cols == i
            if born.any():
                state[born] = np.eye(n)
                active |= born
            for r in row_pos.get(i, ()):
                out[r, active] = state[active]
            if i < stop:
                state[active] = steps[i] @ state[active]
        return out


class TabulatedFlow(LinearFlow):
    """Flow known only through a table on a fixed grid.

    ``values[i, c] = U(t_i, t_{cols[c]})`` for ``i >= cols[c]``.
    """

    def __init__(self, grid: TimeGrid, values: np.ndarray, cols=None, name: str = "",
                 interval: Optional[str] = None):
        self.grid = grid
        self.cols = _index_array(grid, cols)
        values = np.asarray(values, dtype=float)
        if values.shape[:2] != (grid.size, len(self.cols)):
            raise DomainError("table shape does not match grid and anchor columns")
        self.values = values
        self.dim = values.shape[-1]
        self.name = name
        self.interval = interval or grid.interval
        self._col_of = {int(c): k for k, c in enumerate(self.cols)}

    def evaluate(self, t, s):
        i = self.grid.index_of(t)
        j = self.grid.index_of(s)
        if i < j:
            raise DomainError("tabulated flows store forward pairs only")
        if j not in self._col_of:
            raise DomainError(f"time {s} is not an anchor of the tabulated flow")
        return self.values[i, self._col_of[j]].copy()

    def table(self, grid, rows=None, cols=None):
        if grid.key != self.grid.key:
            raise DomainError("tabulated flow queried on a foreign grid")
        rows = _index_array(grid, rows)
        cols = self.cols if cols is None else _index_array(grid, cols)
        try:
            ck = [self._col_of[int(c)] for c in cols]
        except KeyError as exc:
            raise DomainError(f"node {exc.args[0]} is not an anchor of the tabulated flow")
        out = self.values[rows][:, ck].copy()
        out[~(rows[:, None] >= cols[None, :])] = np.nan
        return out

    def restricted(self, sub: TimeGrid) -> "TabulatedFlow":
        """Restriction to a stride subgrid whose nodes are all anchors."""
        m = int(round(sub.h / self.grid.h))
        idx = np.arange(sub.size) * m
        return TabulatedFlow(sub, self.table(self.grid, idx, idx), name=self.name,
                             interval=self.interval)


def reflect_time(flow: LinearFlow) -> LinearFlow:
    """Flow of the time-reversed system ``z(t) = x(-t)``.

    The reflected family is ``V(t, s) = U(-t, -s)``, generated by
    ``-A(-t)``; the interval tag is mirrored. Reflection is an involution.
    """
    interval = _FLIP[flow.interval]
    if isinstance(flow, ClosedFormFlow):
        func = flow.func
        gen = flow._generator
        return ClosedFormFlow(
            flow.dim,
            lambda t, s: func(-t, -s),
            generator=None if gen is None else (lambda t: -np.asarray(gen(-t))),
            name=_reflected_name(flow.name),
            interval=interval,
        )
    if isinstance(flow, CoefficientFlow):
        coef = flow.coefficient
        return CoefficientFlow(flow.dim, lambda t: -np.asarray(coef(-t)), flow.h,
                               name=_reflected_name(flow.name), interval=interval)
    raise DomainError(f"cannot reflect a {type(flow).__name__}")


def _reflected_name(name):
    if name.startswith("reflected(") and name.endswith(")"):
        return name[len("reflected("):-1]
    return f"reflected({name})"


def reflect_function(f: GridFunction) -> GridFunction:
    """Samples of ``t -> f(-t)`` on the reflected grid."""
    return GridFunction(f.grid.reflected(), f.values[::-1])


def cocycle_residual(flow: LinearFlow, grid: TimeGrid, samples: int = 64,
                     seed: int = 0) -> float:
    """Largest defect ``||U(t,r)U(r,s) - U(t,s)||`` over random triples.

    Triples ``t >= r >= s`` are drawn uniformly from ``[t_min, t_max]`` with a
    seeded generator, so the result is reproducible and also probes times
    between nodes.
    """
    if samples < 1:
        raise DomainError("need at least one sample")
    if grid.size < 2:
        raise DomainError("grid has no triples")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        s, r, t = np.sort(rng.uniform(grid.t_min, grid.t_max, 3))
        d = flow.evaluate(t, r) @ flow.evaluate(r, s) - flow.evaluate(t, s)
        worst = max(worst, float(op_norm(d)))
    return worst


def verify_mild_solution(x: GridFunction, flow: LinearFlow, y: GridFunction, s: float,
                         block: int = 256) -> float:
    """Largest defect of ``x(t) = U(t,s)x(s) + int_s^t U(t,tau) y(tau) dtau``.

    The integral is evaluated with composite Simpson weights on the nodes
    between ``s`` and ``t``, which keeps the check independent of the
    trapezoid rule used to build solutions elsewhere.
    """
    _same_grid(x.grid, y.grid)
    grid = x.grid
    a = grid.index_of(s)
    xv = x.values
    yv = y.values
    if xv.shape[1] != flow.dim or yv.shape[1] != flow.dim:
        raise DomainError("dimension mismatch between flow and grid functions")
    worst = 0.0
    for lo in range(a, grid.size, block):
        rows = np.arange(lo, min(lo + block, grid.size))
        cols = np.arange(a, rows[-1] + 1)
        tab = flow.table(grid, rows, cols)
        for r, i in enumerate(rows):
            k = i - a
            hom = tab[r, 0] @ xv[a]
            if k == 0:
                integral = 0.0
            else:
                w = simpson_weights(k, grid.h)
                integral = np.einsum("j,jab,jb->a", w, tab[r, :k + 1], yv[a:i + 1])
            worst = max(worst, float(vec_norm(xv[i] - hom - integral)))
    return worst


@dataclass(frozen=True)
class FlowSpec:
    """Small record describing a flow for reports."""

    kind: str
    dim: int
    name: str = ""
    extra: dict = field(default_factory=dict)


def describe(flow: LinearFlow) -> FlowSpec:
    kind = {ClosedFormFlow: "closed_form", CoefficientFlow: "coefficient",
            TabulatedFlow: "tabulated"}.get(type(flow), type(flow).__name__)
    extra = {"h": flow.h} if isinstance(flow, CoefficientFlow) else {}
    return FlowSpec(kind, flow.dim, flow.name, extra)
