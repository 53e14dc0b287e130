"""Model problems with closed-form or semi-analytic structure.

* ``scalar_decay``: ``x' = -x`` with a constant perturbation ``delta``.
* ``saddle_2x2``: ``diag(-1, +1)``.
* ``example_sys``: the diagonal system with ``a(t) = -t + sin t``,
  ``b(t) = t - cos t`` perturbed by Riemann-Liouville integrals of ``sin`` and
  ``cos`` damped by ``exp(-2 eps t)``.
* ``nonlocal_ide``: a finite spatial-grid surrogate of
  ``x'(t) = a x(t) + w(t) int J(xi) x(t, . + xi) dxi`` with the oscillating
  kernel ``J(xi) = sin(xi^2) (1 + xi^2)^(-beta_k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

from ._linalg import op_norm
from .dichotomy import ProjectionFamily
from .errors import DomainError, TruncationError
from .flows import (FULL_LINE, HALF_LINE_PLUS, ClosedFormFlow, GridFunction, LinearFlow,
                    TimeGrid)
from .roughness import Perturbation

# ---------------------------------------------------------------- fractional


@dataclass(frozen=True)
class FractionalIntegralSpec:
    gamma: float
    base_function: str = "sin"

    def __post_init__(self):
        if not self.gamma > 0:
            raise DomainError("fractional order must be positive")

    def base(self) -> Callable:
        try:
            return BASE_FUNCTIONS[self.base_function]
        except KeyError:
            raise DomainError(f"unknown base function {self.base_function!r}") from None


BASE_FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "identity": lambda t: np.asarray(t, dtype=float),
    "one": lambda t: np.ones_like(np.asarray(t, dtype=float)),
    "zero": lambda t: np.zeros_like(np.asarray(t, dtype=float)),
}


def product_trapezoid_weights(n: int, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Weights of the product-trapezoid rule for ``int_0^{t_k} (t_k - s)^(gamma-1) v(s) ds``.

    Returns ``(conv, first)`` scaled by ``h^gamma / Gamma(gamma + 2)``:
    ``conv[m]`` multiplies ``v_{k-m}`` for ``k - m >= 1`` and ``first[k]``
    multiplies ``v_0``. Each panel integrates the kernel exactly against the
    linear interpolant of ``v``.
    """
    m = np.arange(n + 1, dtype=float)
    g1 = gamma + 1
    conv = np.empty(n + 1)
    conv[0] = 1.0
    if n >= 1:
        mm = m[1:]
        conv[1:] = (mm + 1) ** g1 - 2 * mm ** g1 + (mm - 1) ** g1
    first = np.zeros(n + 1)
    first[1:] = (m[1:] - 1) ** g1 - (m[1:] - 1 - gamma) * m[1:] ** gamma
    return conv, first


def riemann_liouville(spec: FractionalIntegralSpec, grid: TimeGrid, v=None) -> GridFunction:
    """``I^gamma v(t) = (1/Gamma(gamma)) int_0^t (t - s)^(gamma-1) v(s) ds`` on the grid.

    ``v`` may be a sample array on the grid nodes; otherwise the named
    base function is sampled.
    """
    if abs(grid.t_min) > 1e-12 * max(1.0, grid.t_max):
        raise DomainError("fractional integral needs a grid starting at 0")
    vals = spec.base()(grid.nodes) if v is None else np.asarray(v, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    N = grid.size
    if vals.shape[0] != N:
        raise DomainError("samples do not match the grid")
    conv, first = product_trapezoid_weights(N - 1, spec.gamma)
    out = np.empty_like(vals)
    for c in range(vals.shape[1]):
        col = vals[:, c]
        body = np.convolve(col, conv)[:N]
        # convolution counted v_0 with weight conv[k]; swap it for first[k]
        body = body + (first - conv) * col[0]
        body[0] = 0.0
        out[:, c] = body
    out *= grid.h ** spec.gamma / special.gamma(spec.gamma + 2)
    return GridFunction(grid, out)


@lru_cache(maxsize=65536)
def _rl_point(gamma: float, name: str, t: float) -> float:
    """Adaptive reference value of ``I^gamma v(t)`` with the algebraic weight handled exactly."""
    if t <= 0.0:
        return 0.0
    f = BASE_FUNCTIONS[name]
    val, _ = integrate.quad(lambda s: float(f(s)), 0.0, t, weight="alg", wvar=(0.0, gamma - 1.0),
                            limit=400, epsabs=1e-13, epsrel=1e-12)
    return val / special.gamma(gamma)


def riemann_liouville_reference(spec: FractionalIntegralSpec, t) -> np.ndarray:
    """Pointwise ``I^gamma v(t)`` by adaptive quadrature."""
    spec.base()
    return np.array([_rl_point(float(spec.gamma), spec.base_function, float(x))
                     for x in np.atleast_1d(t)])


# ------------------------------------------------------------------ scenarios


@dataclass
class Scenario:
    name: str
    flow: LinearFlow
    projection: np.ndarray
    perturbation: Perturbation
    interval: str
    analytic_facts: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    default_grid: tuple = (0.0, 10.0, 1e-2)
    notes: str = ""

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.projection, dtype=float))
        if p.shape != (self.flow.dim, self.flow.dim):
            raise DomainError("projection and flow dimensions differ")
        if self.perturbation.dim != self.flow.dim:
            raise DomainError("perturbation and flow dimensions differ")
        self.projection = p

    def grid(self, t_min=None, t_max=None, h=None) -> TimeGrid:
        d = self.default_grid
        return TimeGrid(d[0] if t_min is None else t_min, d[1] if t_max is None else t_max,
                        d[2] if h is None else h, self.interval)

    def projections(self, grid: TimeGrid) -> ProjectionFamily:
        return ProjectionFamily.constant(grid, self.projection)


def _exp_flow(rates, name, interval):
    rates = np.asarray(rates, dtype=float)
    n = len(rates)

    def func(t, s):
        t, s = np.broadcast_arrays(np.asarray(t, float), np.asarray(s, float))
        out = np.zeros(t.shape + (n, n))
        for k, r in enumerate(rates):
            out[..., k, k] = np.exp(r * (t - s))
        return out

    gen = np.diag(rates)
    return ClosedFormFlow(n, func, generator=lambda t: gen, name=name, interval=interval)


def build_scalar_decay(delta: float = 0.1, interval: str = FULL_LINE) -> Scenario:
    """``x' = -x`` perturbed by the constant ``delta``."""
    flow = _exp_flow([-1.0], "scalar_decay", interval)
    B = Perturbation.constant([[delta]])
    grid = (-10.0, 10.0, 1e-2) if interval == FULL_LINE else (0.0, 10.0, 1e-2)
    return Scenario("scalar_decay", flow, [[1.0]], B, interval,
                    analytic_facts={"K": 1.0, "alpha": 1.0, "eps": 0.0,
                                    "perturbed_alpha": 1.0 - delta},
                    params={"delta": delta, "interval": interval}, default_grid=grid)


def build_saddle(delta: float = 0.0) -> Scenario:
    """``diag(-1, +1)`` with ``P = diag(1, 0)``."""
    flow = _exp_flow([-1.0, 1.0], "saddle_2x2", FULL_LINE)
    B = Perturbation.constant(np.diag([delta, delta]))
    return Scenario("saddle_2x2", flow, np.diag([1.0, 0.0]), B, FULL_LINE,
                    analytic_facts={"K": 1.0, "alpha": 1.0, "eps": 0.0},
                    params={"delta": delta}, default_grid=(-10.0, 10.0, 1e-2))


def _sys_a(t):
    return -t + np.sin(t)


def _sys_b(t):
    return t - np.cos(t)


def example_sys_flow() -> ClosedFormFlow:
    def func(t, s):
        t, s = np.broadcast_arrays(np.asarray(t, float), np.asarray(s, float))
        out = np.zeros(t.shape + (2, 2))
        out[..., 0, 0] = np.exp(_sys_a(t) - _sys_a(s))
        out[..., 1, 1] = np.exp(_sys_b(t) - _sys_b(s))
        return out

    def gen(t):
        return np.diag([-1.0 + np.cos(t), 1.0 + np.sin(t)])

    return ClosedFormFlow(2, func, generator=gen, name="example_sys", interval=HALF_LINE_PLUS)


def example_sys_bound(eps: float, gamma: float, t) -> np.ndarray:
    """``c_gamma exp(-2 eps t) t^gamma`` with ``c_gamma = 1 / Gamma(gamma + 1)``."""
    t = np.asarray(t, dtype=float)
    return np.exp(-2 * eps * t) * np.abs(t) ** gamma / special.gamma(gamma + 1)


def build_example_sys(eps: float = 0.5, gamma: float = 0.5) -> Scenario:
    """Diagonal system perturbed by damped fractional integrals of ``sin`` and ``cos``.

    ``B(t) = exp(-2 eps t) diag(I^gamma sin(t), I^gamma cos(t))``, evaluated by
    adaptive quadrature with the singular weight integrated exactly.
    """
    if not eps > 0 or not gamma > 0:
        raise DomainError("example_sys needs eps > 0 and gamma > 0")
    eps, gamma = float(eps), float(gamma)

    def B(t):
        if t < 0:
            raise DomainError("example_sys is posed on the half line t >= 0")
        damp = math.exp(-2 * eps * t)
        return np.diag([damp * _rl_point(gamma, "sin", float(t)),
                        damp * _rl_point(gamma, "cos", float(t))])

    # the unperturbed dichotomy is uniform, so b(t) = ||B(t)||; beyond t >= gamma/eps
    # the envelope t^gamma exp(-2 eps t) decays at least at rate eps
    pert = Perturbation(B, 2, eps_weight=0.0, tail_rate=-eps, name="example_sys",
                        envelope=lambda t: float(example_sys_bound(eps, gamma, t)))
    return Scenario(
        "example_sys", example_sys_flow(), np.diag([1.0, 0.0]), pert, HALF_LINE_PLUS,
        analytic_facts={"K": math.e ** 2, "alpha": 1.0, "eps": 0.0,
                        "c_gamma": 1.0 / special.gamma(gamma + 1)},
        params={"eps": eps, "gamma": gamma}, default_grid=(0.0, 30.0, 2e-2),
    )


# ------------------------------------------------------------------- nonlocal


@dataclass(frozen=True)
class NonlocalKernel:
    beta_k: float = 0.75
    w: str = "capped_power"
    xi_truncation: float = 50.0
    xi_step: float = 2.5
    W0: float = 1.0
    w_scale: float = 0.1
    w_eps: float = 0.1
    tail_tol: float = 1.0
    fine: int = 400

    def __post_init__(self):
        if not 0.5 < self.beta_k < 1.0:
            raise DomainError("beta_k must lie in (1/2, 1)")
        if self.xi_truncation <= 0 or self.xi_step <= 0:
            raise DomainError("xi_truncation and xi_step must be positive")
        ratio = self.xi_truncation / self.xi_step
        if abs(ratio - round(ratio)) > 1e-9:
            raise DomainError("xi_step must divide xi_truncation")

    def J(self, xi):
        xi = np.asarray(xi, dtype=float)
        return np.sin(xi ** 2) * (1 + xi ** 2) ** (-self.beta_k)

    def weight(self, t):
        return W_PROFILES[self.w](self, t)


def _capped_power(k: NonlocalKernel, t):
    t = np.abs(np.asarray(t, dtype=float))
    with np.errstate(divide="ignore"):
        core = np.where(t > 0, t ** (-2 * k.beta_k), np.inf)
    return k.w_scale * np.minimum(k.W0, core) * np.exp(-2 * k.w_eps * t)


W_PROFILES = {
    "capped_power": _capped_power,
    "zero": lambda k, t: np.zeros_like(np.asarray(t, dtype=float)),
}


def kernel_tail_mass(beta_k: float, Xi: float) -> float:
    """``int_{|xi| > Xi} (1 + xi^2)^(-beta_k) dxi`` in closed form.

    Substituting ``u = 1 / (1 + xi^2)`` turns each half into
    ``B(x; beta_k - 1/2, 1/2) / 2`` with ``x = 1 / (1 + Xi^2)``.
    """
    if not beta_k > 0.5:
        raise DomainError("tail mass diverges for beta_k <= 1/2")
    x = 1.0 / (1.0 + Xi * Xi)
    a, b = beta_k - 0.5, 0.5
    return float(special.betainc(a, b, x) * special.beta(a, b))


def kernel_weights(kernel: NonlocalKernel) -> np.ndarray:
    """Product-integration weights ``omega_m = int J(xi) phi_m(xi) dxi``.

    ``phi_m`` is the hat function centred at ``m * xi_step`` on
    ``[-Xi, Xi]``; the fast oscillation of ``J`` is resolved by a fine Simpson
    sub-grid inside each panel. Returns weights for offsets
    ``-M .. M`` with ``M = Xi / xi_step``.
    """
    d = kernel.xi_step
    M = int(round(kernel.xi_truncation / d))
    sub = kernel.fine if kernel.fine % 2 == 0 else kernel.fine + 1
    u = np.linspace(0.0, 1.0, sub + 1)
    sw = np.full(sub + 1, 2.0)
    sw[1::2] = 4.0
    sw[0] = sw[-1] = 1.0
    sw *= d / (3 * sub)
    om = np.zeros(2 * M + 1)
    for p in range(-M, M):
        xi = (p + u) * d
        jv = kernel.J(xi)
        om[p + M] += np.dot(sw, jv * (1 - u))
        om[p + M + 1] += np.dot(sw, jv * u)
    return om


def build_nonlocal_ide(beta_k: float = 0.75, kernel: Optional[NonlocalKernel] = None,
                       a: float = -1.0, window: float = 20.0) -> Scenario:
    """Spatial-grid surrogate of the nonlocal equation.

    The state is ``u(z)`` on ``z in [-window, window]`` sampled with the
    kernel step; ``(B(t) u)_m = w(t) sum_k omega_{k-m} u_k`` discretizes
    ``w(t) int J(xi) u(z_m + xi) dxi`` with offsets falling outside the window
    dropped. The base flow is ``exp(a (t - s)) Id``.
    """
    kernel = kernel or NonlocalKernel(beta_k=beta_k)
    if kernel.beta_k != beta_k:
        kernel = NonlocalKernel(**{**kernel.__dict__, "beta_k": beta_k})
    tail = kernel_tail_mass(kernel.beta_k, kernel.xi_truncation)
    if tail > kernel.tail_tol:
        raise TruncationError(
            f"kernel mass beyond {kernel.xi_truncation} is {tail:.3g} > {kernel.tail_tol:g}"
        )
    d = kernel.xi_step
    om = kernel_weights(kernel)
    M = (len(om) - 1) // 2
    L = int(round(window / d))
    n = 2 * L + 1
    T = np.zeros((n, n))
    for m in range(n):
        for k in range(n):
            off = k - m
            if -M <= off <= M:
                T[m, k] = om[off + M]
    t_norm = float(op_norm(T))
    # ||B(t)|| is reported as a bound for the untruncated operator: discrete mass
    # plus the kernel mass dropped beyond the truncation
    mass = float(np.abs(om).sum()) + tail

    def B(t):
        return float(kernel.weight(t)) * T

    def norm(t):
        return abs(float(kernel.weight(t))) * mass

    pert = Perturbation(B, n, eps_weight=kernel.w_eps, tail_rate=-kernel.w_eps, norm=norm,
                        name="nonlocal_ide")
    rate = float(a)
    flow = _exp_flow([rate] * n, "nonlocal_ide", FULL_LINE)
    proj = np.eye(n) if rate < 0 else np.zeros((n, n))
    return Scenario(
        "nonlocal_ide", flow, proj, pert, FULL_LINE,
        analytic_facts={"K": 1.0, "alpha": abs(rate), "eps": 0.0, "dim": n,
                        "kernel_tail_mass": tail, "kernel_discrete_l1": float(np.abs(om).sum()),
                        "kernel_mass_bound": mass, "toeplitz_norm": t_norm,
                        "model_reduction": f"C_b(R) replaced by {n} samples on "
                                           f"[-{window:g}, {window:g}] with step {d:g}"},
        params={"beta_k": kernel.beta_k, "a": rate, "window": window,
                "kernel": dict(kernel.__dict__)},
        default_grid=(-20.0, 20.0, 5e-2),
        notes="finite spatial-window surrogate of an infinite-dimensional state space",
    )


# -------------------------------------------------------------------- catalog

BUILDERS = {
    "scalar_decay": build_scalar_decay,
    "saddle_2x2": build_saddle,
    "example_sys": build_example_sys,
    "nonlocal_ide": build_nonlocal_ide,
}


def build(name: str, params: Optional[dict] = None) -> Scenario:
    try:
        builder = BUILDERS[name]
    except KeyError:
        raise DomainError(f"unknown scenario {name!r}; known: {sorted(BUILDERS)}") from None
    params = dict(params or {})
    if name == "nonlocal_ide" and isinstance(params.get("kernel"), dict):
        params["kernel"] = NonlocalKernel(**{"beta_k": params.get("beta_k", 0.75),
                                             **params["kernel"]})
    try:
        return builder(**params)
    except TypeError as exc:
        raise DomainError(f"bad parameters for {name}: {exc}") from None


def catalog() -> list[Scenario]:
    """Built-in scenarios with their default parameters, sorted by name."""
    return [
        build_example_sys(0.5, 0.5),
        build_nonlocal_ide(0.75),
        build_saddle(),
        build_scalar_decay(),
    ]
