"""Dual (backward) problem of the linear model.

For a test function xi and horizon t the dual solution satisfies

    phi(s, x) = p(s, x) + int_0^{t-s} q(u, x) phi(s + u, 0) du,

    p(s, x) = xi(X(t-s, x)) exp(int_0^{t-s} c(X(u, x)) du),
    q(u, x) = a(X(u, x)) exp(int_0^u c(X(v, x)) dv),

with X the characteristic flow of b.  Restricted to x = 0 this is a scalar
Volterra equation for the boundary trace phi(., 0), solved by marching
backwards from s = t with the trapezoidal rule; off-boundary values then
follow by quadrature.  Pairing phi(0, .) with the initial measure gives the
solution functional:  int xi d mu_t = int phi(0, x) d mu_0(x).
"""
from __future__ import annotations

import csv
import inspect
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .dsl import ModelFunctions, ModelTriple
from .flow import variational_path

DEFAULT_N_PER_UNIT = 1024


class VolterraError(ValueError):
    pass


def default_n(t: float, per_unit: int = DEFAULT_N_PER_UNIT) -> int:
    return max(2, int(math.ceil(per_unit * t)))


def _cumtrapz(y: np.ndarray, dx: float) -> np.ndarray:
    """Cumulative trapezoidal integral along axis 0, starting at 0."""
    out = np.zeros_like(y)
    if len(y) > 1:
        out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]), axis=0) * dx
    return out


def _takes_h(xi: Callable) -> bool:
    try:
        params = [p for p in inspect.signature(xi).parameters.values()
                  if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)]
    except (TypeError, ValueError):
        return False
    return len(params) == 2 and params[0].name == "h"


def _xi_values(xi, h, x):
    return np.asarray(xi(h, x) if _takes_h(xi) else xi(x), dtype=float)


def _xi_derivative(xi, h, x, step=1e-6):
    d = getattr(xi, "derivative", None)
    if d is not None:
        return np.asarray(d(x), dtype=float)
    return (_xi_values(xi, h, x + step) - _xi_values(xi, h, x - step)) / (2 * step)


@dataclass
class _PathData:
    """Quantities along characteristics from x over u in [0, tau] (n intervals)."""

    du: float
    X: np.ndarray        # (n+1, m)
    E: np.ndarray        # exp(int_0^u c)
    q: np.ndarray        # a(X) E
    p_end: np.ndarray    # xi(X(tau)) E(tau)
    X_h: Optional[np.ndarray] = None
    C_h: Optional[np.ndarray] = None
    q_h: Optional[np.ndarray] = None
    p_h_end: Optional[np.ndarray] = None


def _path(fn: ModelFunctions, xi, h: float, x, tau: float, n: int, with_h: bool = False) -> _PathData:
    path = variational_path(fn, h, x, tau, n, with_h=with_h)
    X = path.X
    du = tau / n if n else 0.0
    cvals = fn.c(h, X)
    C = _cumtrapz(cvals, du)
    E = np.exp(C)
    q = fn.a(h, X) * E
    xi_end = _xi_values(xi, h, X[-1])
    p_end = xi_end * E[-1]
    out = _PathData(du, X, E, q, p_end)
    if with_h:
        Xh = path.X_h
        C_h = _cumtrapz(fn.c_h(h, X) + fn.c_x(h, X) * Xh, du)
        out.X_h = Xh
        out.C_h = C_h
        out.q_h = (fn.a_h(h, X) + fn.a_x(h, X) * Xh) * E + q * C_h
        dxi = _xi_derivative(xi, h, X[-1])
        if _takes_h(xi):
            eps = 1e-6
            dxi_h = (_xi_values(xi, h + eps, X[-1]) - _xi_values(xi, h - eps, X[-1])) / (2 * eps)
        else:
            dxi_h = 0.0
        out.p_h_end = (dxi * Xh[-1] + dxi_h) * E[-1] + p_end * C_h[-1]
    return out


@dataclass
class VolterraData:
    """Kernel data on the uniform s-grid s_j = j t / N (boundary x = 0)."""

    t: float
    h: float
    N: int
    p0: np.ndarray   # p(s_j, 0)
    q0: np.ndarray   # q(u_k, 0)
    model: Optional[ModelTriple] = None
    xi: Optional[Callable] = None
    funcs: Optional[ModelFunctions] = None

    @classmethod
    def from_arrays(cls, t: float, p0, q0, h: float = 0.0) -> "VolterraData":
        """Boundary data given directly as grid samples (no model attached)."""
        p0 = np.asarray(p0, dtype=float)
        q0 = np.asarray(q0, dtype=float)
        if p0.shape != q0.shape or p0.ndim != 1:
            raise ValueError("p0 and q0 must be 1-D arrays of equal length")
        return cls(t, h, len(p0) - 1, p0, q0)

    @property
    def ds(self) -> float:
        return self.t / self.N

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.t, self.N + 1)

    def p(self, s: float, x) -> np.ndarray:
        tau = self.t - s
        n = max(1, int(math.ceil(tau / self.ds - 1e-9))) if tau > 0 else 0
        return _path(self.funcs, self.xi, self.h, x, tau, n).p_end

    def q(self, u: float, x) -> np.ndarray:
        n = max(1, int(math.ceil(u / self.ds - 1e-9))) if u > 0 else 0
        return _path(self.funcs, self.xi, self.h, x, u, n).q[-1]


def build_pq(m: ModelTriple, xi: Callable, h: float, t: float, N: Optional[int] = None,
             funcs: Optional[ModelFunctions] = None) -> VolterraData:
    """Boundary kernels p(., 0) and q(., 0) on the solver grid.

    The flow from 0 is sampled on the same grid, and the exponents
    int c dX are integrated with the trapezoidal rule on that grid.
    """
    if t < 0:
        raise ValueError("horizon must be nonnegative")
    N = default_n(t) if N is None else int(N)
    if N < 2:
        raise VolterraError("grid needs N >= 2")
    fn = funcs or m.funcs()
    pd = _path(fn, xi, h, np.array([0.0]), t, N)
    q0 = pd.q[:, 0]
    # p(s_j, 0) = xi(X(t - s_j, 0)) E(t - s_j): read the path backwards
    xi_vals = _xi_values(xi, h, pd.X[:, 0])
    p0 = (xi_vals * pd.E[:, 0])[::-1].copy()
    if not (np.all(np.isfinite(p0)) and np.all(np.isfinite(q0))):
        raise VolterraError("p or q is not finite on the grid")
    return VolterraData(t, h, N, p0, q0, m, xi, fn)


def _march(p: np.ndarray, q: np.ndarray, ds: float) -> np.ndarray:
    """Solve phi_j = p_j + ds * trapz_k q_k phi_{j+k} backwards from j = N."""
    N = len(p) - 1
    diag = 1.0 - 0.5 * ds * q[0]
    if diag <= 0:
        raise VolterraError(
            f"diagonal coefficient 1 - ds q(0)/2 = {diag:.3g} <= 0; refine the grid "
            f"(need N > {0.5 * q[0] * ds * N:.3g})")
    phi = np.empty(N + 1)
    phi[N] = p[N]
    for j in range(N - 1, -1, -1):
        n = N - j
        # k = 1..n-1 full weight, k = n half weight
        acc = 0.5 * q[n] * phi[N]
        if n > 1:
            acc += np.dot(q[1:n], phi[j + 1:N])
        phi[j] = (p[j] + ds * acc) / diag
    return phi


def _residual(phi, p, q, ds):
    N = len(p) - 1
    r = np.empty(N + 1)
    for j in range(N + 1):
        n = N - j
        if n == 0:
            r[j] = phi[j] - p[j]
            continue
        acc = 0.5 * q[0] * phi[j] + 0.5 * q[n] * phi[N]
        if n > 1:
            acc += np.dot(q[1:n], phi[j + 1:N])
        r[j] = phi[j] - p[j] - ds * acc
    return r


@dataclass
class DualSolution:
    data: VolterraData
    boundary_trace: np.ndarray

    @property
    def t(self):
        return self.data.t

    @property
    def h(self):
        return self.data.h

    @property
    def grid(self):
        return self.data.grid

    def residual(self) -> np.ndarray:
        return _residual(self.boundary_trace, self.data.p0, self.data.q0, self.data.ds)

    def sup_bound(self) -> float:
        """||p||_inf exp(2 ||q||_inf t) on the grid."""
        return float(np.max(np.abs(self.data.p0)) * math.exp(2 * np.max(np.abs(self.data.q0)) * self.t))

    def trace_at(self, s) -> np.ndarray:
        return np.interp(s, self.grid, self.boundary_trace)

    def __call__(self, s: float, x) -> np.ndarray:
        return evaluate_dual(self, s, x)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "phi0"])
            for s, v in zip(self.grid, self.boundary_trace):
                w.writerow([repr(float(s)), repr(float(v))])


def solve_boundary_trace(d: VolterraData, h: Optional[float] = None) -> DualSolution:
    if h is not None and h != d.h:
        raise ValueError("VolterraData was built for a different h")
    if d.N < 2:
        raise VolterraError("grid needs N >= 2")
    return DualSolution(d, _march(d.p0, d.q0, d.ds))


def solve_dual(m: ModelTriple, xi: Callable, h: float, t: float, N: Optional[int] = None,
               funcs: Optional[ModelFunctions] = None) -> DualSolution:
    return solve_boundary_trace(build_pq(m, xi, h, t, N, funcs))


def _local_grid(sol_t: float, ds: float, s: float):
    tau = sol_t - s
    n = max(1, int(math.ceil(tau / ds - 1e-9)))
    return tau, n


def evaluate_dual(sol: DualSolution, s: float, x) -> np.ndarray:
    """phi(s, x) = p(s, x) + trapezoidal int_0^{t-s} q(u, x) phi(s+u, 0) du."""
    t = sol.t
    if s < -1e-12 or s > t + 1e-12:
        raise ValueError(f"s = {s} outside [0, {t}]")
    s = min(max(s, 0.0), t)
    x = np.asarray(x, dtype=float)
    xs = np.atleast_1d(x).ravel()
    if t - s <= 0:
        out = _xi_values(sol.data.xi, sol.h, xs)
        return out.reshape(x.shape) if x.ndim else float(out[0])
    tau, n = _local_grid(t, sol.data.ds, s)
    pd = _path(sol.data.funcs, sol.data.xi, sol.h, xs, tau, n)
    phi_b = sol.trace_at(s + np.linspace(0.0, tau, n + 1))
    w = np.full(n + 1, pd.du)
    w[0] *= 0.5
    w[-1] *= 0.5
    out = pd.p_end + (w * phi_b) @ pd.q
    return out.reshape(x.shape) if x.ndim else float(out[0])


# --------------------------------------------------------------------------
# h-derivative of the dual solution

@dataclass
class DhDualResult:
    """Solution f_h of the differentiated implicit equation.

    ``trace`` holds f_h(s_j, 0); ``x``/``values`` hold f_h(0, x) at the
    requested points.  ``quotient_*`` are the centred difference quotients
    (phi^{h+dh} - phi^{h-dh}) / (2 dh) used as a cross-check.
    """

    grid: np.ndarray
    trace: np.ndarray
    x: np.ndarray
    values: np.ndarray
    quotient_trace: np.ndarray
    quotient_values: np.ndarray

    @property
    def max_deviation(self) -> float:
        a = np.max(np.abs(self.trace - self.quotient_trace))
        b = np.max(np.abs(self.values - self.quotient_values)) if len(self.values) else 0.0
        return float(max(a, b))


def dh_dual(m: ModelTriple, xi: Callable, h: float, t: float, dh: float = 1e-3,
            x=None, N: Optional[int] = None, funcs: Optional[ModelFunctions] = None) -> DhDualResult:
    """h-derivative of phi by solving the differentiated Volterra equation

        f_h(s, x) = pbar(s, x) + int_0^{t-s} q(u, x) f_h(s+u, 0) du,
        pbar(s, x) = p_h(s, x) + int_0^{t-s} q_h(u, x) phi(s+u, 0) du,

    with p_h, q_h obtained by differentiating p, q along the variational flow.
    """
    fn = funcs or m.funcs()
    N = default_n(t) if N is None else int(N)
    base = solve_dual(m, xi, h, t, N, fn)
    ds = t / N
    pd = _path(fn, xi, h, np.array([0.0]), t, N, with_h=True)
    q0, qh0 = pd.q[:, 0], pd.q_h[:, 0]
    phi = base.boundary_trace
    # p_h(s_j, 0) needs the path evaluated at tau = t - s_j, i.e. index N - j
    xi_vals = _xi_values(xi, h, pd.X[:, 0])
    dxi = _xi_derivative(xi, h, pd.X[:, 0])
    if _takes_h(xi):
        eps = 1e-6
        dxi_h = (_xi_values(xi, h + eps, pd.X[:, 0]) - _xi_values(xi, h - eps, pd.X[:, 0])) / (2 * eps)
    else:
        dxi_h = 0.0
    E = pd.E[:, 0]
    ph_tau = (dxi * pd.X_h[:, 0] + dxi_h) * E + xi_vals * E * pd.C_h[:, 0]
    ph = ph_tau[::-1]
    pbar = np.empty(N + 1)
    for j in range(N + 1):
        n = N - j
        if n == 0:
            pbar[j] = ph[j]
            continue
        acc = 0.5 * qh0[0] * phi[j] + 0.5 * qh0[n] * phi[N]
        if n > 1:
            acc += np.dot(qh0[1:n], phi[j + 1:N])
        pbar[j] = ph[j] + ds * acc
    trace = _march(pbar, q0, ds)

    xs = np.atleast_1d(np.asarray([] if x is None else x, dtype=float)).ravel()
    values = np.empty(0)
    if len(xs):
        px = _path(fn, xi, h, xs, t, N, with_h=True)
        w = np.full(N + 1, ds)
        w[0] *= 0.5
        w[-1] *= 0.5
        values = px.p_h_end + (w * phi) @ px.q_h + (w * trace) @ px.q

    plus = solve_dual(m, xi, h + dh, t, N, fn)
    minus = solve_dual(m, xi, h - dh, t, N, fn)
    qt = (plus.boundary_trace - minus.boundary_trace) / (2 * dh)
    qv = np.empty(0)
    if len(xs):
        qv = (evaluate_dual(plus, 0.0, xs) - evaluate_dual(minus, 0.0, xs)) / (2 * dh)
    return DhDualResult(base.grid, trace, xs, np.asarray(values), qt, np.asarray(qv))


def kicked_continuity_check(m: ModelTriple, xi: Callable, h: float, t_small: float, x=None,
                            N: Optional[int] = None, fd_step: float = 1e-4) -> float:
    """max_x |phi(0, x) - xi(x)| + |d/dx phi(0, x) - xi'(x)| for a short horizon."""
    if t_small == 0:
        return 0.0
    if not (0 < t_small <= 1):
        raise ValueError("t_small must lie in (0, 1]")
    xs = np.linspace(0.0, min(m.x_max, 5.0), 65) if x is None else np.asarray(x, dtype=float)
    sol = solve_dual(m, xi, h, t_small, N)
    phi = evaluate_dual(sol, 0.0, xs)
    lo = np.maximum(xs - fd_step, 0.0)
    hi = xs + fd_step
    dphi = (evaluate_dual(sol, 0.0, hi) - evaluate_dual(sol, 0.0, lo)) / (hi - lo)
    dxi = (_xi_values(xi, h, hi) - _xi_values(xi, h, lo)) / (hi - lo)
    return float(np.max(np.abs(phi - _xi_values(xi, h, xs)) + np.abs(dphi - dxi)))
