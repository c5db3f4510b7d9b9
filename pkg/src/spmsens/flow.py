"""Characteristic flow x' = b(h, x) with its variational derivatives.

The coupled system integrated by classical RK4 is

    X'    = b(h, X)                    X(0)    = x0
    X_x'  = b_x(h, X) X_x              X_x(0)  = 1
    X_h'  = b_h(h, X) + b_x(h, X) X_h  X_h(0)  = 0

All routines are vectorised over the initial positions.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .dsl import ModelFunctions, ModelTriple


class FlowError(ArithmeticError):
    """The state became non-finite (blow-up)."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


def default_steps(s: float) -> int:
    return max(16, int(math.ceil(64 * abs(s))))


@dataclass
class FlowResult:
    X: np.ndarray
    dX_dx: np.ndarray
    dX_dh: np.ndarray
    s: float
    x0: np.ndarray
    h: float

    def item(self) -> "FlowResult":
        """Scalar view when a single initial position was integrated."""
        f = lambda v: float(np.asarray(v).reshape(-1)[0])
        return FlowResult(f(self.X), f(self.dX_dx), f(self.dX_dh), self.s, f(self.x0), self.h)


def _check(state, step):
    for v in state:
        if not np.all(np.isfinite(v)):
            raise FlowError(f"flow state became non-finite at step {step}", step)


def integrate_flow(m: ModelTriple, h: float, x0, s: float, steps: Optional[int] = None,
                   funcs: Optional[ModelFunctions] = None) -> FlowResult:
    """RK4 integration of the flow and its x- and h-derivatives up to time ``s``."""
    if s < 0:
        raise ValueError("flow time must be nonnegative")
    steps = default_steps(s) if steps is None else int(steps)
    if steps < 1:
        raise ValueError("steps must be positive")
    fn = funcs or m.funcs()
    x0 = np.asarray(x0, dtype=float)
    X = x0.astype(float).copy()
    Xx = np.ones_like(X)
    Xh = np.zeros_like(X)
    if s == 0:
        return FlowResult(X, Xx, Xh, 0.0, x0, h)
    dt = s / steps

    def rhs(X, Xx, Xh):
        bx = fn.b_x(h, X)
        return fn.b(h, X), bx * Xx, fn.b_h(h, X) + bx * Xh

    for n in range(steps):
        # overflow shows up as a non-finite state and is reported by _check
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = rhs(X, Xx, Xh)
            k2 = rhs(*(v + 0.5 * dt * k for v, k in zip((X, Xx, Xh), k1)))
            k3 = rhs(*(v + 0.5 * dt * k for v, k in zip((X, Xx, Xh), k2)))
            k4 = rhs(*(v + dt * k for v, k in zip((X, Xx, Xh), k3)))
            X, Xx, Xh = (v + dt / 6 * (a + 2 * b + 2 * c + d)
                         for v, a, b, c, d in zip((X, Xx, Xh), k1, k2, k3, k4))
        _check((X, Xx, Xh), n + 1)
    return FlowResult(X, Xx, Xh, s, x0, h)


def rk4_positions(b: Callable, x0, s: float, steps: Optional[int] = None) -> np.ndarray:
    """Positions X(s, x0) for a vector field b(x) of x alone."""
    steps = default_steps(s) if steps is None else int(steps)
    X = np.asarray(x0, dtype=float).copy()
    if s == 0:
        return X
    dt = s / steps
    for n in range(steps):
        k1 = b(X)
        k2 = b(X + 0.5 * dt * k1)
        k3 = b(X + 0.5 * dt * k2)
        k4 = b(X + dt * k3)
        X = X + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check((X,), n + 1)
    return X


def flow_path(b: Callable, x0, s: float, n: int, substeps: int = 1) -> np.ndarray:
    """Positions on the uniform time grid s_j = j s / n, shape (n + 1, len(x0)).

    Each grid interval is covered by ``substeps`` RK4 steps.
    """
    X = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    out = np.empty((n + 1,) + X.shape)
    out[0] = X
    if n == 0:
        return out
    dt = s / (n * substeps)
    step = 0
    for j in range(n):
        for _ in range(substeps):
            k1 = b(X)
            k2 = b(X + 0.5 * dt * k1)
            k3 = b(X + 0.5 * dt * k2)
            k4 = b(X + dt * k3)
            X = X + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            step += 1
            _check((X,), step)
        out[j + 1] = X
    return out


def backward_flow(b: Callable, x, s: float, steps: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Follow characteristics backwards for time ``s``.

    Returns ``(position, crossing)``: ``crossing`` is NaN for characteristics
    that stay in (0, inf); otherwise it is the backward time at which the
    characteristic reached 0, and the position is clamped to 0.  Such points
    carry mass born at the boundary after the start time.
    """
    steps = default_steps(s) if steps is None else int(steps)
    X = np.atleast_1d(np.asarray(x, dtype=float)).copy()
    crossing = np.full(X.shape, np.nan)
    if s == 0:
        return X, crossing
    dt = s / steps
    neg = lambda y: -b(np.maximum(y, 0.0))
    for n in range(steps):
        live = np.isnan(crossing)
        if not live.any():
            break
        Y = X[live]
        k1 = neg(Y)
        k2 = neg(Y + 0.5 * dt * k1)
        k3 = neg(Y + 0.5 * dt * k2)
        k4 = neg(Y + dt * k3)
        Ynew = Y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check((Ynew,), n + 1)
        hit = Ynew <= 0
        if hit.any():
            # linear interpolation of the crossing inside the step
            frac = Y[hit] / np.maximum(Y[hit] - Ynew[hit], 1e-300)
            idx = np.flatnonzero(live)[hit]
            crossing[idx] = (n + frac) * dt
            Ynew[hit] = 0.0
        X[live] = Ynew
    return X, crossing


# --------------------------------------------------------------------------
# Regularity report

RATIO_NAMES = (
    "lip_h",           # |X(h1) - X(h2)| / |h1 - h2|
    "lip_y",           # |X(y1) - X(y2)| / |y1 - y2|
    "holder_h_dXdh",   # |dX/dh(h1) - dX/dh(h2)| / |h1 - h2|^alpha
    "holder_h_dXdy",   # |dX/dy(h1) - dX/dy(h2)| / |h1 - h2|^alpha
    "holder_y_dXdy",   # |dX/dy(y1) - dX/dy(y2)| / |y1 - y2|^alpha
    "holder_y_dXdh",   # |dX/dh(y1) - dX/dh(y2)| / |y1 - y2|^alpha
)


@dataclass
class RegularityReport:
    alpha: float
    samples: List[int]
    ratios: Dict[str, List[float]]
    passed: bool
    notes: List[str] = field(default_factory=list)

    def max_ratio(self, name: str) -> float:
        return self.ratios[name][-1]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["samples"] + list(RATIO_NAMES))
            for i, n in enumerate(self.samples):
                w.writerow([n] + [repr(float(self.ratios[k][i])) for k in RATIO_NAMES])


def _sample_ratios(m: ModelTriple, fn: ModelFunctions, T: float, n: int, alpha: float,
                   rng: np.random.Generator) -> Dict[str, float]:
    lo, hi = m.h_range
    x_hi = m.x_max
    h1 = rng.uniform(lo, hi, n)
    h2 = rng.uniform(lo, hi, n)
    y1 = rng.uniform(0, x_hi, n)
    y2 = rng.uniform(0, x_hi, n)
    s = rng.uniform(0, T, n)
    steps = default_steps(T)

    X11, Xx11, Xh11 = _flow_to_times(fn, h1, y1, s, steps)
    X21, Xx21, Xh21 = _flow_to_times(fn, h2, y1, s, steps)
    X12, Xx12, Xh12 = _flow_to_times(fn, h1, y2, s, steps)
    dh = np.abs(h1 - h2)
    dy = np.abs(y1 - y2)
    ok_h = dh > 1e-12
    ok_y = dy > 1e-12

    def mx(num, den, ok):
        if not ok.any():
            return 0.0
        return float(np.max(num[ok] / den[ok]))

    return {
        "lip_h": mx(np.abs(X11 - X21), dh, ok_h),
        "lip_y": mx(np.abs(X11 - X12), dy, ok_y),
        "holder_h_dXdh": mx(np.abs(Xh11 - Xh21), dh ** alpha, ok_h),
        "holder_h_dXdy": mx(np.abs(Xx11 - Xx21), dh ** alpha, ok_h),
        "holder_y_dXdy": mx(np.abs(Xx11 - Xx12), dy ** alpha, ok_y),
        "holder_y_dXdh": mx(np.abs(Xh11 - Xh12), dy ** alpha, ok_y),
    }


def _flow_to_times(fn: ModelFunctions, h, y: np.ndarray, s: np.ndarray, steps: int):
    """Variational flow with per-sample parameter and end time (per-sample step size)."""
    X = y.copy()
    Xx = np.ones_like(X)
    Xh = np.zeros_like(X)
    dt = s / steps

    def rhs(X, Xx, Xh):
        bx = fn.b_x(h, X)
        return fn.b(h, X), bx * Xx, fn.b_h(h, X) + bx * Xh

    for n in range(steps):
        # overflow shows up as a non-finite state and is reported by _check
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = rhs(X, Xx, Xh)
            k2 = rhs(*(v + 0.5 * dt * k for v, k in zip((X, Xx, Xh), k1)))
            k3 = rhs(*(v + 0.5 * dt * k for v, k in zip((X, Xx, Xh), k2)))
            k4 = rhs(*(v + dt * k for v, k in zip((X, Xx, Xh), k3)))
            X, Xx, Xh = (v + dt / 6 * (a + 2 * b + 2 * c + d)
                         for v, a, b, c, d in zip((X, Xx, Xh), k1, k2, k3, k4))
        _check((X, Xx, Xh), n + 1)
    return X, Xx, Xh


def check_flow_regularity(m: ModelTriple, T: float, samples: int = 256, alpha: float = 0.75,
                          seed: int = 0, doublings: int = 3) -> RegularityReport:
    """Empirical constants of the six Lipschitz/Holder bounds of the flow.

    The sample set is doubled ``doublings - 1`` times.  The report fails if a
    ratio is non-finite or more than doubles at two consecutive doublings
    (unbounded growth under refinement).
    """
    rng = np.random.default_rng(seed)
    fn = m.funcs()
    counts = [samples * 2 ** i for i in range(doublings)]
    ratios = {k: [] for k in RATIO_NAMES}
    notes = []
    passed = True
    try:
        for n in counts:
            r = _sample_ratios(m, fn, T, n, alpha, rng)
            for k in RATIO_NAMES:
                ratios[k].append(r[k])
    except FlowError as exc:
        return RegularityReport(alpha, counts, ratios, False, [f"flow blow-up: {exc}"])
    for k in RATIO_NAMES:
        v = ratios[k]
        if not all(math.isfinite(x) for x in v):
            passed = False
            notes.append(f"{k}: non-finite ratio")
            continue
        growth = [v[i + 1] > 2 * v[i] and v[i] > 1e-12 for i in range(len(v) - 1)]
        if any(growth[i] and growth[i + 1] for i in range(len(growth) - 1)):
            passed = False
            notes.append(f"{k}: ratio more than doubles under repeated sample doubling")
    return RegularityReport(alpha, counts, ratios, passed, notes)


@dataclass
class FlowPath:
    """Flow sampled on a uniform time grid; arrays have shape (n + 1, len(x0))."""

    u: np.ndarray
    X: np.ndarray
    X_h: Optional[np.ndarray] = None


def variational_path(fn: ModelFunctions, h: float, x0, s: float, n: int, with_h: bool = True,
                     substeps: int = 1) -> FlowPath:
    """X(u, x0) and optionally dX/dh(u, x0) on the grid u_j = j s / n (RK4)."""
    X = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    Xh = np.zeros_like(X)
    outX = np.empty((n + 1,) + X.shape)
    outH = np.empty((n + 1,) + X.shape) if with_h else None
    outX[0] = X
    if with_h:
        outH[0] = Xh
    u = np.linspace(0.0, s, n + 1)
    if n == 0 or s == 0:
        outX[:] = X
        if with_h:
            outH[:] = 0.0
        return FlowPath(u, outX, outH)
    dt = s / (n * substeps)
    step = 0
    for j in range(n):
        for _ in range(substeps):
            if with_h:
                def rhs(X, Xh):
                    return fn.b(h, X), fn.b_h(h, X) + fn.b_x(h, X) * Xh
                k1 = rhs(X, Xh)
                k2 = rhs(X + 0.5 * dt * k1[0], Xh + 0.5 * dt * k1[1])
                k3 = rhs(X + 0.5 * dt * k2[0], Xh + 0.5 * dt * k2[1])
                k4 = rhs(X + dt * k3[0], Xh + dt * k3[1])
                X = X + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
                Xh = Xh + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            else:
                k1 = fn.b(h, X)
                k2 = fn.b(h, X + 0.5 * dt * k1)
                k3 = fn.b(h, X + 0.5 * dt * k2)
                k4 = fn.b(h, X + dt * k3)
                X = X + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            step += 1
            _check((X, Xh), step)
        outX[j + 1] = X
        if with_h:
            outH[j + 1] = Xh
    return FlowPath(u, outX, outH)
