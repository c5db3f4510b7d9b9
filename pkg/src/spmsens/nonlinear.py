"""The nonlinear model with kernel nonlinearities, solved by dyadic freezing.

On level k the horizon [0, T] is cut into 2^k intervals.  At every mesh node
the coefficients a, b, c are frozen at the current measure, and the resulting
linear problem is advanced to the next node with the particle scheme of
:mod:`spmsens.linear` (inner step ``min(T / 2^k, 2^-10 T)``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dsl import (Coefficients, KernelNonlinearity, NonlinearModel, ValidationGrid,
                  _eval_grid, _extreme_f, kernel_integral, tv_cutoff_factor, validate_model)
from .linear import MeasureTrajectory, ModelValidationError, SolverError, particle_steps
from .measures import DiscreteMeasure, canonicalize, flat_distance

INNER_STEPS_LOG2 = 10


@dataclass
class NonlinearProblem:
    """Nonlinear problem with perturbation parameter ``h``.

    ``cutoff`` is ``None`` (off), a nonnegative TV threshold, or ``"auto"``
    for ``|mu0|_TV exp((|a|_inf + |c|_inf) 2T)`` with the sup norms taken
    over the validation grid.
    """

    model: NonlinearModel
    h: float
    mu0: DiscreteMeasure
    T: float
    cutoff: Union[None, float, str] = None
    validate: bool = True
    threshold: Optional[float] = field(default=None, init=False)

    def __post_init__(self):
        if self.T < 0:
            raise ValueError("horizon must be nonnegative")
        if not self.mu0.is_nonnegative():
            raise ValueError("initial measure must be nonnegative")
        lo, hi = self.model.h_range
        if not (lo <= self.h <= hi):
            raise ValueError(f"h = {self.h} outside h_range {self.model.h_range}")
        if self.validate:
            rep = validate_model(self.model, ValidationGrid(self.model.x_max, self.model.h_range))
            if not rep.passed:
                raise ModelValidationError(
                    "model fails validation: " + "; ".join(c.name for c in rep.failures()), rep)
            b0 = eval_nonlinearity(self.model.b, self.h, 0.0, self.mu0)
            if not b0 > 0:
                raise ModelValidationError(f"b^h(0, mu0) = {b0} is not positive")
        if self.cutoff == "auto":
            self.threshold = auto_threshold(self.model, self.mu0, self.T)
        elif self.cutoff is not None:
            self.threshold = float(self.cutoff)
            if self.threshold < 0:
                raise ValueError("cutoff threshold must be nonnegative")

    def with_h(self, h: float) -> "NonlinearProblem":
        lo, hi = self.model.h_range
        if not (lo <= h <= hi):
            raise ValueError(f"h = {h} outside h_range {self.model.h_range}")
        q = NonlinearProblem(self.model, h, self.mu0, self.T, None, validate=False)
        q.cutoff, q.threshold = self.cutoff, self.threshold
        return q


def auto_threshold(model: NonlinearModel, mu0: DiscreteMeasure, T: float) -> float:
    grid = ValidationGrid(model.x_max, model.h_range)
    xs = np.linspace(0.0, grid.x_max, grid.nx)
    hs = np.linspace(grid.h_range[0], grid.h_range[1], grid.nh)
    sup = 0.0
    for f in (model.a, model.c):
        lo = _extreme_f(f, xs, grid, hs, want_min=True)
        hi = _extreme_f(f, xs, grid, hs, want_min=False)
        sup += float(max(np.abs(lo).max(), np.abs(hi).max()))
    return mu0.tv_norm() * math.exp(sup * 2.0 * T)


def _kernel_value(kern, x, mu: DiscreteMeasure):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = kernel_integral(kern.K, x, mu.positions, mu.weights)
    return _eval_grid(kern.F, x=x, y=y)


def eval_nonlinearity(f: KernelNonlinearity, h: float, x, mu: DiscreteMeasure,
                      threshold: Optional[float] = None):
    """f^h(x, mu) = F0(x, sum w K0(x, y)) + h FP(x, sum w KP(x, y)), optionally TV-damped."""
    scalar = np.ndim(x) == 0
    v = _kernel_value(f.base, x, mu)
    if h != 0.0:
        v = v + h * _kernel_value(f.pert, x, mu)
    if threshold is not None:
        v = v * tv_cutoff_factor(mu.tv_norm(), threshold)
    if not np.all(np.isfinite(v)):
        raise SolverError("non-finite value of a kernel nonlinearity")
    return float(v[0]) if scalar else np.asarray(v, dtype=float)


def freeze(p: NonlinearProblem, mu: DiscreteMeasure) -> Coefficients:
    """Coefficients of x alone: a^h(., mu), b^h(., mu), c^h(., mu) with mu fixed."""
    mu = DiscreteMeasure(mu.positions.copy(), mu.weights.copy(), check=False)

    def make(f: KernelNonlinearity):
        return lambda x: eval_nonlinearity(f, p.h, np.asarray(x, dtype=float), mu, p.threshold)

    return Coefficients(make(p.model.a), make(p.model.b), make(p.model.c))


def _check_frozen(p: NonlinearProblem, coef: Coefficients, node: int):
    xs = np.linspace(0.0, p.model.x_max, 257)
    a = coef.a(xs)
    if np.any(a < 0):
        j = int(np.argmax(a < 0))
        raise SolverError(f"frozen model fails a >= 0 at mesh node {node} (x = {xs[j]:.6g}, a = {a[j]:.6g})")
    b0 = float(coef.b(np.array([0.0]))[0])
    if not b0 > 0:
        raise SolverError(f"frozen model fails b(0) > 0 at mesh node {node} (b(0) = {b0:.6g})")


@dataclass
class DyadicLevel:
    k: int
    T: float
    dt_inner: float
    trajectory: MeasureTrajectory

    @property
    def mesh(self) -> np.ndarray:
        return np.linspace(0.0, self.T, 2 ** self.k + 1)

    def at(self, t: float) -> DiscreteMeasure:
        return self.trajectory.at(t)

    def write(self, outdir, prefix: Optional[str] = None):
        return self.trajectory.write(outdir, prefix or f"level{self.k}", extra={"k": self.k})


def default_inner_step(T: float, k: int) -> float:
    return min(T / 2 ** k, T / 2 ** INNER_STEPS_LOG2)


def solve_dyadic(p: NonlinearProblem, k: int, dt_inner: Optional[float] = None,
                 save_every: Optional[int] = None, merge_tol: float = 1e-12) -> DyadicLevel:
    """Level-k approximation: coefficients frozen at the measure of every mesh node.

    The trajectory is saved at every mesh node and every ``save_every`` inner
    steps (default: 64 equally spaced outputs over [0, T]).
    """
    if k < 0:
        raise ValueError("level must be nonnegative")
    if p.T == 0:
        return DyadicLevel(k, 0.0, 0.0, MeasureTrajectory(np.array([0.0]), [canonicalize(p.mu0)], 0.0))
    interval = p.T / 2 ** k
    dt = default_inner_step(p.T, k) if dt_inner is None else float(dt_inner)
    if not (0 < dt <= interval * (1 + 1e-12)):
        raise ValueError("dt_inner must lie in (0, T / 2^k]")
    per = int(round(interval / dt))
    if abs(per * dt - interval) > 1e-9 * interval:
        raise ValueError("dt_inner must divide T / 2^k")
    total = per * 2 ** k
    every = max(1, total // 64) if save_every is None else max(1, int(save_every))
    times, measures = [0.0], [canonicalize(p.mu0)]
    mu = p.mu0
    for m in range(2 ** k):
        coef = freeze(p, mu)
        _check_frozen(p, coef, m)
        base = m * per

        def keep(j, state, base=base):
            step = base + j
            if step % every == 0 or j == per:
                times.append(step * dt)
                measures.append(state)

        mu = particle_steps(coef, mu, dt, per, merge_tol=merge_tol, on_step=keep)
        if np.any(mu.weights < 0):
            raise SolverError(f"negative weight produced on mesh interval {m}")
    return DyadicLevel(k, p.T, dt, MeasureTrajectory(
        np.array(times), measures, dt,
        meta={"scheme": "dyadic", "k": k, "h": p.h, "save_every": every}))


class LevelCache:
    """Memoised level solutions keyed by (h, k, dt_inner)."""

    def __init__(self, p: NonlinearProblem):
        self.p = p
        self._store: Dict[Tuple[float, int, float], DyadicLevel] = {}

    def get(self, k: int, h: Optional[float] = None, dt_inner: Optional[float] = None) -> DyadicLevel:
        h = self.p.h if h is None else float(h)
        dt = default_inner_step(self.p.T, k) if dt_inner is None else float(dt_inner)
        key = (h, k, dt)
        if key not in self._store:
            prob = self.p if h == self.p.h else self.p.with_h(h)
            self._store[key] = solve_dyadic(prob, k, dt)
        return self._store[key]


def cross_level_distance(p: NonlinearProblem, k: int, t: float, dt_inner: Optional[float] = None,
                         cache: Optional[LevelCache] = None) -> float:
    """Flat distance between the level-k and level-(k+1) measures at time t (same inner step)."""
    if not (0 <= t <= p.T):
        raise ValueError("t must lie in [0, T]")
    if t == 0:
        return 0.0
    dt = default_inner_step(p.T, k + 1) if dt_inner is None else float(dt_inner)
    cache = cache or LevelCache(p)
    a = cache.get(k, dt_inner=dt).at(t)
    b = cache.get(k + 1, dt_inner=dt).at(t)
    return flat_distance(a, b)[0]


@dataclass
class HLipschitzReport:
    k: int
    t: float
    rows: List[Tuple[float, float, float]]      # (dh, flat distance, ratio)
    max_tv: float
    flags: List[str]

    @property
    def passed(self) -> bool:
        return not self.flags

    def lines(self) -> List[str]:
        out = [f"k={self.k} t={self.t:g} max_tv={self.max_tv:.6g}"]
        out += [f"dh={dh:+.6g} flat={d:.6g} ratio={r:.6g}" for dh, d, r in self.rows]
        out += [f"FLAG {f}" for f in self.flags]
        return out


def h_lipschitz_scan(p: NonlinearProblem, k: int, t: float, dh_list: Sequence[float],
                     rel_tol: float = 0.2, cache: Optional[LevelCache] = None) -> HLipschitzReport:
    """Ratios p_F(mu^{h+dh,k}_t, mu^{h,k}_t) / |dh| over ``dh_list``.

    Flags non-finite ratios, and ratios at the two smallest |dh| that differ
    by more than ``rel_tol`` (relative to the larger one).
    """
    lo, hi = p.model.h_range
    for dh in dh_list:
        if dh == 0 or not (lo <= p.h + dh <= hi):
            raise ValueError(f"h + dh = {p.h + dh} outside h_range or dh = 0")
    cache = cache or LevelCache(p)
    base = cache.get(k)
    mu = base.at(t)
    rows = []
    max_tv = float(base.trajectory.tv_norms().max())
    for dh in dh_list:
        lev = cache.get(k, h=p.h + dh)
        d = flat_distance(lev.at(t), mu)[0]
        rows.append((float(dh), d, d / abs(dh)))
        max_tv = max(max_tv, float(lev.trajectory.tv_norms().max()))
    flags = []
    if any(not math.isfinite(r) for _, _, r in rows):
        flags.append("nonfinite ratio")
    if len(rows) >= 2:
        small = sorted(rows, key=lambda r: abs(r[0]))[:2]
        r1, r2 = small[0][2], small[1][2]
        scale = max(abs(r1), abs(r2))
        if scale > 0 and abs(r1 - r2) > rel_tol * scale:
            flags.append(f"dh-refinement divergent: ratios {r2:.6g} -> {r1:.6g}")
    return HLipschitzReport(k, t, rows, max_tv, flags)
