"""Difference quotients in h and their behaviour in the flat and Z norms.

The signed measures ``(mu_t^{h+dh} - mu_t^h) / dh`` are built from any of
three backends:

* ``linear-dual``: linear problem, solution rebuilt from characteristics and
  the renewal equation (the same discretisation the dual evaluation uses);
* ``linear-particles``: linear problem, birth-cohort particle scheme;
* ``dyadic(k)``: nonlinear problem, level-k dyadic freezing scheme.

On top of them: Cauchy diagnostics (pairwise distances between quotients,
trend and divergence flags with a witness test function), Richardson
derivative estimates with a functional table over a test bank, Holder scans
of the derivative in h, and the cross-level quotient study Delta^{k,t}.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .linear import (LinearProblem, particle_steps, solve_linear_characteristics)
from .measures import (DiscreteMeasure, NormBudget, TestFunction, canonicalize,
                       flat_distance, z_distance)
from .nonlinear import LevelCache, NonlinearProblem, default_inner_step
from .volterra import dh_dual

Problem = Union[LinearProblem, NonlinearProblem]


# --------------------------------------------------------------------------
# Backends

@dataclass(frozen=True)
class Backend:
    """Which solver produces mu_t^h.  ``dt`` / ``N`` / ``k`` are resolution knobs."""

    kind: str = "linear-dual"
    k: Optional[int] = None
    dt: Optional[float] = None
    N: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("linear-dual", "linear-particles", "dyadic"):
            raise ValueError(f"unknown backend {self.kind!r}")
        if self.kind == "dyadic" and (self.k is None or self.k < 0):
            raise ValueError("the dyadic backend needs a level k >= 0")

    @classmethod
    def parse(cls, text: str, **kw) -> "Backend":
        """``linear-dual``, ``linear-particles`` or ``dyadic(k)``."""
        text = text.strip()
        m = re.fullmatch(r"dyadic\s*\(\s*(\d+)\s*\)", text)
        if m:
            return cls("dyadic", k=int(m.group(1)), **kw)
        return cls(text, **kw)

    @property
    def label(self) -> str:
        return f"dyadic({self.k})" if self.kind == "dyadic" else self.kind


def default_backend(problem: Problem) -> Backend:
    return Backend("dyadic", k=4) if isinstance(problem, NonlinearProblem) else Backend("linear-dual")


class SolutionCache:
    """mu_t^h for one problem and backend, memoised over (h, t)."""

    def __init__(self, problem: Problem, backend: Optional[Backend] = None):
        self.problem = problem
        self.backend = backend or default_backend(problem)
        nonlinear = isinstance(problem, NonlinearProblem)
        if nonlinear != (self.backend.kind == "dyadic"):
            raise ValueError(f"backend {self.backend.label} does not fit a "
                             f"{'nonlinear' if nonlinear else 'linear'} problem")
        self._store: Dict[Tuple[float, float], DiscreteMeasure] = {}
        self._levels = LevelCache(problem) if nonlinear else None

    def check_h(self, h: float):
        lo, hi = self.problem.model.h_range
        if not (lo - 1e-15 <= h <= hi + 1e-15):
            raise ValueError(f"h = {h:g} outside h_range [{lo:g}, {hi:g}]")

    def measure(self, h: float, t: float) -> DiscreteMeasure:
        h, t = float(h), float(t)
        key = (h, t)
        if key in self._store:
            return self._store[key]
        self.check_h(h)
        p, b = self.problem, self.backend
        if not (0 <= t <= p.T + 1e-12):
            raise ValueError(f"t = {t:g} outside [0, T]")
        if t == 0:
            mu = canonicalize(p.mu0)
        elif b.kind == "linear-dual":
            mu = solve_linear_characteristics(p.with_h(h), t, b.N)
        elif b.kind == "linear-particles":
            dt = b.dt or 2.0 ** -10
            n = int(round(t / dt))
            if n < 1 or abs(n * dt - t) > 1e-9 * max(1.0, t):
                raise ValueError(f"t = {t:g} is not a multiple of dt = {dt:g}")
            mu = particle_steps(p.with_h(h).coefficients(), p.mu0, dt, n)
        else:
            dt = b.dt or default_inner_step(p.T, b.k + 1)
            mu = self._levels.get(b.k, h=h, dt_inner=dt).at(t)
        self._store[key] = mu
        return mu


# --------------------------------------------------------------------------
# Quotients

def quotient(plus: DiscreteMeasure, base: DiscreteMeasure, dh: float) -> DiscreteMeasure:
    """(plus - base) / dh as a signed atom list (not canonicalised).

    The two measures are canonicalised first, so atoms shared by both cancel
    exactly once the quotient is canonicalised.
    """
    if dh == 0:
        raise ValueError("dh must be nonzero")
    plus, base = canonicalize(plus), canonicalize(base)
    return DiscreteMeasure(np.concatenate([plus.positions, base.positions]),
                           np.concatenate([plus.weights, -base.weights]) / dh, check=False)


@dataclass
class Quotient:
    dh: float
    measure: DiscreteMeasure
    h: float
    t: float
    level: str


@dataclass
class QuotientPair:
    q1: Quotient
    q2: Quotient

    @property
    def dh1(self) -> float:
        return self.q1.dh

    @property
    def dh2(self) -> float:
        return self.q2.dh


def quotient_measures(problem: Problem, t: float, h: float, dh_list: Sequence[float],
                      backend: Optional[Backend] = None,
                      cache: Optional[SolutionCache] = None) -> List[Quotient]:
    """Quotients (mu_t^{h+dh} - mu_t^h) / dh for every dh in ``dh_list``."""
    cache = cache or SolutionCache(problem, backend)
    for dh in dh_list:
        if dh == 0:
            raise ValueError("dh must be nonzero")
        cache.check_h(h + dh)
    base = cache.measure(h, t)
    return [Quotient(float(dh), quotient(cache.measure(h + dh, t), base, dh), float(h), float(t),
                     cache.backend.label) for dh in dh_list]


def symmetric_quotient(cache: SolutionCache, h: float, t: float, d: float) -> DiscreteMeasure:
    """(mu^{h+d} - mu^{h-d}) / (2d)."""
    return quotient(cache.measure(h + d, t), cache.measure(h - d, t), 2.0 * d)


# --------------------------------------------------------------------------
# Rate fits

@dataclass
class RateFit:
    """Least-squares line through (log2 x, log2 y).

    ``kind == "power"``: y ~ x^slope and ``rate`` is the slope.
    ``kind == "dyadic"``: x is a level k, y ~ 2^{-rate k}, the fit is of
    log2 y against k and ``rate`` is minus the slope.
    Nonpositive values are dropped; ``flag`` explains a missing fit.
    """

    abscissae: np.ndarray
    values: np.ndarray
    slope: float
    intercept: float
    residual: float
    kind: str = "power"
    flag: str = ""

    @property
    def rate(self) -> float:
        return -self.slope if self.kind == "dyadic" else self.slope

    def line(self) -> str:
        name = "rate" if self.kind == "dyadic" else "exponent"
        s = f"fitted {name} = {self.rate:.6g} (residual {self.residual:.3g}, {len(self.values)} points)"
        return s + (f" [{self.flag}]" if self.flag else "")


def fit_rate(x: Sequence[float], y: Sequence[float], kind: str = "power",
             zero_tol: float = 0.0) -> RateFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = np.isfinite(y) & (y > zero_tol)
    if kind == "power":
        keep &= x > 0
    if keep.sum() < 2:
        flag = "all values zero" if np.all(np.abs(y[np.isfinite(y)]) <= zero_tol) else "too few positive values"
        return RateFit(x, y, math.nan, math.nan, math.nan, kind, flag)
    X = x[keep] if kind == "dyadic" else np.log2(x[keep])
    Y = np.log2(y[keep])
    A = np.vstack([X, np.ones_like(X)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, Y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ np.array([slope, icpt]) - Y) ** 2)))
    return RateFit(x, y, float(slope), float(icpt), resid, kind)


# --------------------------------------------------------------------------
# Cauchy diagnostics

def _metric(budget: NormBudget, m: DiscreteMeasure, n: DiscreteMeasure) -> Tuple[float, TestFunction]:
    if budget.kind == "flat":
        return flat_distance(m, n)
    return z_distance(m, n, budget)


@dataclass
class CauchyReport:
    """Distances between quotients.

    ``sequence`` pairs each step s with the distance between the quotients at
    +s and -s when both are present, otherwise between consecutive steps
    ordered by |dh|; ``rate`` fits sequence distance against step size.
    """

    metric: str
    dhs: np.ndarray
    matrix: np.ndarray
    sequence: List[Tuple[float, float]]
    summary: float
    shrinking: bool
    divergent: bool
    witness: Optional[TestFunction]
    witness_value: float
    rate: Optional[RateFit]

    def lines(self) -> List[str]:
        out = [f"metric: {self.metric}"]
        out += [f"step {s:.6g}: distance {d:.6g}" for s, d in self.sequence]
        out.append(f"max distance among the 3 smallest steps: {self.summary:.6g}")
        out.append(f"trend: {'shrinking' if self.shrinking else 'not shrinking'}")
        if self.rate is not None:
            out.append(self.rate.line())
        if self.divergent:
            out.append(f"DIVERGENT: witness test function attains {self.witness_value:.6g}")
        return out


def cauchy_diagnostic(quotients: Sequence[Quotient], metric: NormBudget, full: bool = True,
                      slack: float = 0.1, zero_tol: float = 1e-12) -> CauchyReport:
    """Pairwise metric distances between quotients, with trend and divergence flags.

    The trend is "shrinking" when every refinement step of ``sequence``
    grows the distance by at most ``slack`` and the last distance is at most
    half the first (or everything is numerically zero).  A sequence that does
    not shrink is reported DIVERGENT with the optimal test function of the
    smallest-step comparison as witness.  With ``full=False`` only the
    entries needed for the sequence and the summary are computed (others NaN).
    """
    if len(quotients) < 2:
        raise ValueError("need at least two quotients")
    dhs = np.array([q.dh for q in quotients])
    n = len(quotients)
    M = np.full((n, n), np.nan)
    np.fill_diagonal(M, 0.0)
    tests: Dict[Tuple[int, int], TestFunction] = {}

    def get(i, j):
        i, j = min(i, j), max(i, j)
        if np.isnan(M[i, j]):
            v, tf = _metric(metric, quotients[i].measure, quotients[j].measure)
            M[i, j] = M[j, i] = v
            tests[(i, j)] = tf
        return M[i, j]

    if full:
        for i in range(n):
            for j in range(i + 1, n):
                get(i, j)
    order = sorted(range(n), key=lambda i: (abs(dhs[i]), dhs[i]))
    index = {float(d): i for i, d in enumerate(dhs)}
    steps = sorted({abs(float(d)) for d in dhs}, reverse=True)
    seq_pairs = []
    if all(s in index and -s in index for s in steps):
        seq_pairs = [(s, index[s], index[-s]) for s in steps]
    else:
        rev = order[::-1]
        seq_pairs = [(abs(float(dhs[b])), a, b) for a, b in zip(rev, rev[1:])]
    sequence = [(s, float(get(i, j))) for s, i, j in seq_pairs]
    small = order[:3]
    summary = max(float(get(i, j)) for a, i in enumerate(small) for j in small[a + 1:]) if len(small) > 1 else 0.0
    d = np.array([v for _, v in sequence])
    if np.all(d <= zero_tol):
        shrinking = True
    else:
        steps_ok = all(d[i + 1] <= (1 + slack) * d[i] + zero_tol for i in range(len(d) - 1))
        shrinking = bool(steps_ok and len(d) > 1 and d[-1] <= 0.5 * d[0])
    rate = fit_rate([s for s, _ in sequence], d, "power", zero_tol) if len(sequence) >= 2 else None
    witness, wval = None, 0.0
    divergent = not shrinking
    if divergent:
        s, i, j = seq_pairs[-1]
        witness = tests[(min(i, j), max(i, j))]
        diff = quotients[min(i, j)].measure - quotients[max(i, j)].measure
        wval = abs(float(np.dot(witness(diff.positions), diff.weights)))
    return CauchyReport(metric.describe(), dhs, M, sequence, summary, shrinking, divergent,
                        witness, wval, rate)


# --------------------------------------------------------------------------
# Derivative estimates

def _bump(c: float) -> Callable:
    def f(x):
        u = np.asarray(x, dtype=float) - c
        out = np.zeros_like(u)
        inside = np.abs(u) < 1
        out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
        return out if np.ndim(x) else float(out)
    return f


def standard_test_bank(centers: Sequence[float] = (0.5, 1.0, 1.5, 2.0, 3.0)) -> List[Tuple[str, Callable]]:
    """1, x, x^2, exp(-x), sin(x) and smooth bumps exp(-1/(1-u^2)), u = x - c."""
    bank = [
        ("1", lambda x: np.ones_like(np.asarray(x, dtype=float))),
        ("x", lambda x: np.asarray(x, dtype=float)),
        ("x^2", lambda x: np.asarray(x, dtype=float) ** 2),
        ("exp(-x)", lambda x: np.exp(-np.asarray(x, dtype=float))),
        ("sin(x)", lambda x: np.sin(np.asarray(x, dtype=float))),
    ]
    bank += [(f"bump(x-{c:g})", _bump(c)) for c in centers]
    return bank


@dataclass
class DerivativeEstimate:
    """Richardson-extrapolated symmetric quotient and its pairings with a test bank.

    ``error_bar`` is the metric distance between the symmetric quotients at
    ``dh_used[0]`` and ``dh_used[1]``.  ``dual_table`` (linear problems only)
    holds the same functionals from the differentiated dual equation.
    """

    representation: DiscreteMeasure
    dh_used: Tuple[float, float]
    error_bar: float
    table: List[Tuple[str, float]]
    h: float
    t: float
    metric: str
    dual_table: List[Tuple[str, float]] = field(default_factory=list)

    def value(self, name: str) -> float:
        return dict(self.table)[name]

    def lines(self) -> List[str]:
        out = [f"h={self.h:g} t={self.t:g} dh={self.dh_used[0]:g},{self.dh_used[1]:g} "
               f"error_bar({self.metric})={self.error_bar:.6g}"]
        dual = dict(self.dual_table)
        for name, v in self.table:
            extra = f" dual={dual[name]:.10g}" if name in dual else ""
            out.append(f"{name}: {v:.10g}{extra}")
        return out


def _richardson(cache: SolutionCache, h: float, t: float, dh0: float) -> Tuple[DiscreteMeasure, DiscreteMeasure, DiscreteMeasure]:
    s1 = symmetric_quotient(cache, h, t, dh0)
    s2 = symmetric_quotient(cache, h, t, dh0 / 2)
    rep = canonicalize(canonicalize(s2) * (4.0 / 3.0) - canonicalize(s1) * (1.0 / 3.0))
    return rep, s1, s2


def derivative_estimate(problem: Problem, t: float, h: float, dh0: float,
                        metric: Optional[NormBudget] = None, backend: Optional[Backend] = None,
                        bank: Optional[Sequence[Tuple[str, Callable]]] = None, dual: bool = False,
                        cache: Optional[SolutionCache] = None) -> DerivativeEstimate:
    """Richardson extrapolation (4 S(dh0/2) - S(dh0)) / 3 of symmetric quotients S."""
    if dh0 <= 0:
        raise ValueError("dh0 must be positive")
    cache = cache or SolutionCache(problem, backend)
    for s in (dh0, -dh0):
        cache.check_h(h + s)
    metric = metric or NormBudget.z()
    rep, s1, s2 = _richardson(cache, h, t, dh0)
    err = _metric(metric, s1, s2)[0]
    bank = list(bank) if bank is not None else standard_test_bank()
    table = [(name, rep.pair(f)) for name, f in bank]
    dual_table = []
    if dual:
        if not isinstance(problem, LinearProblem):
            raise ValueError("the dual table needs a linear problem")
        mu0 = canonicalize(problem.mu0)
        for name, f in bank:
            r = dh_dual(problem.model, f, h, t, x=mu0.positions)
            dual_table.append((name, float(np.dot(r.values, mu0.weights))))
    return DerivativeEstimate(rep, (dh0, dh0 / 2), err, table, float(h), float(t),
                              metric.describe(), dual_table)


# --------------------------------------------------------------------------
# Holder scan of the derivative in h

@dataclass
class HolderScan:
    rows: List[Tuple[float, float, float]]        # (h1, h2, distance)
    fit: RateFit
    constant: bool

    def lines(self) -> List[str]:
        out = [f"h1={a:g} h2={b:g} distance={d:.6g}" for a, b, d in self.rows]
        out.append("constant derivative" if self.constant else self.fit.line())
        return out


def holder_scan(problem: Problem, t: float, h_grid: Sequence[float], dh0: float,
                metric: Optional[NormBudget] = None, backend: Optional[Backend] = None,
                zero_tol: float = 1e-9) -> HolderScan:
    """Metric distances between derivative estimates at all pairs of ``h_grid``."""
    hs = [float(h) for h in h_grid]
    if len(hs) < 4:
        raise ValueError("need at least 4 values of h")
    metric = metric or NormBudget.z()
    cache = SolutionCache(problem, backend)
    reps = {}
    for h in hs:
        cache.check_h(h + dh0)
        cache.check_h(h - dh0)
        reps[h] = _richardson(cache, h, t, dh0)[0]
    rows = []
    for i, a in enumerate(hs):
        for b in hs[i + 1:]:
            d = 0.0 if a == b else _metric(metric, reps[a], reps[b])[0]
            rows.append((a, b, float(d)))
    scale = max([reps[h].tv_norm() for h in hs] + [1.0])
    dists = np.array([d for _, _, d in rows])
    constant = bool(np.all(dists <= zero_tol * scale))
    gaps = np.array([abs(b - a) for a, b, _ in rows])
    fit = fit_rate(gaps, dists, "power", zero_tol * scale)
    if constant:
        fit.flag = "constant derivative"
    return HolderScan(rows, fit, constant)


# --------------------------------------------------------------------------
# Cross-level quotient study

def default_dh_list() -> List[float]:
    return [s * 2.0 ** -j for j in range(3, 9) for s in (1.0, -1.0)]


@dataclass
class DeltaKTResult:
    alpha: float
    t: float
    rows: List[Tuple[int, float, float]]          # (k, dh, Z distance)
    delta_hat: List[Tuple[int, float]]
    fit: RateFit

    @property
    def target(self) -> float:
        return 2 * self.alpha - 1

    def lines(self) -> List[str]:
        out = [f"k={k} delta_hat={d:.6g}" for k, d in self.delta_hat]
        out.append(self.fit.line() + f"; asymptotic rate 2*alpha-1 = {self.target:.3g}")
        return out


def delta_kt_study(problem: NonlinearProblem, t: float, h: Optional[float] = None,
                   k_range: Sequence[int] = range(2, 7), dh_list: Optional[Sequence[float]] = None,
                   alpha: float = 0.9, nodes: int = 257) -> DeltaKTResult:
    """Delta-hat^{k,t}: max over ``dh_list`` of the Z distance between level-(k+1)
    and level-k quotients at step dh (the sup over dh replaced by a finite max)."""
    if not isinstance(problem, NonlinearProblem):
        raise TypeError("delta_kt_study needs a NonlinearProblem")
    ks = [int(k) for k in k_range]
    if ks != sorted(ks) or len(set(ks)) != len(ks):
        raise ValueError("k_range must be strictly ascending")
    h = problem.h if h is None else float(h)
    dh_list = default_dh_list() if dh_list is None else [float(d) for d in dh_list]
    budget = NormBudget.z(alpha=alpha, nodes=nodes)
    levels = LevelCache(problem)
    lo, hi = problem.model.h_range
    for dh in dh_list:
        if dh == 0 or not (lo <= h + dh <= hi):
            raise ValueError(f"h + dh = {h + dh:g} outside h_range or dh = 0")
    rows, delta = [], []
    for k in ks:
        worst = 0.0
        if t > 0:
            dt = default_inner_step(problem.T, k + 1)
            base_k = levels.get(k, h, dt).at(t)
            base_k1 = levels.get(k + 1, h, dt).at(t)
            for dh in dh_list:
                qk = quotient(levels.get(k, h + dh, dt).at(t), base_k, dh)
                qk1 = quotient(levels.get(k + 1, h + dh, dt).at(t), base_k1, dh)
                v = z_distance(qk1, qk, budget)[0]
                rows.append((k, dh, v))
                worst = max(worst, v)
        else:
            rows += [(k, dh, 0.0) for dh in dh_list]
        delta.append((k, worst))
    fit = fit_rate([k for k, _ in delta], [d for _, d in delta], "dyadic")
    return DeltaKTResult(alpha, float(t), rows, delta, fit)


# --------------------------------------------------------------------------
# Quotient-difference inequality for scalar functions

@dataclass
class TaylorGapReport:
    worst_ratio: float
    samples: int
    worst: Optional[Tuple[float, float, float, float]]

    @property
    def passed(self) -> bool:
        return self.worst_ratio <= 1.0 + 1e-12


def taylor_gap_check(f: Callable[[float], float], holder_const: float, alpha: float,
                     h_points: Sequence[float], steps: Sequence[float]) -> TaylorGapReport:
    """Worst LHS / RHS of

        |(f(h1+d1) - f(h1))/d1 - (f(h2+d2) - f(h2))/d2|
            <= C ((|d1|^a + |d2|^a) / (1 + a) + |h1 - h2|^a),

    C = ``holder_const`` (the alpha-Holder constant of f'), over all
    h1, h2 in ``h_points`` and nonzero d1, d2 in ``steps``.
    """
    worst, arg, n = 0.0, None, 0
    hs = [float(h) for h in h_points]
    ds = [float(d) for d in steps if d != 0]
    for h1 in hs:
        for h2 in hs:
            for d1 in ds:
                q1 = (f(h1 + d1) - f(h1)) / d1
                for d2 in ds:
                    q2 = (f(h2 + d2) - f(h2)) / d2
                    lhs = abs(q1 - q2)
                    rhs = holder_const * ((abs(d1) ** alpha + abs(d2) ** alpha) / (1 + alpha)
                                          + abs(h1 - h2) ** alpha)
                    n += 1
                    # equality cases (lhs == rhs == 0) count as ratio 0
                    r = 0.0 if lhs <= 1e-15 * max(1.0, abs(q1)) else (lhs / rhs if rhs > 0 else math.inf)
                    if r > worst:
                        worst, arg = r, (h1, h2, d1, d2)
    return TaylorGapReport(worst, n, arg)
