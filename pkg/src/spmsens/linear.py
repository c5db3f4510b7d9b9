"""Measure solutions of the linear model

    d/dt mu + d/dx (b mu) = c mu,     b(0) D mu_t(0) = int a d mu_t,

computed three ways:

* ``solve_linear_dual``: a functional int xi d mu_t through the dual solution.
* ``solve_linear_particles``: birth-cohort particle scheme (one atom per step).
* ``solve_linear_characteristics``: mu_t rebuilt from characteristics, with
  the boundary birth rate from a forward renewal equation; atoms carry
  trapezoidal weights, so pairings are second order in the time grid.

``check_linear_inequalities`` evaluates the stability and continuity bounds
of the linear theory on computed trajectories.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .dsl import Coefficients, ModelTriple, ValidationGrid, validate_model
from .flow import flow_path, rk4_positions
from .measures import DiscreteMeasure, canonicalize, flat_distance, pair, write_measure_csv
from .volterra import _cumtrapz, default_n, evaluate_dual, solve_dual


class ModelValidationError(ValueError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class SolverError(RuntimeError):
    pass


@dataclass
class LinearProblem:
    model: ModelTriple
    h: float
    mu0: DiscreteMeasure
    T: float
    validate: bool = True

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

    def coefficients(self) -> Coefficients:
        return self.model.at(self.h)

    def with_h(self, h: float) -> "LinearProblem":
        return LinearProblem(self.model, h, self.mu0, self.T, validate=False)


@dataclass
class MeasureTrajectory:
    times: np.ndarray
    measures: List[DiscreteMeasure]
    dt: float
    birth_policy: str = "one cohort per step at X(dt/2, 0), start-of-step birth integral"
    meta: Dict[str, object] = field(default_factory=dict)

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > tol * max(1.0, abs(t)):
            raise KeyError(f"time {t} is not a saved time of the trajectory")
        return i

    def at(self, t: float) -> DiscreteMeasure:
        return self.measures[self.index_of(t)]

    @property
    def final(self) -> DiscreteMeasure:
        return self.measures[-1]

    def tv_norms(self) -> np.ndarray:
        return np.array([m.tv_norm() for m in self.measures])

    def write(self, outdir, prefix: str = "mu", extra: Optional[Dict[str, object]] = None) -> List[Path]:
        """One measure CSV per saved time plus ``<prefix>_index.csv`` (t,filename,tv_norm)."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        files = []
        rows = []
        for i, (t, m) in enumerate(zip(self.times, self.measures)):
            name = f"{prefix}_{i:05d}.csv"
            write_measure_csv(canonicalize(m), outdir / name)
            files.append(outdir / name)
            rows.append((t, name, m.tv_norm()))
        index = outdir / f"{prefix}_index.csv"
        with open(index, "w", newline="") as fh:
            w = csv.writer(fh)
            head = (list(extra.keys()) if extra else []) + ["t", "filename", "tv_norm"]
            w.writerow(head)
            for t, name, tv in rows:
                w.writerow((list(map(str, extra.values())) if extra else [])
                           + [repr(float(t)), name, repr(float(tv))])
        return [index] + files


# --------------------------------------------------------------------------
# Dual evaluation

def solve_linear_dual(p: LinearProblem, xi: Callable, t: float, N: Optional[int] = None) -> float:
    """int xi d mu_t = int phi_{xi,t}(0, x) d mu_0(x)."""
    if t < 0 or t > p.T + 1e-12:
        raise ValueError(f"t = {t} outside [0, {p.T}]")
    if len(p.mu0) == 0:
        return 0.0
    if t == 0:
        return pair(p.mu0, xi)
    sol = solve_dual(p.model, xi, p.h, t, N)
    vals = evaluate_dual(sol, 0.0, p.mu0.positions)
    return float(np.dot(np.atleast_1d(vals), p.mu0.weights))


# --------------------------------------------------------------------------
# Particle scheme

def _steps_for(T: float, dt: float) -> int:
    n = int(round(T / dt))
    if n < 0 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"dt = {dt} does not divide T = {T}")
    return n


def particle_steps(coef: Coefficients, mu: DiscreteMeasure, dt: float, n_steps: int,
                   rk_substeps: int = 1, merge_tol: float = 1e-12,
                   on_step: Optional[Callable[[int, DiscreteMeasure], None]] = None) -> DiscreteMeasure:
    """Advance ``mu`` by ``n_steps`` particle steps of size ``dt`` with fixed coefficients.

    Per step: the birth integral dt * int a d mu is taken at the start; every
    atom moves along the flow (two RK4 half steps); weights gain the factor
    exp(dt * c(X(dt/2))) (midpoint rule); the newborn cohort is placed at
    X(dt/2, 0).
    """
    x = mu.positions.copy()
    w = mu.weights.copy()
    x_birth = float(rk4_positions(coef.b, np.array([0.0]), dt / 2, rk_substeps)[0])
    for k in range(n_steps):
        births = dt * float(np.dot(coef.a(x), w)) if len(x) else 0.0
        xm = rk4_positions(coef.b, x, dt / 2, rk_substeps)
        x = rk4_positions(coef.b, xm, dt / 2, rk_substeps)
        w = w * np.exp(dt * coef.c(xm))
        if births != 0.0:
            x = np.append(x, x_birth)
            w = np.append(w, births)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(x))):
            raise SolverError(f"non-finite state at particle step {k + 1}")
        if merge_tol > 0 and len(x) > 1:
            m = canonicalize(DiscreteMeasure(x, w, check=False), merge_tol)
            x, w = m.positions, m.weights
        if on_step is not None:
            on_step(k + 1, DiscreteMeasure(x, w, check=False))
    return DiscreteMeasure(x, w, check=False)


def _save_every(n_steps: int, save_every: Optional[int]) -> int:
    if save_every is not None:
        return max(1, int(save_every))
    return max(1, n_steps // 64)


def solve_linear_particles(p: LinearProblem, dt: float, save_every: Optional[int] = None,
                           merge_tol: float = 1e-12) -> MeasureTrajectory:
    n = _steps_for(p.T, dt)
    every = _save_every(n, save_every)
    times, measures = [0.0], [canonicalize(p.mu0)]

    def keep(k, m):
        if k % every == 0 or k == n:
            times.append(k * dt)
            measures.append(m)

    particle_steps(p.coefficients(), p.mu0, dt, n, merge_tol=merge_tol, on_step=keep)
    return MeasureTrajectory(np.array(times), measures, dt,
                             meta={"scheme": "particles", "h": p.h, "save_every": every})


# --------------------------------------------------------------------------
# Reconstruction from characteristics and the renewal equation

def birth_rate(p: LinearProblem, t: float, N: Optional[int] = None):
    """Boundary birth rate B(tau) = int a d mu_tau on tau_j = j t / N.

    B(tau) = sum_i w_i a(X(tau, x_i)) E_i(tau) + int_0^tau q(tau - s, 0) B(s) ds
    is solved forward with the trapezoidal rule.
    Returns (tau grid, B, boundary path X(., 0), boundary growth factor E(., 0)).
    """
    N = default_n(t) if N is None else int(N)
    coef = p.coefficients()
    ds = t / N
    paths = flow_path(coef.b, np.concatenate([[0.0], p.mu0.positions]), t, N)
    X0 = paths[:, 0]
    E0 = np.exp(_cumtrapz(coef.c(X0), ds))
    q = coef.a(X0) * E0
    if len(p.mu0):
        Xi = paths[:, 1:]
        Ei = np.exp(_cumtrapz(coef.c(Xi), ds))
        g = (coef.a(Xi) * Ei) @ p.mu0.weights
    else:
        Xi = np.zeros((N + 1, 0))
        Ei = np.zeros((N + 1, 0))
        g = np.zeros(N + 1)
    diag = 1.0 - 0.5 * ds * q[0]
    if diag <= 0:
        raise SolverError("renewal grid too coarse for the birth kernel; increase N")
    B = np.empty(N + 1)
    B[0] = g[0]
    for j in range(1, N + 1):
        acc = 0.5 * q[j] * B[0]
        if j > 1:
            acc += np.dot(q[j - 1:0:-1], B[1:j])
        B[j] = (g[j] + ds * acc) / diag
    return np.linspace(0.0, t, N + 1), B, X0, E0, Xi, Ei


def solve_linear_characteristics(p: LinearProblem, t: float, N: Optional[int] = None) -> DiscreteMeasure:
    """mu_t as atoms: transported initial atoms plus a trapezoidal discretisation
    of the boundary cohort int_0^t B(tau) E0(t - tau) delta_{X(t - tau, 0)} dtau."""
    if t == 0:
        return canonicalize(p.mu0)
    N = default_n(t) if N is None else int(N)
    tau, B, X0, E0, Xi, Ei = birth_rate(p, t, N)
    ds = t / N
    # cohort born at tau_j sits at X0[N - j] with weight B_j E0[N - j] * trapezoid weight
    wq = np.full(N + 1, ds)
    wq[0] *= 0.5
    wq[-1] *= 0.5
    bx = X0[::-1]
    bw = B * E0[::-1] * wq
    xs = np.concatenate([Xi[-1], bx]) if len(p.mu0) else bx
    ws = np.concatenate([p.mu0.weights * Ei[-1], bw]) if len(p.mu0) else bw
    keep = ws != 0
    return DiscreteMeasure(xs[keep], ws[keep], check=False)


# --------------------------------------------------------------------------
# Inequality checks

@dataclass
class InequalityRow:
    name: str
    t: float
    lhs: float
    rhs: float

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs * (1 + 1e-9) + 1e-12


@dataclass
class InequalityReport:
    rows: List[InequalityRow]
    constants: Dict[str, float]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def violations(self) -> List[InequalityRow]:
        return [r for r in self.rows if not r.passed]

    def lines(self) -> List[str]:
        out = [f"{k} = {v:.6g}" for k, v in self.constants.items()]
        for r in self.rows:
            out.append(f"{'PASS' if r.passed else 'FAIL'} {r.name} t={r.t:.6g} lhs={r.lhs:.6g} rhs={r.rhs:.6g}")
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["inequality", "t", "lhs", "rhs", "passed"])
            for r in self.rows:
                w.writerow([r.name, repr(float(r.t)), repr(float(r.lhs)), repr(float(r.rhs)), int(r.passed)])


def _norms(model: ModelTriple, h: float, xs: np.ndarray) -> Dict[str, float]:
    fn = model.funcs()
    out = {}
    for k in "abc":
        v = np.abs(getattr(fn, k)(h, xs))
        d = np.abs(getattr(fn, k + "_x")(h, xs))
        out[k] = float(np.max(v))
        out[k + "_w1"] = float(np.max(v) + np.max(d))
    return out


def check_linear_inequalities(p: LinearProblem, pbar: LinearProblem, dt: float,
                              save_every: Optional[int] = None) -> InequalityReport:
    """Stability and continuity bounds evaluated on particle trajectories.

    * stability:    |mu_t|_TV <= exp(2(|a| + |c|) t) |mu_0|_TV
    * cont_time:    p_F(mu_t, mu_{t+dt}) <= C dt |mu_t|_TV,
                    C = (|a| + |b| + |c|) exp(2(|a| + |c|) dt)
    * cont_initial: p_F(mu_t, nu_t) <= p_F(mu_0, nu_0) exp(3 L t)   (same model)
    * cont_model:   p_F(mu_t, nu_t) <= t exp(3 L t) |mu_0|_TV (|a-abar| + |b-bbar| + |c-cbar|)
                    (same initial datum)
    where |.| are sup norms and L the larger W^{1,inf} norm sum of the two models.
    When both the model and the initial datum differ, the two right-hand sides are added.
    """
    if abs(p.T - pbar.T) > 1e-12:
        raise ValueError("problems must share the horizon")
    tr = solve_linear_particles(p, dt, save_every)
    trb = solve_linear_particles(pbar, dt, save_every)
    x_hi = max(p.model.x_max, pbar.model.x_max,
               max((float(np.max(m.positions)) for m in tr.measures + trb.measures if len(m)), default=0.0))
    xs = np.linspace(0.0, x_hi, 2049)
    n1, n2 = _norms(p.model, p.h, xs), _norms(pbar.model, pbar.h, xs)
    fa, fb = p.model.funcs(), pbar.model.funcs()
    diff = sum(float(np.max(np.abs(getattr(fa, k)(p.h, xs) - getattr(fb, k)(pbar.h, xs)))) for k in "abc")
    L = max(n1["a_w1"] + n1["b_w1"] + n1["c_w1"], n2["a_w1"] + n2["b_w1"] + n2["c_w1"])
    rows: List[InequalityRow] = []

    for label, prob, traj, nn in (("", p, tr, n1), ("bar", pbar, trb, n2)):
        tv0 = prob.mu0.tv_norm()
        growth = 2 * (nn["a"] + nn["c"])
        for t, m in zip(traj.times, traj.measures):
            rows.append(InequalityRow(f"stability{label}", t, m.tv_norm(), math.exp(growth * t) * tv0))
        # consecutive saved times: spacing may exceed dt, scale accordingly
        for (t0, m0), (t1, m1) in zip(zip(traj.times, traj.measures), zip(traj.times[1:], traj.measures[1:])):
            gap = t1 - t0
            C_gap = (nn["a"] + nn["b"] + nn["c"]) * math.exp(growth * gap)
            rows.append(InequalityRow(f"cont_time{label}", t1, flat_distance(m0, m1)[0],
                                      C_gap * gap * max(m0.tv_norm(), m1.tv_norm())))

    same_model = diff == 0.0
    same_init = p.mu0.equals(pbar.mu0)
    d0 = flat_distance(p.mu0, pbar.mu0)[0]
    tv0 = p.mu0.tv_norm()
    fitted = 0.0
    for t, m, mb in zip(tr.times, tr.measures, trb.measures):
        lhs = flat_distance(m, mb)[0]
        e = math.exp(3 * L * t)
        rhs_init = d0 * e
        rhs_model = t * e * tv0 * diff
        if same_model:
            rows.append(InequalityRow("cont_initial", t, lhs, rhs_init))
        elif same_init:
            rows.append(InequalityRow("cont_model", t, lhs, rhs_model))
        else:
            rows.append(InequalityRow("cont_initial+model", t, lhs, rhs_init + rhs_model))
        if not same_model and same_init and t > 0 and lhs > 0:
            base = t * tv0 * diff
            if base > 0:
                fitted = max(fitted, math.log(max(lhs / base, 1.0)) / t)
    constants = {"L_w1inf_sum": L, "model_gap_sup": diff, "C_model_used": 3 * L,
                 "C_model_fitted_min": fitted}
    return InequalityReport(rows, constants)
