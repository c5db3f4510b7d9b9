"""Discrete signed measures on the half-line and the dual distances between them.

Three distances are provided:

* ``flat_distance``: the bounded-Lipschitz (flat) metric, solved exactly by a
  dynamic program over concave piecewise-linear value functions.
* ``z_distance``: the dual norm of C^{1+alpha}, approximated from below by a
  linear program on a grid of test-function nodes.
* ``wasserstein1``: the classical 1-D closed form (infinite when masses differ).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Tuple, Union

import numpy as np
import highspy


class MeasureError(ValueError):
    pass


class GridError(ValueError):
    pass


class DiscreteMeasure:
    """Finite signed combination of point masses on [0, inf)."""

    __slots__ = ("positions", "weights")

    def __init__(self, positions=(), weights=(), check=True):
        x = np.asarray(positions, dtype=float).ravel()
        w = np.asarray(weights, dtype=float).ravel()
        if x.shape != w.shape:
            raise MeasureError("positions and weights differ in length")
        if check:
            if not np.all(np.isfinite(x)):
                raise MeasureError("non-finite position")
            if np.any(x < 0):
                raise MeasureError(f"negative position {float(x[x < 0][0])}")
            if not np.all(np.isfinite(w)):
                raise MeasureError("non-finite weight")
        self.positions = x
        self.weights = w

    @classmethod
    def from_atoms(cls, atoms: Iterable[Tuple[float, float]]):
        atoms = list(atoms)
        if not atoms:
            return cls()
        x, w = zip(*atoms)
        return cls(x, w)

    @classmethod
    def dirac(cls, x: float, w: float = 1.0):
        return cls([x], [w])

    @property
    def atoms(self) -> List[Tuple[float, float]]:
        return list(zip(self.positions.tolist(), self.weights.tolist()))

    def __len__(self):
        return len(self.positions)

    def __repr__(self):
        if len(self) > 6:
            return f"DiscreteMeasure(<{len(self)} atoms>, mass={self.mass():.6g})"
        return f"DiscreteMeasure({self.atoms})"

    def copy(self):
        return DiscreteMeasure(self.positions.copy(), self.weights.copy(), check=False)

    def __add__(self, other: "DiscreteMeasure"):
        return DiscreteMeasure(np.concatenate([self.positions, other.positions]),
                               np.concatenate([self.weights, other.weights]), check=False)

    def __neg__(self):
        return DiscreteMeasure(self.positions, -self.weights, check=False)

    def __sub__(self, other: "DiscreteMeasure"):
        return self + (-other)

    def __mul__(self, s: float):
        return DiscreteMeasure(self.positions, self.weights * float(s), check=False)

    __rmul__ = __mul__

    def __truediv__(self, s: float):
        return self * (1.0 / float(s))

    def mass(self) -> float:
        return float(np.sum(self.weights))

    def tv_norm(self) -> float:
        return tv_norm(self)

    def canonical(self) -> "DiscreteMeasure":
        return canonicalize(self)

    def pair(self, xi: Callable) -> float:
        return pair(self, xi)

    def is_nonnegative(self) -> bool:
        return bool(np.all(self.weights >= 0))

    def equals(self, other: "DiscreteMeasure", tol: float = 0.0) -> bool:
        a, b = canonicalize(self), canonicalize(other)
        if len(a) != len(b):
            return False
        return bool(np.all(np.abs(a.positions - b.positions) <= tol) and
                    np.all(np.abs(a.weights - b.weights) <= tol))


def canonicalize(m: DiscreteMeasure, merge_tol: float = 0.0) -> DiscreteMeasure:
    """Sort atoms, merge coincident positions and drop zero weights.

    Atoms closer than ``merge_tol`` are merged onto the left one.
    """
    x, w = m.positions, m.weights
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise MeasureError("positions must be finite and nonnegative")
    if not np.all(np.isfinite(w)):
        raise MeasureError("non-finite weight")
    if len(x) == 0:
        return DiscreteMeasure()
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    if merge_tol > 0:
        new_group = np.concatenate([[True], np.diff(x) > merge_tol])
    else:
        new_group = np.concatenate([[True], np.diff(x) > 0])
    starts = np.flatnonzero(new_group)
    xs = x[starts]
    ws = np.add.reduceat(w, starts)
    keep = ws != 0
    return DiscreteMeasure(xs[keep], ws[keep], check=False)


def pair(m: DiscreteMeasure, xi: Callable) -> float:
    """Integral of ``xi`` against ``m``."""
    if len(m) == 0:
        return 0.0
    vals = np.asarray(xi(m.positions), dtype=float)
    vals = np.broadcast_to(vals, m.positions.shape)
    if not np.all(np.isfinite(vals)):
        raise MeasureError("test function is not finite on the support")
    return float(np.dot(vals, m.weights))


def tv_norm(m: DiscreteMeasure) -> float:
    if len(m) == 0:
        return 0.0
    return float(np.sum(np.abs(canonicalize(m).weights)))


# --------------------------------------------------------------------------
# Test functions and norm budgets

@dataclass(frozen=True)
class NormBudget:
    """Test-function class of a dual norm.

    ``kind`` is ``"flat"`` (|f| <= 1, Lip f <= 1) or ``"z"`` (sup|f| + sup|f'| +
    alpha-Holder seminorm of f' <= 1).  Grid fields only matter for ``"z"``.
    """

    kind: str = "z"
    alpha: float = 0.75
    nodes: int = 257
    window: Optional[int] = None
    margin_frac: float = 0.1
    margin_min: float = 1.0
    lazy_pairs: bool = True

    def __post_init__(self):
        if self.kind not in ("flat", "z"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.kind == "z" and not (0 < self.alpha <= 1):
            raise ValueError("alpha must lie in (0, 1]")
        if self.nodes < 3:
            raise ValueError("need at least 3 grid nodes")

    @classmethod
    def flat(cls):
        return cls(kind="flat")

    @classmethod
    def z(cls, alpha=0.75, nodes=257, **kw):
        return cls(kind="z", alpha=alpha, nodes=nodes, **kw)

    def effective_window(self, n_nodes: int) -> Optional[int]:
        if self.window is not None:
            return self.window
        return 2 if self.lazy_pairs else None

    def describe(self) -> str:
        if self.kind == "flat":
            return "flat"
        return f"z(alpha={self.alpha:g}, nodes={self.nodes}, window={self.window or 'auto'})"


@dataclass
class TestFunction:
    """Optimal test function: nodal values ``f`` and (for Z) nodal derivatives ``g``.

    Flat witnesses interpolate linearly.  Z witnesses have a piecewise-linear
    derivative, so values between nodes are piecewise quadratic.
    """

    nodes: np.ndarray
    f: np.ndarray
    g: Optional[np.ndarray] = None
    kind: str = "flat"
    alpha: Optional[float] = None
    budget: Optional[Tuple[float, float, float]] = None
    grid_info: str = ""

    __test__ = False

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.g is None:
            return np.interp(x, self.nodes, self.f)
        t = self.nodes
        i = np.clip(np.searchsorted(t, x, side="right") - 1, 0, len(t) - 2)
        d = t[i + 1] - t[i]
        tau = np.clip(x, t[0], t[-1]) - t[i]
        return self.f[i] + self.g[i] * tau + (self.g[i + 1] - self.g[i]) * tau ** 2 / (2 * d)

    def max_violation(self) -> float:
        """Largest violation of the budget constraints at the nodes (0 if feasible)."""
        t, f = self.nodes, self.f
        if self.g is None:
            v = max(0.0, float(np.max(np.abs(f))) - 1.0)
            if len(t) > 1:
                v = max(v, float(np.max(np.abs(np.diff(f)) - np.diff(t))))
            return max(v, 0.0)
        c1, c2, c3 = self.budget
        g = self.g
        viol = [c1 + c2 + c3 - 1.0, float(np.max(np.abs(f))) - c1, float(np.max(np.abs(g))) - c2,
                float(np.max(np.abs(np.diff(f) - 0.5 * (g[1:] + g[:-1]) * np.diff(t)))),
                float(np.max(np.abs(f[:-1] + 0.5 * g[:-1] * np.diff(t)))) - c1]
        dg = np.abs(g[:, None] - g[None, :])
        dt = np.abs(t[:, None] - t[None, :]) ** self.alpha
        viol.append(float(np.max(dg - c3 * dt)))
        return max(0.0, *viol)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "f", "g"])
            g = self.g if self.g is not None else np.full_like(self.f, np.nan)
            for row in zip(self.nodes, self.f, g):
                w.writerow([repr(float(v)) for v in row])


# --------------------------------------------------------------------------
# Flat metric: exact dynamic program

def _flat_dp(x: np.ndarray, d: np.ndarray) -> Tuple[float, np.ndarray]:
    """max sum d_i f_i  s.t. |f_i| <= 1, |f_{i+1} - f_i| <= x_{i+1} - x_i.

    The value function V_i(f) (best partial objective with f_i = f) is
    concave piecewise linear on [-1, 1].  Passing to the next atom takes a
    windowed maximum (shift the rising part left by the gap, the falling part
    right, plateau in between) and adds the linear term d_{i+1} f.
    """
    n = len(x)
    bx = np.array([-1.0, 1.0])
    bv = np.array([-d[0], d[0]])
    argmaxes = np.empty(n)
    gaps = np.diff(x)
    for i in range(n - 1):
        k = int(np.argmax(bv))
        m, vm = bx[k], bv[k]
        argmaxes[i] = m
        g = gaps[i]
        cx = np.concatenate([bx[:k] - g, [m - g, m + g], bx[k + 1:] + g])
        cv = np.concatenate([bv[:k], [vm, vm], bv[k + 1:]])
        inner = (cx > -1.0) & (cx < 1.0)
        nx = np.concatenate([[-1.0], cx[inner], [1.0]])
        nv = np.concatenate([[np.interp(-1.0, cx, cv)], cv[inner], [np.interp(1.0, cx, cv)]])
        nv = nv + d[i + 1] * nx
        bx, bv = _prune(nx, nv)
    k = int(np.argmax(bv))
    f = np.empty(n)
    f[-1] = bx[k]
    for i in range(n - 2, -1, -1):
        f[i] = min(max(argmaxes[i], f[i + 1] - gaps[i]), f[i + 1] + gaps[i])
    return float(np.dot(f, d)), f


def _prune(x, v):
    """Drop duplicate and collinear breakpoints."""
    if len(x) <= 2:
        return x, v
    keep = np.ones(len(x), dtype=bool)
    dx = np.diff(x)
    keep[1:] &= dx > 1e-15
    x, v = x[keep], v[keep]
    if len(x) <= 2:
        return x, v
    s = np.diff(v) / np.diff(x)
    mid = np.abs(np.diff(s)) > 1e-13 * (1 + np.abs(s[1:]))
    keep = np.concatenate([[True], mid, [True]])
    return x[keep], v[keep]


def flat_distance(m: DiscreteMeasure, n: DiscreteMeasure) -> Tuple[float, TestFunction]:
    """Flat (bounded-Lipschitz) distance with an optimal witness test function."""
    diff = canonicalize(m - n)
    if len(diff) == 0:
        pts = np.array([0.0, 1.0])
        return 0.0, TestFunction(pts, np.zeros(2), kind="flat")
    value, f = _flat_dp(diff.positions, diff.weights)
    nodes, vals = diff.positions, f
    if len(nodes) == 1:
        nodes = np.array([nodes[0], nodes[0] + 1.0])
        vals = np.array([f[0], f[0]])
    return value, TestFunction(nodes, vals, kind="flat")


# --------------------------------------------------------------------------
# Z norm: dual of C^{1+alpha}, grid LP

def build_grid(positions: np.ndarray, budget: NormBudget) -> np.ndarray:
    """Uniform grid over the support hull widened by max(margin_min, margin_frac * width).

    The span depends only on the support, so grids with 2^k + 1 nodes over the
    same measure are nested under refinement.  The left end is clamped at 0.
    """
    lo, hi = float(np.min(positions)), float(np.max(positions))
    margin = max(budget.margin_min, budget.margin_frac * (hi - lo))
    return np.linspace(max(0.0, lo - margin), hi + margin, budget.nodes)


def interpolation_weights(t: np.ndarray, x: np.ndarray, d: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Coefficients (F, G) with sum_k d_k f(x_k) = F . f + G . g for the
    piecewise-quadratic reconstruction from nodal values f and slopes g."""
    n = len(t)
    i = np.clip(np.searchsorted(t, x, side="right") - 1, 0, n - 2)
    dt = t[i + 1] - t[i]
    tau = x - t[i]
    q = tau ** 2 / (2 * dt)
    F = np.zeros(n)
    G = np.zeros(n)
    np.add.at(F, i, d)
    np.add.at(G, i, d * (tau - q))
    np.add.at(G, i + 1, d * q)
    return F, G


def _holder_pairs(n: int, window: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    if window is None or window >= n - 1:
        i, j = np.triu_indices(n, k=1)
        return i, j
    ii, jj = [], []
    for k in range(1, window + 1):
        idx = np.arange(n - k)
        ii.append(idx)
        jj.append(idx + k)
    return np.concatenate(ii), np.concatenate(jj)


@dataclass
class ZResult:
    value: float
    witness: TestFunction
    nodes: int
    pairs: int
    rounds: int


class _ZProgram:
    """The grid LP held in a HiGHS instance, so Holder rows can be added and
    the problem re-solved from the previous basis (dual simplex warm start)."""

    def __init__(self, t: np.ndarray, cost_f: np.ndarray, cost_g: np.ndarray, alpha: float,
                 tol: float = 1e-10):
        n = len(t)
        self.t, self.alpha, self.n = t, alpha, n
        self.F, self.G = 0, n
        self.C1, self.C2, self.C3 = 2 * n, 2 * n + 1, 2 * n + 2
        nv = 2 * n + 3
        cost = np.concatenate([-cost_f, -cost_g, np.zeros(3)])
        inf = highspy.kHighsInf
        h = highspy.Highs()
        h.setOptionValue("output_flag", False)
        h.setOptionValue("primal_feasibility_tolerance", tol)
        h.setOptionValue("dual_feasibility_tolerance", tol)
        h.setOptionValue("simplex_strategy", 1)  # dual simplex
        h.setOptionValue("threads", 1)
        h.setOptionValue("random_seed", 0)
        lower = np.concatenate([np.full(2 * n, -inf), np.zeros(3)])
        upper = np.full(nv, inf)
        h.addVars(nv, lower, upper)
        self._h = h
        h.changeColsCost(nv, np.arange(nv, dtype=np.int32), cost)

        dt = np.diff(t)
        r = np.arange(n - 1)
        # f_{i+1} - f_i - (g_i + g_{i+1}) dt_i / 2 = 0
        cols = np.stack([r + 1, r, self.G + r, self.G + r + 1], axis=1)
        vals = np.stack([np.ones(n - 1), -np.ones(n - 1), -0.5 * dt, -0.5 * dt], axis=1)
        self._add(cols, vals, np.zeros(n - 1), np.zeros(n - 1))
        k = np.arange(n)
        # |f_k| <= c1 and |g_k| <= c2 as  -inf < v - c <= 0  and  0 <= v + c < inf
        for var, cvar in ((self.F, self.C1), (self.G, self.C2)):
            cc = np.full(n, cvar)
            self._add(np.stack([var + k, cc], 1), np.stack([np.ones(n), -np.ones(n)], 1),
                      np.full(n, -inf), np.zeros(n))
            self._add(np.stack([var + k, cc], 1), np.stack([np.ones(n), np.ones(n)], 1),
                      np.zeros(n), np.full(n, inf))
        # Bezier middle control point f_i + g_i dt_i / 2 of each cell: bounding it
        # by c1 bounds the whole quadratic piece, and the bound survives subdivision
        cc = np.full(n - 1, self.C1)
        cols = np.stack([r, self.G + r, cc], 1)
        self._add(cols, np.stack([np.ones(n - 1), 0.5 * dt, -np.ones(n - 1)], 1),
                  np.full(n - 1, -inf), np.zeros(n - 1))
        self._add(cols, np.stack([np.ones(n - 1), 0.5 * dt, np.ones(n - 1)], 1),
                  np.zeros(n - 1), np.full(n - 1, inf))
        self._add(np.array([[self.C1, self.C2, self.C3]]), np.ones((1, 3)),
                  np.array([-inf]), np.array([1.0]))
        self.pairs = 0

    def _add(self, cols, vals, lo, up):
        m, w = cols.shape
        starts = np.arange(0, m * w, w, dtype=np.int32)
        self._h.addRows(m, lo, up, m * w, starts, cols.ravel().astype(np.int32), vals.ravel())

    def add_pairs(self, pi: np.ndarray, pj: np.ndarray):
        if len(pi) == 0:
            return
        inf = highspy.kHighsInf
        w = np.abs(self.t[pj] - self.t[pi]) ** self.alpha
        m = len(pi)
        c3 = np.full(m, self.C3)
        cols = np.stack([self.G + pi, self.G + pj, c3], 1)
        self._add(cols, np.stack([np.ones(m), -np.ones(m), -w], 1), np.full(m, -inf), np.zeros(m))
        self._add(cols, np.stack([np.ones(m), -np.ones(m), w], 1), np.zeros(m), np.full(m, inf))
        self.pairs += m

    def solve(self):
        h = self._h
        h.run()
        if h.getModelStatus() != highspy.HighsModelStatus.kOptimal:
            raise RuntimeError(f"Z-norm LP failed ({h.modelStatusToString(h.getModelStatus())}); "
                               "this indicates an internal bug")
        x = np.asarray(h.getSolution().col_value)
        n = self.n
        value = -h.getInfo().objective_function_value
        return value, x[:n], x[n:2 * n], (float(x[self.C1]), float(x[self.C2]), float(x[self.C3]))


def z_distance(m: DiscreteMeasure, n: DiscreteMeasure, budget: Optional[NormBudget] = None,
               grid: Optional[np.ndarray] = None, max_rounds: int = 200,
               return_info: bool = False):
    """Lower bound of the (C^{1+alpha})* distance between ``m`` and ``n`` on a grid.

    Atoms need not be grid nodes: their values come from the piecewise-quadratic
    reconstruction, which is itself an admissible test function, so the value
    is a lower bound that never decreases under nested grid refinement.

    Holder constraints start from a band of ``window`` neighbours (all pairs
    when ``window`` is None and lazy generation is off).  With
    ``budget.lazy_pairs`` every node's most violated pair is added and the LP
    re-solved until no pair is violated, so the returned value equals the
    all-pairs grid optimum.
    """
    budget = budget or NormBudget.z()
    if budget.kind != "z":
        raise ValueError("z_distance needs a budget of kind 'z'")
    diff = canonicalize(m - n)
    if len(diff) == 0:
        t = np.array([0.0, 1.0])
        tf = TestFunction(t, np.zeros(2), np.zeros(2), kind="z", alpha=budget.alpha,
                          budget=(0.0, 0.0, 0.0), grid_info="trivial")
        res = ZResult(0.0, tf, 0, 0, 0)
        return res if return_info else (0.0, tf)
    t = build_grid(diff.positions, budget) if grid is None else np.asarray(grid, dtype=float)
    if np.any(np.diff(t) <= 0):
        raise GridError("grid nodes must be strictly increasing")
    if len(t) < 3:
        raise GridError("grid needs at least 3 nodes")
    if diff.positions[0] < t[0] or diff.positions[-1] > t[-1]:
        raise GridError(f"grid [{t[0]:g}, {t[-1]:g}] does not cover the support "
                        f"[{diff.positions[0]:g}, {diff.positions[-1]:g}]")
    cost_f, cost_g = interpolation_weights(t, diff.positions, diff.weights)
    N = len(t)
    window = budget.effective_window(N)
    pi, pj = _holder_pairs(N, window)
    full = window is None or window >= N - 1
    lp = _ZProgram(t, cost_f, cost_g, budget.alpha)
    lp.add_pairs(pi, pj)
    rounds = 0
    while True:
        rounds += 1
        value, f, g, cs = lp.solve()
        if full or not budget.lazy_pairs or rounds >= max_rounds:
            break
        new_i, new_j = _violated_pairs(t, g, cs[2], budget.alpha, 1e-10)
        if len(new_i) == 0:
            break
        lp.add_pairs(new_i, new_j)
    info = (f"nodes={N}, span=[{t[0]:.6g}, {t[-1]:.6g}], window={window if not full else 'all'}, "
            f"lazy={budget.lazy_pairs}, pairs={lp.pairs}, rounds={rounds}")
    tf = TestFunction(t, f, g, kind="z", alpha=budget.alpha, budget=cs, grid_info=info)
    value = max(value, 0.0)
    res = ZResult(value, tf, N, lp.pairs, rounds)
    return res if return_info else (value, tf)


def _violated_pairs(t, g, c3, alpha, tol):
    """For every node, its most violated Holder partner (if any).

    Returns index pairs ``i < j``; an empty result certifies that ``g``
    satisfies the Holder constraint for every pair of nodes.
    """
    n = len(t)
    out = set()
    block = max(1, 4_000_000 // max(n, 1))
    for s in range(0, n, block):
        e = min(n, s + block)
        viol = np.abs(g[s:e, None] - g[None, :]) - c3 * np.abs(t[s:e, None] - t[None, :]) ** alpha
        j = np.argmax(viol, axis=1)
        rows = np.flatnonzero(viol[np.arange(e - s), j] > tol)
        for r in rows:
            a, b = s + int(r), int(j[r])
            out.add((min(a, b), max(a, b)))
    if not out:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    arr = np.array(sorted(out))
    return arr[:, 0], arr[:, 1]


def distance(m: DiscreteMeasure, n: DiscreteMeasure, budget: NormBudget) -> float:
    if budget.kind == "flat":
        return flat_distance(m, n)[0]
    return z_distance(m, n, budget)[0]


def wasserstein1(m: DiscreteMeasure, n: DiscreteMeasure, rtol: float = 1e-12) -> float:
    """W1 on the line; ``inf`` when total masses differ."""
    mm, nm = m.mass(), n.mass()
    if abs(mm - nm) > rtol * max(1.0, abs(mm), abs(nm)):
        return math.inf
    diff = canonicalize(m - n)
    if len(diff) < 2:
        return 0.0
    cdf = np.cumsum(diff.weights)[:-1]
    return float(np.sum(np.abs(cdf) * np.diff(diff.positions)))


# --------------------------------------------------------------------------
# CSV

def read_measure_csv(path: Union[str, Path]) -> DiscreteMeasure:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["position", "weight"]:
            raise MeasureError(f"{path}: expected header 'position,weight'")
        xs, ws = [], []
        for row in reader:
            row = {k.strip(): v for k, v in row.items()}
            xs.append(float(row["position"]))
            ws.append(float(row["weight"]))
    return DiscreteMeasure(xs, ws)


def write_measure_csv(m: DiscreteMeasure, path: Union[str, Path]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "weight"])
        for x, v in zip(m.positions, m.weights):
            w.writerow([repr(float(x)), repr(float(v))])
