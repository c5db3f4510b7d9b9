"""Scalar expression language for model functions and kernels.

Expressions are small immutable ASTs over the variables ``x``, ``y`` and
``h``.  They evaluate vectorised through numpy and differentiate
symbolically with light constant folding.

    >>> e = parse_expr("exp(-x^2)")
    >>> float(e.evaluate(x=0.0))
    1.0
    >>> str(differentiate(parse_expr("x*y"), "y"))
    'x'
"""
from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

VARIABLES = ("x", "y", "h")
FUNCTIONS = ("exp", "log", "sin", "cos", "tanh", "sqrt")


class ExprError(ValueError):
    """Raised for syntax errors, unknown identifiers and arity mismatches."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NonDifferentiableError(ValueError):
    pass


# --------------------------------------------------------------------------
# AST

@dataclass(frozen=True)
class Expr:
    def evaluate(self, **env):
        raise NotImplementedError

    def variables(self) -> frozenset:
        raise NotImplementedError

    def __str__(self):
        return pretty(self)

    def __call__(self, **env):
        return self.evaluate(**env)


@dataclass(frozen=True)
class Num(Expr):
    value: float

    def evaluate(self, **env):
        return np.float64(self.value)

    def variables(self):
        return frozenset()


@dataclass(frozen=True)
class Var(Expr):
    name: str

    def evaluate(self, **env):
        try:
            return np.asarray(env[self.name], dtype=float)
        except KeyError:
            raise ExprError(f"no value bound for variable {self.name!r}") from None

    def variables(self):
        return frozenset([self.name])


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr

    def evaluate(self, **env):
        return -self.arg.evaluate(**env)

    def variables(self):
        return self.arg.variables()


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def evaluate(self, **env):
        a = self.left.evaluate(**env)
        b = self.right.evaluate(**env)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.op == "+":
                return a + b
            if self.op == "-":
                return a - b
            if self.op == "*":
                return a * b
            if self.op == "/":
                return np.true_divide(a, b)
        raise ExprError(f"unknown operator {self.op!r}")

    def variables(self):
        return self.left.variables() | self.right.variables()


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: float

    def evaluate(self, **env):
        b = self.base.evaluate(**env)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if float(self.exponent).is_integer():
                return np.power(b, int(self.exponent)) if self.exponent >= 0 else 1.0 / np.power(b, -int(self.exponent))
            return np.power(b, self.exponent)

    def variables(self):
        return self.base.variables()


_NUMPY_FUNCS: Dict[str, Callable] = {
    "exp": np.exp,
    "log": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "sqrt": np.sqrt,
}


@dataclass(frozen=True)
class Call(Expr):
    func: str
    arg: Expr

    def evaluate(self, **env):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return _NUMPY_FUNCS[self.func](self.arg.evaluate(**env))

    def variables(self):
        return self.arg.variables()


# --------------------------------------------------------------------------
# Parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


def _tokenize(source: str) -> List[Tuple[str, str, int]]:
    tokens = []
    pos = 0
    raw = source.encode("utf-8")
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            start = pos + (len(source[pos:]) - len(source[pos:].lstrip()))
            offset = len(source[:start].encode("utf-8"))
            raise ExprError(f"unexpected character {source[start]!r}", offset)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), len(source[:start].encode("utf-8"))))
        pos = m.end()
    tokens.append(("end", "", len(raw)))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, off = self.take()
        if text != value:
            raise ExprError(f"expected {value!r}, found {text or 'end of input'!r}", off)

    def parse(self) -> Expr:
        e = self.expr()
        kind, text, off = self.peek()
        if kind != "end":
            raise ExprError(f"unexpected token {text!r}", off)
        return e

    def expr(self):
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.term())
        return e

    def term(self):
        e = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.factor())
        return e

    def factor(self):
        if self.peek()[1] == "-" and self.peek()[0] == "op":
            self.take()
            inner = self.factor()
            # keeps negative literals printable and re-parseable to the same tree
            return Num(-inner.value) if isinstance(inner, Num) else Neg(inner)
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            sign = 1.0
            if self.peek()[1] in ("-", "+") and self.peek()[0] == "op":
                sign = -1.0 if self.take()[1] == "-" else 1.0
            kind, text, off = self.take()
            if kind != "num":
                raise ExprError("exponent must be a numeric constant", off)
            return Pow(base, sign * float(text))
        return base

    def atom(self):
        kind, text, off = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "ident":
            if text in FUNCTIONS:
                if self.peek()[1] != "(":
                    raise ExprError(f"function {text!r} expects one parenthesised argument", self.peek()[2])
                self.take()
                arg = self.expr()
                if self.peek()[1] == ",":
                    raise ExprError(f"function {text!r} takes exactly one argument", self.peek()[2])
                self.expect(")")
                return Call(text, arg)
            if text in VARIABLES:
                if self.peek()[1] == "(":
                    raise ExprError(f"variable {text!r} is not callable", self.peek()[2])
                return Var(text)
            raise ExprError(f"unknown identifier {text!r}", off)
        if text == "(":
            e = self.expr()
            self.expect(")")
            return e
        raise ExprError(f"unexpected token {text or 'end of input'!r}", off)


def parse_expr(source: str) -> Expr:
    """Parse ``source`` into an expression tree."""
    if "," in source:
        off = len(source[: source.index(",")].encode("utf-8"))
        raise ExprError("functions take exactly one argument", off)
    return _Parser(source).parse()


# --------------------------------------------------------------------------
# Printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_num(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def to_source(e: Expr) -> str:
    """Fully parenthesised source that re-parses to an equal tree."""
    if isinstance(e, Num):
        s = _fmt_num(e.value)
        return f"({s})" if e.value < 0 else s
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{to_source(e.arg)})"
    if isinstance(e, BinOp):
        return f"({to_source(e.left)} {e.op} {to_source(e.right)})"
    if isinstance(e, Pow):
        return f"{_atomic(e.base)}^{_fmt_num(e.exponent)}"
    if isinstance(e, Call):
        return f"{e.func}({pretty(e.arg)})"
    raise TypeError(e)


def _atomic(e: Expr) -> str:
    s = to_source(e)
    if isinstance(e, (Var, Call)) or (isinstance(e, Num) and e.value >= 0):
        return s
    if s.startswith("(") and _balanced_outer(s):
        return s
    return f"({s})"


def _balanced_outer(s: str) -> bool:
    depth = 0
    for i, ch in enumerate(s):
        depth += ch == "("
        depth -= ch == ")"
        if depth == 0 and i < len(s) - 1:
            return False
    return True


def _strip_outer(s: str) -> str:
    while s.startswith("(") and _balanced_outer(s):
        s = s[1:-1]
    return s


def pretty(e: Expr) -> str:
    return _strip_outer(to_source(e))



# --------------------------------------------------------------------------
# Simplification (constant folding only) and differentiation

def _is_num(e, v=None):
    return isinstance(e, Num) and (v is None or e.value == v)


def add(a: Expr, b: Expr) -> Expr:
    if _is_num(a) and _is_num(b):
        return Num(a.value + b.value)
    if _is_num(a, 0.0):
        return b
    if _is_num(b, 0.0):
        return a
    return BinOp("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is_num(a) and _is_num(b):
        return Num(a.value - b.value)
    if _is_num(b, 0.0):
        return a
    if _is_num(a, 0.0):
        return neg(b)
    return BinOp("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if _is_num(a) and _is_num(b):
        return Num(a.value * b.value)
    if _is_num(a, 0.0) or _is_num(b, 0.0):
        return Num(0.0)
    if _is_num(a, 1.0):
        return b
    if _is_num(b, 1.0):
        return a
    return BinOp("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_num(a) and _is_num(b) and b.value != 0:
        return Num(a.value / b.value)
    if _is_num(a, 0.0):
        return Num(0.0)
    if _is_num(b, 1.0):
        return a
    return BinOp("/", a, b)


def neg(a: Expr) -> Expr:
    if _is_num(a):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def power(a: Expr, p: float) -> Expr:
    if p == 0:
        return Num(1.0)
    if p == 1:
        return a
    if _is_num(a):
        try:
            return Num(float(a.value) ** p)
        except (ZeroDivisionError, OverflowError):
            pass
    return Pow(a, p)


def differentiate(e: Expr, var: str) -> Expr:
    """Symbolic derivative of ``e`` with respect to ``var``."""
    if var not in VARIABLES:
        raise ExprError(f"unknown variable {var!r}")
    if var not in e.variables():
        return Num(0.0)
    if isinstance(e, Num):
        return Num(0.0)
    if isinstance(e, Var):
        return Num(1.0 if e.name == var else 0.0)
    if isinstance(e, Neg):
        return neg(differentiate(e.arg, var))
    if isinstance(e, BinOp):
        da, db = differentiate(e.left, var), differentiate(e.right, var)
        if e.op == "+":
            return add(da, db)
        if e.op == "-":
            return sub(da, db)
        if e.op == "*":
            return add(mul(da, e.right), mul(e.left, db))
        if e.op == "/":
            # (a/b)' = a'/b - a b' / b^2
            return sub(div(da, e.right), div(mul(e.left, db), power(e.right, 2.0)))
    if isinstance(e, Pow):
        inner = differentiate(e.base, var)
        return mul(mul(Num(e.exponent), power(e.base, e.exponent - 1.0)), inner)
    if isinstance(e, Call):
        inner = differentiate(e.arg, var)
        u = e.arg
        if e.func == "exp":
            outer = e
        elif e.func == "log":
            outer = div(Num(1.0), u)
        elif e.func == "sin":
            outer = Call("cos", u)
        elif e.func == "cos":
            outer = neg(Call("sin", u))
        elif e.func == "tanh":
            outer = sub(Num(1.0), power(Call("tanh", u), 2.0))
        elif e.func == "sqrt":
            outer = div(Num(0.5), e)
        else:
            raise ExprError(f"unknown function {e.func!r}")
        return mul(outer, inner)
    raise TypeError(e)


def _codegen(e: Expr, names: Tuple[str, ...], consts: List[float]) -> str:
    if isinstance(e, Num):
        consts.append(float(e.value))
        return f"_c[{len(consts) - 1}]"
    if isinstance(e, Var):
        return f"_a{names.index(e.name)}"
    if isinstance(e, Neg):
        return f"(-{_codegen(e.arg, names, consts)})"
    if isinstance(e, BinOp):
        a, b = _codegen(e.left, names, consts), _codegen(e.right, names, consts)
        return f"_np.true_divide({a}, {b})" if e.op == "/" else f"({a} {e.op} {b})"
    if isinstance(e, Pow):
        b = _codegen(e.base, names, consts)
        p = float(e.exponent)
        if p.is_integer():
            return f"_np.power({b}, {int(p)})" if p >= 0 else f"(1.0 / _np.power({b}, {-int(p)}))"
        return f"_np.power({b}, {p!r})"
    if isinstance(e, Call):
        return f"_np.{_NUMPY_FUNCS[e.func].__name__}({_codegen(e.arg, names, consts)})"
    raise ExprError(f"cannot compile {type(e).__name__}")


def as_function(e: Expr, *names: str) -> Callable:
    """Positional, broadcasting numpy callable of the given variables.

    The expression is compiled once to a numpy lambda; results agree with
    :meth:`Expr.evaluate` bit for bit.
    """
    missing = e.variables() - set(names)
    if missing:
        raise ExprError(f"expression uses {sorted(missing)} but only {names} are bound")
    consts: List[float] = []
    body = _codegen(e, tuple(names), consts)
    params = ", ".join(f"_a{i}" for i in range(len(names)))
    raw = eval(f"lambda {params}: {body}", {"_np": np, "_c": [np.float64(c) for c in consts]})

    def f(*args):
        args = [np.asarray(a, dtype=float) for a in args]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = np.asarray(raw(*args), dtype=float)
        shapes = {a.shape for a in args}
        shape = shapes.pop() if len(shapes) == 1 else np.broadcast_shapes(*[a.shape for a in args])
        if out.shape == shape:
            return out if shape else float(out)
        return np.full(shape, out) if shape else float(out)

    f.expr = e
    f.names = names
    return f


def fd_check(e: Expr, var: str, points: Dict[str, np.ndarray], step: float = 1e-5,
             rtol: float = 1e-5) -> float:
    """Largest relative gap between the symbolic derivative and a centred difference."""
    d = differentiate(e, var)
    plus = dict(points)
    minus = dict(points)
    base = np.asarray(points[var], dtype=float)
    plus[var] = base + step
    minus[var] = base - step
    fd = (np.asarray(e.evaluate(**plus)) - np.asarray(e.evaluate(**minus))) / (2 * step)
    sym = np.broadcast_to(np.asarray(d.evaluate(**points), dtype=float), fd.shape)
    if not (np.all(np.isfinite(sym)) and np.all(np.isfinite(fd))):
        raise NonDifferentiableError(f"non-finite derivative of {e} in {var}")
    return float(np.max(np.abs(sym - fd) / (1.0 + np.abs(sym))))


# --------------------------------------------------------------------------
# Model containers

def _coerce(e: Union[str, Expr, float]) -> Expr:
    if isinstance(e, Expr):
        return e
    if isinstance(e, (int, float)):
        return Num(float(e))
    return parse_expr(e)


def is_affine_in_h(e: Expr) -> bool:
    d2 = differentiate(differentiate(e, "h"), "h")
    return isinstance(d2, Num) and d2.value == 0.0


@dataclass(frozen=True)
class ModelTriple:
    """Birth ``a``, growth ``b`` and mortality/growth rate ``c`` as functions of (h, x)."""

    a: Expr
    b: Expr
    c: Expr
    h_range: Tuple[float, float] = (-0.5, 0.5)
    x_max: float = 10.0

    def __init__(self, a, b, c, h_range=(-0.5, 0.5), x_max=10.0):
        object.__setattr__(self, "a", _coerce(a))
        object.__setattr__(self, "b", _coerce(b))
        object.__setattr__(self, "c", _coerce(c))
        object.__setattr__(self, "h_range", (float(h_range[0]), float(h_range[1])))
        object.__setattr__(self, "x_max", float(x_max))
        for name in "abc":
            bad = getattr(self, name).variables() - {"h", "x"}
            if bad:
                raise ExprError(f"model function {name} may only use h and x, found {sorted(bad)}")

    @property
    def affine_in_h(self) -> Dict[str, bool]:
        return {k: is_affine_in_h(getattr(self, k)) for k in "abc"}

    def depends_on_h(self) -> bool:
        return any("h" in getattr(self, k).variables() for k in "abc")

    def funcs(self) -> "ModelFunctions":
        return ModelFunctions.from_triple(self)

    def at(self, h: float) -> "Coefficients":
        f = self.funcs()
        return Coefficients(
            a=lambda x: f.a(h, x), b=lambda x: f.b(h, x), c=lambda x: f.c(h, x),
            b_x=lambda x: f.b_x(h, x))

    def __str__(self):
        return f"a={self.a}; b={self.b}; c={self.c}"


@dataclass
class ModelFunctions:
    """Compiled (h, x) callables of a model and its first partials."""

    a: Callable
    b: Callable
    c: Callable
    a_x: Callable
    b_x: Callable
    c_x: Callable
    a_h: Callable
    b_h: Callable
    c_h: Callable

    @classmethod
    def from_triple(cls, m: ModelTriple):
        kw = {}
        for k in "abc":
            e = getattr(m, k)
            kw[k] = as_function(e, "h", "x")
            kw[k + "_x"] = as_function(differentiate(e, "x"), "h", "x")
            kw[k + "_h"] = as_function(differentiate(e, "h"), "h", "x")
        return cls(**kw)


@dataclass
class Coefficients:
    """Model functions of x alone (h fixed, or coefficients frozen at a measure)."""

    a: Callable
    b: Callable
    c: Callable
    b_x: Optional[Callable] = None


@dataclass(frozen=True)
class Kernel:
    """One kernel nonlinearity f(x, mu) = F(x, int K(x, y) dmu(y))."""

    F: Expr
    K: Expr

    def __init__(self, F, K="0"):
        object.__setattr__(self, "F", _coerce(F))
        object.__setattr__(self, "K", _coerce(K))
        for name, e in (("F", self.F), ("K", self.K)):
            bad = e.variables() - {"x", "y"}
            if bad:
                raise ExprError(f"kernel part {name} may only use x and y, found {sorted(bad)}")


@dataclass(frozen=True)
class KernelNonlinearity:
    """Perturbed nonlinearity f^h(x, mu) = f0(x, mu) + h fp(x, mu)."""

    base: Kernel
    pert: Kernel = field(default_factory=lambda: Kernel("0", "0"))

    @classmethod
    def of(cls, F0="0", K0="0", FP="0", KP="0"):
        return cls(Kernel(F0, K0), Kernel(FP, KP))

    def depends_on_measure(self) -> bool:
        return any(
            (not (isinstance(k.K, Num) and k.K.value == 0.0)) and "y" in k.F.variables()
            for k in (self.base, self.pert))


@dataclass(frozen=True)
class NonlinearModel:
    a: KernelNonlinearity
    b: KernelNonlinearity
    c: KernelNonlinearity
    h_range: Tuple[float, float] = (-0.5, 0.5)
    x_max: float = 10.0


# --------------------------------------------------------------------------
# Validation

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    witness: Optional[Dict[str, float]] = None


@dataclass
class ValidationReport:
    checks: List[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> List[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def lines(self) -> List[str]:
        out = []
        for c in self.checks:
            w = "" if c.witness is None else " at " + ", ".join(f"{k}={v:.6g}" for k, v in c.witness.items())
            out.append(f"{c.name}: {'pass' if c.passed else 'FAIL'}{w}{(' - ' + c.detail) if c.detail else ''}")
        return out


@dataclass(frozen=True)
class ValidationGrid:
    x_max: float = 10.0
    h_range: Tuple[float, float] = (-0.5, 0.5)
    nx: int = 513
    nh: int = 33
    bound: float = 1e8
    mass_bound: float = 10.0
    ny: int = 33

    def mesh(self):
        xs = np.linspace(0.0, self.x_max, self.nx)
        hs = np.linspace(self.h_range[0], self.h_range[1], self.nh)
        H, X = np.meshgrid(hs, xs, indexing="ij")
        return H, X


def _worst(values, H, X, mask_bad, key="x"):
    idx = np.unravel_index(int(np.argmax(mask_bad)), mask_bad.shape)
    return {"h": float(H[idx]), "x": float(X[idx]), "value": float(np.asarray(values)[idx])}


@functools.lru_cache(maxsize=512)
def _compiled(e: Expr, names: Tuple[str, ...]) -> Callable:
    return as_function(e, *names)


def _eval_grid(e: Expr, **env):
    names = tuple(sorted(env))
    out = np.asarray(_compiled(e, names)(*(env[k] for k in names)), dtype=float)
    return np.broadcast_to(out, np.broadcast(*env.values()).shape)


def validate_model(m, grid: Optional[ValidationGrid] = None) -> ValidationReport:
    """Check the standing assumptions of a model on a finite grid."""
    if isinstance(m, ModelTriple):
        grid = grid or ValidationGrid(x_max=m.x_max, h_range=m.h_range)
        return _validate_triple(m, grid)
    if isinstance(m, NonlinearModel):
        grid = grid or ValidationGrid(x_max=m.x_max, h_range=m.h_range)
        return _validate_nonlinear(m, grid)
    if isinstance(m, KernelNonlinearity):
        grid = grid or ValidationGrid()
        return ValidationReport(_kernel_checks("f", m, grid))
    raise TypeError(f"cannot validate {type(m).__name__}")


def _validate_triple(m: ModelTriple, grid: ValidationGrid) -> ValidationReport:
    H, X = grid.mesh()
    checks = []
    vals = {}
    for k in "abc":
        v = _eval_grid(getattr(m, k), h=H, x=X)
        vals[k] = v
        bad = ~np.isfinite(v)
        checks.append(CheckResult(f"finite:{k}", not bad.any(), str(getattr(m, k)),
                                  _worst(v, H, X, bad) if bad.any() else None))
    a = vals["a"]
    bad = a < 0
    checks.append(CheckResult("A2", not bad.any(), "a(h,x) >= 0", _worst(a, H, X, bad) if bad.any() else None))
    b0 = _eval_grid(m.b, h=H[:, :1], x=X[:, :1])
    bad = ~(b0 > 0)
    checks.append(CheckResult("A3", not bad.any(), "b(h,0) > 0",
                              _worst(b0, H[:, :1], X[:, :1], bad) if bad.any() else None))
    ok, detail, wit = True, "a, b, c and x/h partials bounded", None
    for k in "abc":
        e = getattr(m, k)
        for d in ("", "x", "h"):
            ee = differentiate(e, d) if d else e
            v = _eval_grid(ee, h=H, x=X)
            bad = ~np.isfinite(v) | (np.abs(v) > grid.bound)
            if bad.any() and ok:
                ok = False
                detail = f"{k}{'_' + d if d else ''} unbounded or not differentiable"
                wit = _worst(v, H, X, bad)
    checks.append(CheckResult("B2", ok, detail, wit))
    return ValidationReport(checks)


def _kernel_checks(label: str, f: KernelNonlinearity, grid: ValidationGrid) -> List[CheckResult]:
    xs = np.linspace(0.0, grid.x_max, grid.nx)
    ys = np.linspace(0.0, grid.x_max, grid.nx)
    checks = []
    ok, detail, wit = True, "F, K and first partials bounded; K second partials bounded", None
    for part, kern in (("0", f.base), ("p", f.pert)):
        XX, YY = np.meshgrid(xs[:: max(1, grid.nx // 129)], ys[:: max(1, grid.nx // 129)], indexing="ij")
        exprs = [("K", kern.K)] + [(f"K_{v}", differentiate(kern.K, v)) for v in "xy"] + \
                [(f"K_{v}{w}", differentiate(differentiate(kern.K, v), w)) for v in "xy" for w in "xy"]
        for name, e in exprs:
            v = _eval_grid(e, x=XX, y=YY)
            bad = ~np.isfinite(v) | (np.abs(v) > grid.bound)
            if bad.any() and ok:
                idx = np.unravel_index(int(np.argmax(bad)), bad.shape)
                ok, detail = False, f"{label}{part}:{name} unbounded"
                wit = {"x": float(XX[idx]), "y": float(YY[idx])}
        lo, hi = _integral_range(kern, xs, grid.mass_bound)
        yv = np.linspace(0, 1, grid.ny)
        XF = np.repeat(xs[:, None], grid.ny, axis=1)
        YF = lo[:, None] + (hi - lo)[:, None] * yv[None, :]
        for name, e in [("F", kern.F)] + [(f"F_{v}", differentiate(kern.F, v)) for v in "xy"]:
            v = _eval_grid(e, x=XF, y=YF)
            bad = ~np.isfinite(v) | (np.abs(v) > grid.bound)
            if bad.any() and ok:
                idx = np.unravel_index(int(np.argmax(bad)), bad.shape)
                ok, detail = False, f"{label}{part}:{name} unbounded"
                wit = {"x": float(XF[idx]), "y": float(YF[idx])}
    checks.append(CheckResult(f"N1N2:{label}", ok, detail, wit))
    return checks


def _integral_range(kern: Kernel, xs, mass_bound):
    """Range of int K(x, y) dmu(y) over nonnegative mu with mass <= mass_bound."""
    ys = np.linspace(0.0, xs[-1] if len(xs) else 1.0, 257)
    K = _eval_grid(kern.K, x=xs[:, None], y=ys[None, :])
    K = np.where(np.isfinite(K), K, 0.0)
    lo = mass_bound * np.minimum(0.0, K.min(axis=1))
    hi = mass_bound * np.maximum(0.0, K.max(axis=1))
    return lo, hi


def _extreme_f(f: KernelNonlinearity, xs, grid: ValidationGrid, hs, want_min=True):
    """min (or max) over admissible integral values of f^h(x, .) for each (h, x)."""
    out = []
    parts = []
    for kern in (f.base, f.pert):
        lo, hi = _integral_range(kern, xs, grid.mass_bound)
        yv = np.linspace(0, 1, grid.ny)
        YF = lo[:, None] + (hi - lo)[:, None] * yv[None, :]
        v = _eval_grid(kern.F, x=np.repeat(xs[:, None], grid.ny, axis=1), y=YF)
        parts.append((v.min(axis=1), v.max(axis=1)))
    (b_min, b_max), (p_min, p_max) = parts
    for h in hs:
        if want_min:
            out.append(b_min + np.where(h >= 0, h * p_min, h * p_max))
        else:
            out.append(b_max + np.where(h >= 0, h * p_max, h * p_min))
    return np.array(out)


def _validate_nonlinear(m: NonlinearModel, grid: ValidationGrid) -> ValidationReport:
    checks = []
    for name in "abc":
        checks += _kernel_checks(name, getattr(m, name), grid)
    xs = np.linspace(0.0, grid.x_max, grid.nx)
    hs = np.linspace(grid.h_range[0], grid.h_range[1], grid.nh)
    amin = _extreme_f(m.a, xs, grid, hs, want_min=True)
    bad = amin < 0
    wit = None
    if bad.any():
        i, j = np.unravel_index(int(np.argmax(bad)), bad.shape)
        wit = {"h": float(hs[i]), "x": float(xs[j]), "value": float(amin[i, j])}
    checks.append(CheckResult("N4", not bad.any(), "a^h(x, mu) >= 0", wit))
    bmin = _extreme_f(m.b, xs[:1], grid, hs, want_min=True)[:, 0]
    bad = ~(bmin > 0)
    wit = None
    if bad.any():
        i = int(np.argmax(bad))
        wit = {"h": float(hs[i]), "x": 0.0, "value": float(bmin[i])}
    checks.append(CheckResult("N3", not bad.any(), "b^h(0, mu) > 0", wit))
    return ValidationReport(checks)


# --------------------------------------------------------------------------
# Evaluation of kernel nonlinearities and the total-variation cutoff

def kernel_integral(K: Expr, x, positions, weights):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if len(positions) == 0:
        return np.zeros_like(x)
    if isinstance(K, Num):
        return np.full_like(x, K.value * float(np.sum(weights)))
    vals = _eval_grid(K, x=x[:, None], y=np.asarray(positions, dtype=float)[None, :])
    return vals @ np.asarray(weights, dtype=float)


def tv_cutoff_factor(tv: float, threshold: float) -> float:
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    return 1.0 if tv <= threshold else math.exp(-(tv - threshold))


def tv_cutoff_wrap(f: Callable, threshold: float) -> Callable:
    """Damp ``f(x, mu)`` by exp(-(|mu|_TV - threshold)) above the threshold."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")

    def wrapped(x, mu):
        return f(x, mu) * tv_cutoff_factor(mu.tv_norm(), threshold)

    wrapped.threshold = threshold
    return wrapped


# --------------------------------------------------------------------------
# Model files

def read_keyvalue(path: Union[str, Path]) -> Dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line and ":" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        sep = "=" if "=" in line else ":"
        k, v = line.split(sep, 1)
        out[k.strip()] = v.strip()
    return out


KERNEL_KEYS = tuple(f"{p}_{n}{s}" for n in "abc" for s in ("", "_p") for p in ("F", "K"))


def load_model(path: Union[str, Path]):
    """Load a :class:`ModelTriple` or, when kernel keys are present, a :class:`NonlinearModel`."""
    kv = read_keyvalue(path)
    h_range = (float(kv.get("h_min", -0.5)), float(kv.get("h_max", 0.5)))
    x_max = float(kv.get("x_max", 10.0))
    if any(k in kv for k in KERNEL_KEYS):
        parts = {}
        for n in "abc":
            parts[n] = KernelNonlinearity.of(
                kv.get(f"F_{n}", "0"), kv.get(f"K_{n}", "0"),
                kv.get(f"F_{n}_p", "0"), kv.get(f"K_{n}_p", "0"))
        return NonlinearModel(parts["a"], parts["b"], parts["c"], h_range, x_max)
    missing = [k for k in "abc" if k not in kv]
    if missing:
        raise ValueError(f"{path}: missing model keys {missing}")
    return ModelTriple(kv["a"], kv["b"], kv["c"], h_range, x_max)


class SmoothFunction:
    """A test function xi(x) with its derivative, built from an expression in x."""

    def __init__(self, source: Union[str, Expr], name: Optional[str] = None):
        self.expr = _coerce(source)
        bad = self.expr.variables() - {"x"}
        if bad:
            raise ExprError(f"test function may only use x, found {sorted(bad)}")
        self._f = as_function(self.expr, "x")
        self._df = as_function(differentiate(self.expr, "x"), "x")
        self.name = name or str(self.expr)

    def __call__(self, x):
        return self._f(np.asarray(x, dtype=float))

    def derivative(self, x):
        return self._df(np.asarray(x, dtype=float))

    def __repr__(self):
        return f"SmoothFunction({self.name!r})"
