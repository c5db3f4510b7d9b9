import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spmsens.dsl import (ExprError, KernelNonlinearity, ModelTriple, NonlinearModel, SmoothFunction,
                         ValidationGrid, as_function, differentiate, fd_check, kernel_integral,
                         load_model, parse_expr, pretty, to_source, tv_cutoff_factor, tv_cutoff_wrap,
                         validate_model)
from spmsens.measures import DiscreteMeasure


def test_parse_and_evaluate_constant_plus_h():
    assert float(parse_expr("1 + h").evaluate(h=0.25)) == 1.25


def test_exp_of_negative_square_at_zero():
    assert float(parse_expr("exp(-x^2)").evaluate(x=0.0)) == 1.0


def test_unary_minus_binds_looser_than_power():
    assert float(parse_expr("-x^2").evaluate(x=3.0)) == -9.0
    assert float(parse_expr("-(x - y)^2").evaluate(x=1.0, y=3.0)) == -4.0


def test_signed_exponent():
    assert float(parse_expr("x^-2").evaluate(x=2.0)) == 0.25


@pytest.mark.parametrize("src", ["1 +", "foo(x)", "x $ 2", "exp(x, y)", "(x", "z + 1", "x^y"])
def test_syntax_errors_are_reported(src):
    with pytest.raises(ExprError):
        parse_expr(src)


def test_error_offset_points_at_bad_character():
    with pytest.raises(ExprError) as info:
        parse_expr("x + $")
    assert info.value.offset == 4


def test_derivative_of_product_in_y():
    d = differentiate(parse_expr("x*y"), "y")
    assert pretty(d) == "x"


def test_derivative_of_square():
    assert float(differentiate(parse_expr("x^2"), "x").evaluate(x=3.0)) == 6.0


def test_derivative_of_affine_in_h():
    d = differentiate(parse_expr("sin(x) + h*cos(x)"), "h")
    xs = np.linspace(0, 3, 7)
    assert np.allclose(d.evaluate(x=xs, h=0.3), np.cos(xs))


def test_derivative_of_exp_minus_x():
    d = differentiate(parse_expr("exp(-x)"), "x")
    assert float(d.evaluate(x=1.0)) == pytest.approx(-math.exp(-1), abs=1e-12)


@pytest.mark.parametrize("src", ["x^2*exp(-x)", "sin(x)/(1+x)", "tanh(x*h) - log(1+x^2)",
                                 "sqrt(1+x)*cos(h)", "x^-1.5 + 2"])
def test_symbolic_matches_finite_difference(src):
    e = parse_expr(src)
    pts = {"x": np.linspace(0.5, 3, 11), "h": np.full(11, 0.2)}
    for v in ("x", "h"):
        assert fd_check(e, v, pts) < 1e-6


def test_round_trip_through_source():
    for src in ["1 + h", "-x^2 + 3", "exp(-(x - y)^2)", "x / (1 + h) - 2.5e-3", "(-2)^2"]:
        e = parse_expr(src)
        assert parse_expr(to_source(e)) == e


def test_as_function_broadcasts_and_returns_floats():
    f = as_function(parse_expr("1 + h"), "h", "x")
    assert f(0.2, 1.0) == pytest.approx(1.2)
    assert isinstance(f(0.2, 1.0), float)
    assert f(0.0, np.zeros(3)).shape == (3,)


def test_as_function_rejects_unbound_variables():
    with pytest.raises(ExprError):
        as_function(parse_expr("x + y"), "x")


def test_validate_transport_model_passes():
    rep = validate_model(ModelTriple("0", "1+h", "0"))
    assert rep.passed, rep.lines()


def test_negative_birth_rate_fails_a2():
    rep = validate_model(ModelTriple("-1", "1", "0"))
    assert not rep["A2"].passed
    assert rep["A2"].witness is not None


def test_vanishing_boundary_speed_fails_a3():
    rep = validate_model(ModelTriple("0", "x", "0"))
    assert not rep["A3"].passed
    assert rep["A3"].witness["x"] == 0.0


def test_unbounded_model_fails_b2():
    rep = validate_model(ModelTriple("0", "1", "1/(x - 5)"),
                         ValidationGrid(x_max=10.0, nx=513))
    assert not rep.passed


def test_validate_kernel_nonlinearity():
    f = KernelNonlinearity.of("1 + y", "exp(-(x-y)^2)")
    assert validate_model(f).passed


def test_nonlinear_model_negative_birth_fails():
    m = NonlinearModel(KernelNonlinearity.of("-y", "1"), KernelNonlinearity.of("1"),
                       KernelNonlinearity.of("0"))
    rep = validate_model(m)
    assert not rep["N4"].passed


def test_cutoff_factor_values():
    assert tv_cutoff_factor(2.0, 2.0) == 1.0
    assert tv_cutoff_factor(3.0, 2.0) == pytest.approx(math.exp(-1))
    assert tv_cutoff_factor(0.0, 2.0) == 1.0
    with pytest.raises(ValueError):
        tv_cutoff_factor(1.0, -1.0)


def test_cutoff_wrap_damps_above_threshold():
    f = tv_cutoff_wrap(lambda x, mu: 2.0 * x, 1.0)
    mu = DiscreteMeasure([0.0, 1.0], [1.0, -1.0])
    assert f(3.0, mu) == pytest.approx(6.0 * math.exp(-1))
    assert f(3.0, DiscreteMeasure.dirac(0.0, 0.5)) == 6.0


def test_kernel_integral_against_gaussian_peak():
    K = parse_expr("exp(-(x-y)^2)")
    assert kernel_integral(K, 2.0, [2.0], [1.0])[0] == pytest.approx(1.0)


def test_smooth_function_derivative():
    f = SmoothFunction("sin(x)")
    assert f.derivative(0.0) == pytest.approx(1.0)
    with pytest.raises(ExprError):
        SmoothFunction("x + h")


def test_load_model_files(tmp_path):
    p = tmp_path / "m.model"
    p.write_text("a = 0\nb = 1 + h  # speed\nc = 0\nh_min = -0.25\nh_max = 0.25\n")
    m = load_model(p)
    assert isinstance(m, ModelTriple) and m.h_range == (-0.25, 0.25)
    q = tmp_path / "n.model"
    q.write_text("F_b = 1 + y\nK_b = 1\nF_c_p = 1\n")
    n = load_model(q)
    assert isinstance(n, NonlinearModel)
    r = tmp_path / "bad.model"
    r.write_text("a = 0\nb = 1\n")
    with pytest.raises(ValueError):
        load_model(r)


_atoms = st.sampled_from(["x", "h", "1", "2.5", "0.5"])


@st.composite
def _expressions(draw, depth=3):
    if depth == 0 or draw(st.booleans()):
        return draw(_atoms)
    kind = draw(st.sampled_from(["+", "-", "*", "call", "pow", "neg"]))
    a = draw(_expressions(depth=depth - 1))
    if kind == "call":
        return f"{draw(st.sampled_from(['exp', 'sin', 'cos', 'tanh']))}({a})"
    if kind == "pow":
        return f"({a})^{draw(st.integers(1, 3))}"
    if kind == "neg":
        return f"-({a})"
    b = draw(_expressions(depth=depth - 1))
    return f"({a}) {kind} ({b})"


@settings(max_examples=60, deadline=None)
@given(_expressions())
def test_property_round_trip_and_derivative(src):
    e = parse_expr(src)
    assert parse_expr(to_source(e)) == e
    xs = np.linspace(0.1, 1.0, 5)
    env = {"x": xs, "h": np.full(5, 0.1)}
    with np.errstate(over="ignore", invalid="ignore"):
        val = np.broadcast_to(e.evaluate(**env), xs.shape)
    if np.all(np.isfinite(val)) and np.max(np.abs(val)) < 1e6:
        assert fd_check(e, "x", env, step=1e-6) < 1e-4
