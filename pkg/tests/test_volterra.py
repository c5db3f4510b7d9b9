import math

import numpy as np
import pytest

from spmsens.dsl import ModelTriple, SmoothFunction
from spmsens.volterra import (VolterraData, VolterraError, build_pq, dh_dual, evaluate_dual,
                              kicked_continuity_check, solve_boundary_trace, solve_dual)

ONE = lambda x: np.ones_like(np.asarray(x, dtype=float))
IDENT = lambda x: np.asarray(x, dtype=float)


def test_zero_kernel_returns_p():
    p = np.linspace(1.0, 2.0, 65)
    sol = solve_boundary_trace(VolterraData.from_arrays(1.0, p, np.zeros(65)))
    assert np.array_equal(sol.boundary_trace, p)


def test_constant_kernel_closed_form():
    N = 4096
    sol = solve_boundary_trace(VolterraData.from_arrays(1.0, np.ones(N + 1), np.ones(N + 1)))
    assert sol.boundary_trace[0] == pytest.approx(math.e, rel=1e-6)
    s = sol.grid
    assert np.allclose(sol.boundary_trace, np.exp(1.0 - s), rtol=1e-6)
    assert np.max(np.abs(sol.residual())) < 1e-10


def test_kernels_of_pure_transport():
    d = build_pq(ModelTriple("0", "1", "0"), IDENT, 0.0, 1.0, 64)
    assert np.all(d.q0 == 0.0)
    assert np.allclose(d.p0, 1.0 - d.grid)


def test_kernels_of_unit_renewal():
    d = build_pq(ModelTriple("1", "1", "0"), ONE, 0.0, 1.0, 64)
    assert np.allclose(d.q0, 1.0)
    assert np.allclose(d.q(0.5, np.array([0.0, 2.0])), 1.0)
    assert np.allclose(d.p(1.0, np.array([0.3])), 1.0)


def test_renewal_dual_value_is_e():
    sol = solve_dual(ModelTriple("1", "1", "0"), ONE, 0.0, 1.0, 4096)
    assert float(evaluate_dual(sol, 0.0, 0.0)) == pytest.approx(math.e, rel=1e-6)


def test_transport_dual_reproduces_test_function():
    xi = SmoothFunction("sin(x) + x^2")
    sol = solve_dual(ModelTriple("0", "1+h", "0"), xi, 0.25, 1.5, 256)
    xs = np.array([0.0, 0.7, 2.0])
    assert np.allclose(evaluate_dual(sol, 0.0, xs), xi(xs + 1.25 * 1.5), atol=1e-8)


def test_growth_dual_is_exponential_factor():
    sol = solve_dual(ModelTriple("0", "1", "0.5"), ONE, 0.0, 2.0, 1024)
    assert float(evaluate_dual(sol, 0.0, 1.0)) == pytest.approx(math.e, rel=1e-6)


def test_sup_bound_holds():
    sol = solve_dual(ModelTriple("1 + 0.5*sin(x)", "1 + 0.1*x", "-0.2"), ONE, 0.0, 1.0, 512)
    assert np.max(np.abs(sol.boundary_trace)) <= sol.sup_bound()


def test_dh_dual_transport_is_t_minus_s():
    r = dh_dual(ModelTriple("0", "1+h", "0"), IDENT, 0.0, 1.0, x=np.array([0.0, 1.0]), N=256)
    assert np.allclose(r.trace, 1.0 - r.grid, atol=1e-9)
    assert np.allclose(r.values, 1.0, atol=1e-9)


def test_dh_dual_h_independent_model_is_zero():
    r = dh_dual(ModelTriple("1", "1", "-0.5"), ONE, 0.0, 1.0, N=256)
    assert np.max(np.abs(r.trace)) < 1e-12


def test_dh_dual_growth_in_h():
    r = dh_dual(ModelTriple("0", "1", "h"), ONE, 0.2, 1.0, N=512)
    phi = np.exp(0.2 * (1.0 - r.grid))
    assert np.allclose(r.trace, phi * (1.0 - r.grid), atol=1e-6)


def test_dh_dual_agrees_with_quotients_on_general_model():
    m = ModelTriple("exp(-x)*(1+h)", "1 + h + 0.2*sin(x)", "-0.5 + 0.3*h*cos(x)")
    r = dh_dual(m, SmoothFunction("exp(-x)"), 0.1, 1.0, x=np.array([0.0, 0.5]), N=512)
    assert r.max_deviation < 1e-5


def test_kicked_continuity():
    m = ModelTriple("0", "1", "0")
    assert kicked_continuity_check(m, IDENT, 0.0, 0.0) == 0.0
    assert kicked_continuity_check(m, IDENT, 0.0, 0.125) == pytest.approx(0.125, abs=1e-6)


def test_too_coarse_grid_is_refused():
    with pytest.raises(VolterraError):
        solve_boundary_trace(VolterraData.from_arrays(1.0, np.ones(3), np.full(3, 10.0)))


def test_trace_csv(tmp_path):
    sol = solve_dual(ModelTriple("1", "1", "0"), ONE, 0.0, 1.0, 16)
    sol.to_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "s,phi0" and len(lines) == 18
