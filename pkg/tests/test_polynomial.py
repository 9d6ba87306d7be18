import numpy as np
import pytest
import sympy
from hypothesis import given, settings, strategies as st

from weaksym import polynomial as poly
from weaksym.polynomial import RECTANGLE, TRIANGLE, ReferenceBasis, eval_scalar_basis

x, y = sympy.symbols("x y")


def _sym_integral(expr, cell):
    if cell == TRIANGLE:
        return float(sympy.integrate(sympy.integrate(expr, (y, 0, 1 - x)), (x, 0, 1)))
    return float(sympy.integrate(expr, (x, 0, 1), (y, 0, 1)))


def _quad(rule, f):
    return float(np.sum(rule.weights * f(rule.points[:, 0], rule.points[:, 1])))


def test_triangle_degree1_area():
    assert np.isclose(poly.quadrature_rule(TRIANGLE, 1).weights.sum(), 0.5, rtol=1e-15)


def test_triangle_x2y():
    exact = _sym_integral(x**2 * y, TRIANGLE)
    assert exact == pytest.approx(1 / 60)
    assert _quad(poly.quadrature_rule(TRIANGLE, 4), lambda a, b: a**2 * b) == pytest.approx(exact, rel=1e-14)


def test_rectangle_x3():
    assert _quad(poly.quadrature_rule(RECTANGLE, 3), lambda a, b: a**3) == pytest.approx(0.25, rel=1e-14)


@pytest.mark.parametrize("cell", [TRIANGLE, RECTANGLE])
@pytest.mark.parametrize("degree", range(0, poly.MAX_QUADRATURE_DEGREE + 1))
def test_exactness_all_monomials(cell, degree):
    rule = poly.quadrature_rule(cell, degree)
    assert np.all(rule.weights > 0)
    assert poly.check_exactness(rule) <= 1e-13


@pytest.mark.parametrize("cell, i, j", [(TRIANGLE, 3, 2), (TRIANGLE, 0, 5), (RECTANGLE, 4, 1)])
def test_monomial_integral_oracle(cell, i, j):
    assert poly.reference_monomial_integral(cell, i, j) == pytest.approx(_sym_integral(x**i * y**j, cell), rel=1e-14)


@pytest.mark.parametrize("degree", [-1, 21, 2.5])
def test_unsupported_degree(degree):
    with pytest.raises(ValueError):
        poly.quadrature_rule(TRIANGLE, degree)


@pytest.mark.parametrize("k", range(5))
def test_dimensions(k):
    assert ReferenceBasis(TRIANGLE, k, "P").dim == (k + 1) * (k + 2) // 2 == poly.dim_P(k)
    assert ReferenceBasis(RECTANGLE, k, "Q").dim == (k + 1) ** 2 == poly.dim_Q(k)
    assert ReferenceBasis(RECTANGLE, 2, "S2").dim == 8


@pytest.mark.parametrize("cell, k, kind", [(TRIANGLE, 3, "P"), (RECTANGLE, 2, "Q"), (TRIANGLE, 3, "bubble"),
                                            (RECTANGLE, 2, "S2"), (TRIANGLE, 2, "lagrangeP")])
def test_linear_independence(cell, k, kind):
    b = ReferenceBasis(cell, k, kind)
    rule = poly.quadrature_rule(cell, 2 * k + 6)
    v, _ = b.tabulate(rule.points)
    G = (v * rule.weights[:, None]).T @ v
    assert np.linalg.eigvalsh(G / np.abs(G).max()).min() > 1e-10


def test_modal_orthonormal():
    b = ReferenceBasis(TRIANGLE, 3, "P")
    rule = poly.quadrature_rule(TRIANGLE, 8)
    v, _ = b.tabulate(rule.points)
    G = (v * rule.weights[:, None]).T @ v
    np.testing.assert_allclose(G / G[0, 0], np.eye(b.dim), atol=1e-12)


def test_p1_lagrange_barycenter():
    vals, _ = eval_scalar_basis(ReferenceBasis(TRIANGLE, 1, "lagrangeP"), [1 / 3, 1 / 3])
    np.testing.assert_allclose(vals, 1 / 3, rtol=1e-14)


def test_s2_kronecker():
    b = ReferenceBasis(RECTANGLE, 2, "S2")
    vals, _ = b.tabulate(b.nodes)
    np.testing.assert_allclose(vals, np.eye(8), atol=1e-13)


@pytest.mark.parametrize("kind, cell, k", [("lagrangeP", TRIANGLE, 3), ("lagrangeQ", RECTANGLE, 2), ("S2", RECTANGLE, 2)])
def test_partition_of_unity(kind, cell, k):
    pts = np.random.default_rng(0).uniform(0, 0.45, (10, 2))
    vals, grads = ReferenceBasis(cell, k, kind).tabulate(pts)
    np.testing.assert_allclose(vals.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(grads.sum(axis=1), 0.0, atol=1e-10)


def test_outside_point_rejected():
    with pytest.raises(ValueError):
        eval_scalar_basis(ReferenceBasis(TRIANGLE, 1, "P"), [0.8, 0.3])


def _fd_check(basis, pts, step=1e-6, tol=1e-6):
    _, grads = basis.tabulate(pts)
    for axis in (0, 1):
        e = np.zeros(2)
        e[axis] = step
        fp, _ = basis.tabulate(pts + e)
        fm, _ = basis.tabulate(pts - e)
        fd = (fp - fm) / (2 * step)
        scale = np.maximum(np.abs(grads[..., axis]), 1.0)
        assert np.all(np.abs(fd - grads[..., axis]) <= tol * scale)


@pytest.mark.parametrize("cell, k, kind", [(TRIANGLE, 2, "P"), (TRIANGLE, 3, "lagrangeP"), (TRIANGLE, 2, "bubble"),
                                            (RECTANGLE, 2, "Q"), (RECTANGLE, 2, "S2")])
def test_gradient_fd(cell, k, kind):
    rng = np.random.default_rng(1)
    pts = rng.uniform(0.05, 0.45, (20, 2))
    _fd_check(ReferenceBasis(cell, k, kind), pts)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.98), st.floats(0.0, 1.0))
def test_p2_gradient_fd_property(s, t):
    pt = np.array([[s, t * (0.99 - s)]])
    _fd_check(ReferenceBasis(TRIANGLE, 2, "P"), pt, step=1e-6, tol=1e-7 * 10)


def test_triangle_bubble():
    v, g = poly.bubble_triangle([1 / 3, 1 / 3])
    assert v == pytest.approx(1 / 27)
    np.testing.assert_allclose(g, 0.0, atol=1e-15)
    for mid in ([0.5, 0.0], [0.5, 0.5], [0.0, 0.5]):
        assert poly.bubble_triangle(mid)[0] == pytest.approx(0.0, abs=1e-15)


def test_rectangle_bubble():
    assert poly.bubble_rectangle([0.5, 0.5])[0] == pytest.approx(1 / 16)
    assert poly.bubble_rectangle([1.0, 0.3])[0] == pytest.approx(0.0, abs=1e-15)
    exact = _sym_integral(x * (1 - x) * y * (1 - y), RECTANGLE)
    assert exact == pytest.approx(1 / 36)
    rule = poly.quadrature_rule(RECTANGLE, 4)
    vals = np.array([poly.bubble_rectangle(p)[0] for p in rule.points])
    assert float(np.sum(rule.weights * vals)) == pytest.approx(exact, rel=1e-14)
