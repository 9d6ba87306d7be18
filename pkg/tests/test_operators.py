import json

import numpy as np
import pytest
import sympy
from hypothesis import given, strategies as st

from weaksym import forms
from weaksym.assembly import coupling_blocks, locate_points
from weaksym.mesh import build_mesh, load_mesh_json
from weaksym.operators import (
    FieldCoefficients, apply_chi, apply_chi_inverse, apply_S, apply_S_inverse, discrete_identity_residual,
    interpolate_hdiv, l2_project, mass_matrix, skw_part,
)
from weaksym.spaces import MESH_FAMILY, SpaceDescriptor, build_space, make_triple

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False)


def test_apply_S_examples():
    np.testing.assert_array_equal(apply_S([0.0, 0.0]), [0.0, 0.0])
    np.testing.assert_array_equal(apply_S([2.0, 4.0]), [1.0, 2.0])


@given(finite, finite)
def test_S_invertible(a, b):
    np.testing.assert_allclose(apply_S_inverse(apply_S([a, b])), [a, b])


def test_chi_examples():
    np.testing.assert_array_equal(apply_chi(1.0), [[0, 1], [-1, 0]])
    np.testing.assert_array_equal(apply_chi(0.0), np.zeros((2, 2)))
    assert apply_chi_inverse(apply_chi(-3.5)) == -3.5


def test_chi_inverse_rejects_symmetric():
    with pytest.raises(ValueError):
        apply_chi_inverse(np.eye(2))


def test_skw_examples():
    np.testing.assert_array_equal(skw_part([[1.0, 2.0], [2.0, 5.0]]), np.zeros((2, 2)))
    np.testing.assert_array_equal(skw_part([[0.0, 2.0], [0.0, 0.0]]), [[0, 1], [-1, 0]])


@given(st.lists(finite, min_size=4, max_size=4))
def test_skw_idempotent(v):
    m = np.array(v).reshape(2, 2)
    np.testing.assert_allclose(skw_part(skw_part(m)), skw_part(m), atol=1e-12)
    np.testing.assert_allclose(apply_chi(apply_chi_inverse(skw_part(m))), skw_part(m), atol=1e-12)


# -- projections ----------------------------------------------------------------

@pytest.mark.parametrize("family, cell, k, shape", [("Pd", "tri", 2, "vector"), ("Pc", "tri", 2, "skew"),
                                                    ("Qd", "rect", 1, "scalar"), ("Qc", "rect", 2, "vector")])
def test_projection_round_trip(family, cell, k, shape):
    space = build_space(build_mesh(cell, 3), SpaceDescriptor(family, k, shape))
    coef = np.random.default_rng(0).standard_normal(space.ndofs)
    quad = forms.cell_quadrature(space.mesh, 2 * k + 2)
    vals = FieldCoefficients(space, coef).values(quad)
    again = l2_project(space, None, quad=quad, values=vals)
    np.testing.assert_allclose(again.coef, coef, atol=1e-12)


def test_project_x_onto_p0_reference():
    mesh = load_mesh_json(json.dumps({"cell_type": "tri", "vertices": [[0, 0], [1, 0], [0, 1]], "cells": [[0, 1, 2]]}))
    space = build_space(mesh, SpaceDescriptor("Pd", 0, "scalar"))
    x, y = sympy.symbols("x y")
    mean = sympy.integrate(sympy.integrate(x, (y, 0, 1 - x)), (x, 0, 1)) / sympy.Rational(1, 2)
    assert mean == sympy.Rational(1, 3)
    p = l2_project(space, lambda q: q[..., 0])
    quad = forms.cell_quadrature(mesh, 0)
    assert p.values(quad)[0, 0, 0] == pytest.approx(float(mean), rel=1e-14)


def _smooth(seed):
    a = np.random.default_rng(seed).uniform(-2, 2, (4, 3))
    def f(p):
        x, y = p[..., 0], p[..., 1]
        return np.stack([np.sin(a[i, 0] * x + a[i, 1] * y) + a[i, 2] * x * y for i in range(4)], -1)
    return f


@pytest.mark.parametrize("seed", range(10))
def test_projection_contraction_and_orthogonality(seed):
    space = build_space(build_mesh("tri", 3), SpaceDescriptor("Pd", 1, "matrix"))
    quad = forms.cell_quadrature(space.mesh, 10)
    f = _smooth(seed)
    fv = f(quad.points)
    p = l2_project(space, f, quad=quad)
    pv = p.values(quad)
    assert forms.l2_norm(pv, quad.weights) <= forms.l2_norm(fv, quad.weights)
    vals, _ = space.tabulate(quad, derivatives=False)
    r = forms.assemble_vector(space, vals, fv - pv, quad.weights)
    basis_norms = np.sqrt(mass_matrix(space, quad).diagonal())
    assert np.all(np.abs(r) <= 1e-11 * forms.l2_norm(fv, quad.weights) * basis_norms)


# -- canonical interpolation ---------------------------------------------------

def _tau(seed):
    f = _smooth(seed)
    return lambda p: f(p).reshape(p.shape[:-1] + (2, 2))


def _div_tau(seed, h=1e-6):
    f = _smooth(seed)
    def div(p):
        ex, ey = np.array([h, 0.0]), np.array([0.0, h])
        dx = (f(p + ex) - f(p - ex)) / (2 * h)
        dy = (f(p + ey) - f(p - ey)) / (2 * h)
        return np.stack([dx[..., 0] + dy[..., 1], dx[..., 2] + dy[..., 3]], -1)
    return div


@pytest.mark.parametrize("family, cell, k, shape", [("BDM", "tri", 1, "vector"), ("BDM", "tri", 2, "matrix"),
                                                    ("RTN", "tri", 2, "matrix"), ("rBDM", "rect", 1, "matrix")])
def test_interpolation_round_trip(family, cell, k, shape):
    space = build_space(build_mesh(cell, 2), SpaceDescriptor(family, k, shape))
    coef = np.random.default_rng(1).standard_normal(space.ndofs)
    field = FieldCoefficients(space, coef)
    mesh = space.mesh

    def tau(p):
        flat = p.reshape(-1, 2)
        # on an edge either neighbour gives the same normal component
        cells = locate_points(mesh, flat)
        v = field(cells, flat)
        return v.reshape(p.shape[:-1] + ((2,) if shape == "vector" else (2, 2)))
    again = interpolate_hdiv(space, tau)
    np.testing.assert_allclose(again.coef, coef, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("family, k", [("BDM", 1), ("BDM", 2), ("RTN", 2)])
def test_commuting_property(seed, family, k):
    mesh = build_mesh("tri", 3)
    sig = build_space(mesh, SpaceDescriptor(family, k, "matrix"))
    u = build_space(mesh, SpaceDescriptor("Pd", k - 1, "vector"))
    quad = forms.cell_quadrature(mesh, 12)
    pi = interpolate_hdiv(sig, _tau(seed))
    _, g = pi.values(quad, derivatives=True)
    div_pi = forms.row_divergence(g)
    pdiv = l2_project(u, _div_tau(seed), quad=quad).values(quad)
    # the finite-difference divergence contributes ~1e-10; the identity itself is exact
    assert forms.l2_norm(div_pi - pdiv, quad.weights) <= 1e-8


@pytest.mark.parametrize("k", [1, 2])
def test_interpolation_rate(k):
    errs, hs = [], []
    tau = _tau(3)
    for m in (2, 4, 8):
        mesh = build_mesh("tri", m)
        sig = build_space(mesh, SpaceDescriptor("BDM", k, "matrix"))
        quad = forms.cell_quadrature(mesh, 2 * k + 6)
        errs.append(forms.l2_norm(interpolate_hdiv(sig, tau).values(quad) - tau(quad.points).reshape(quad.weights.shape + (4,)), quad.weights))
        hs.append(mesh.h)
    rate = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert abs(rate - (k + 1)) <= 0.2


def test_interpolation_rejects_non_hdiv():
    space = build_space(build_mesh("tri", 1), SpaceDescriptor("Pd", 1, "matrix"))
    with pytest.raises(ValueError):
        interpolate_hdiv(space, _tau(0))


# -- commuting triangle --------------------------------------------------------

@pytest.mark.parametrize("name, k", [("PEERS", 1), ("THB", 1), ("THB", 2), ("Rect2D", 1), ("AFW", 2), ("CGG", 2),
                                      ("CGG", 3), ("GG", 1), ("GG", 2), ("Stenberg", 1), ("Stenberg", 2),
                                      ("BaryBDM", 1), ("BaryBDM", 2), ("rGG", 1), ("rGG", 2)])
def test_identity_residual(name, k):
    t = make_triple(name, k, build_mesh(MESH_FAMILY[name], 2))
    projected, pointwise = discrete_identity_residual(t.xi, t.gamma)
    assert pointwise <= 1e-12
    assert projected <= 1e-12


def test_identity_constant_field():
    mesh = build_mesh("tri", 2)
    xi = build_space(mesh, SpaceDescriptor("Pc", 2, "vector"))
    gamma = build_space(mesh, SpaceDescriptor("Pd", 1, "skew"))
    const = l2_project(xi, lambda p: np.broadcast_to([1.5, -2.0], p.shape).copy())
    quad = forms.cell_quadrature(mesh, 4)
    _, g = const.values(quad, derivatives=True)
    assert np.abs(g).max() <= 1e-12
    assert max(discrete_identity_residual(xi, gamma)) <= 1e-12


def test_identity_mesh_mismatch():
    xi = build_space(build_mesh("tri", 2), SpaceDescriptor("Pc", 2, "vector"))
    gamma = build_space(build_mesh("tri", 3), SpaceDescriptor("Pd", 1, "skew"))
    with pytest.raises(ValueError):
        discrete_identity_residual(xi, gamma)


@pytest.mark.parametrize("name, k", [("PEERS", 1), ("CGG", 2), ("GG", 2), ("Stenberg", 1), ("rGG", 2)])
def test_div_curl_zero(name, k):
    t = make_triple(name, k, build_mesh(MESH_FAMILY[name], 2))
    D, _, _, _ = coupling_blocks(t, forms.cell_quadrature(t.mesh, 2 * k + 4))
    enr = np.flatnonzero(t.sigma.dof_kind == "enrichment")
    assert len(enr) > 0
    assert np.abs(D[:, enr].toarray()).max() <= 1e-12
