import csv
import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from weaksym import forms
from weaksym.analysis import manufactured_case
from weaksym.assembly import (
    AssemblyError, Material, SingularSystemError, assemble_saddle, compliance_apply, locate_points,
    required_degree, solve, solve_saddle,
)
from weaksym.mesh import build_mesh
from weaksym.operators import l2_project, mass_matrix
from weaksym.spaces import MESH_FAMILY, make_triple

import sym_oracle as so


def test_compliance_skew_identity():
    tau = np.array([[0.0, 2.5], [-2.5, 0.0]])
    np.testing.assert_allclose(compliance_apply(Material(0.7, 3.0), tau), tau, atol=1e-15)


def test_compliance_incompressible_limit():
    out = compliance_apply(Material(0.5, 1e12), np.eye(2))
    assert np.abs(out).max() <= 1e-10


def test_compliance_direct():
    out = compliance_apply(Material(1.0, 0.0), np.array([[1.0, 0.0], [0.0, 0.0]]))
    np.testing.assert_allclose(out, [[0.5, 0.0], [0.0, 0.0]], atol=1e-15)


@pytest.mark.parametrize("mu, lam", [(0.0, 1.0), (-1.0, 1.0), (1.0, -0.5)])
def test_material_validation(mu, lam):
    with pytest.raises(ValueError):
        Material(mu, lam)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 10), st.floats(0, 1e4), st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_compliance_inverts_stiffness(mu, lam, v):
    # A is the inverse of C sigma = 2 mu eps + lam tr(eps) I on symmetric tensors
    eps = np.array(v).reshape(2, 2)
    eps = 0.5 * (eps + eps.T)
    sigma = 2 * mu * eps + lam * np.trace(eps) * np.eye(2)
    np.testing.assert_allclose(compliance_apply(Material(mu, lam), sigma), eps, atol=1e-9 * (1 + np.abs(sigma).max()))


@pytest.mark.parametrize("name, k", [("AFW", 1), ("GG", 1), ("PEERS", 1), ("Rect2D", 1), ("BaryBDM", 1)])
def test_global_matrix_symmetric(name, k):
    t = make_triple(name, k, build_mesh(MESH_FAMILY[name], 2))
    K = assemble_saddle(t, Material(1.0, 2.0)).matrix
    assert abs(K - K.T).max() <= 1e-14


def test_degree_guard():
    t = make_triple("AFW", 2, build_mesh("tri", 2))
    with pytest.raises(AssemblyError):
        assemble_saddle(t, Material(), degree=required_degree(t) - 1)


@pytest.mark.parametrize("name, k", [("AFW", 1), ("Stenberg", 1), ("AwanouLow", 1)])
def test_zero_load_zero_solution(name, k):
    t = make_triple(name, k, build_mesh(MESH_FAMILY[name], 2))
    sol = solve(t, Material(), lambda p: np.zeros(p.shape))
    for field in (sol.sigma, sol.u, sol.gamma):
        assert np.abs(field.coef).max() == 0.0


def test_residual_recomputed_independently():
    t = make_triple("AFW", 1, build_mesh("tri", 4))
    case = manufactured_case("default")
    sys_ = assemble_saddle(t, case.material, case.f_fn)
    sol = solve_saddle(sys_)
    x = np.concatenate([sol.sigma.coef, sol.u.coef, sol.gamma.coef])
    # rebuild the block matrix by hand rather than through SaddleSystem.matrix
    M, D, S = sys_.M.toarray(), sys_.D.toarray(), sys_.S.toarray()
    nu, ng = D.shape[0], S.shape[0]
    K = np.block([[M, D.T, S.T], [D, np.zeros((nu, nu)), np.zeros((nu, ng))],
                  [S, np.zeros((ng, nu)), np.zeros((ng, ng))]])
    b = np.concatenate([np.zeros(M.shape[0]), -sys_.F, np.zeros(ng)])
    assert np.linalg.norm(K @ x - b) / np.linalg.norm(b) <= 1e-10
    assert sol.residual <= 1e-10


def test_awanou_momentum_balance_cellwise():
    t = make_triple("AwanouLow", 1, build_mesh("rect", 4))
    case = manufactured_case("default")
    sol = solve(t, case.material, case.f_fn)
    quad = sol.system.quad
    _, g = sol.sigma.values(quad, derivatives=True)
    div = forms.row_divergence(g)
    pf = l2_project(t.u, case.f_fn, quad=quad).values(quad)
    # P0 U_h: the residual is a cell constant, checked at every point
    assert np.abs(div + pf).max() <= 1e-11


@pytest.mark.parametrize("name, k", [("THB", 1), ("GG", 1), ("rGG", 1), ("CGG", 2)])
def test_weak_symmetry(name, k):
    t = make_triple(name, k, build_mesh(MESH_FAMILY[name], 2))
    case = manufactured_case("default")
    sys_ = assemble_saddle(t, case.material, case.f_fn)
    sol = solve_saddle(sys_)
    G = forms.cell_quadrature(t.mesh, 2 * t.gamma.degree)
    eta_norm = np.sqrt(mass_matrix(t.gamma).diagonal())
    sig_norm = forms.l2_norm(sol.sigma.values(G), G.weights)
    assert np.all(np.abs(sys_.S @ sol.sigma.coef) <= 1e-10 * sig_norm * eta_norm)


def test_singular_system_detected():
    t = make_triple("AFW", 1, build_mesh("tri", 2))
    sys_ = assemble_saddle(t, Material(), manufactured_case().f_fn)
    # duplicated constraint rows make K singular
    sys_.D = sp.vstack([sys_.D, sys_.D]).tocsr()
    sys_.F = np.concatenate([sys_.F, sys_.F])
    with pytest.raises(SingularSystemError) as info:
        solve_saddle(sys_)
    v = info.value.null_vector
    assert v is not None
    assert np.linalg.norm(sys_.matrix @ v) <= 1e-8


def test_reference_triangle_blocks_match_oracle():
    mesh = so.reference_mesh()
    t = make_triple("AFW", 1, mesh)
    sys_ = assemble_saddle(t, Material(1.3, 0.7))
    cs, r1 = so.fit_basis(t.sigma, 1)
    cu, r2 = so.fit_basis(t.u, 1)
    assert max(r1, r2) <= 1e-12
    cu = np.concatenate([cu, np.zeros(cu.shape[:2] + (cs.shape[2] - cu.shape[2],))], axis=2)
    np.testing.assert_allclose(sys_.M.toarray(), so.gram(so.compliance(cs, 1.3, 0.7), cs, 1), atol=1e-12)
    np.testing.assert_allclose(sys_.D.toarray(), so.gram(cu, so.row_div(cs, 1), 1), atol=1e-12)


def test_locate_points_rectangles():
    mesh = build_mesh("rect", 2)
    pts = np.array([[0.1, 0.1], [0.9, 0.2], [0.0, 0.3], [1.0, 1.0], [0.75, 0.75], [1.5, 0.5]])
    cells = locate_points(mesh, pts)
    assert cells[-1] == -1
    cv = mesh.cell_coordinates()
    for p, c in zip(pts[:-1], cells[:-1]):
        assert c >= 0
        assert np.all(cv[c].min(axis=0) - 1e-12 <= p) and np.all(p <= cv[c].max(axis=0) + 1e-12)


def test_solution_export(tmp_path):
    t = make_triple("AFW", 1, build_mesh("tri", 2))
    case = manufactured_case()
    sol = solve(t, case.material, case.f_fn)
    sol.to_json(tmp_path / "s.json", grid=5)
    data = json.loads((tmp_path / "s.json").read_text())
    assert len(data["sigma"]) == t.sigma.ndofs and len(data["samples"]["x"]) == 25
    sol.to_csv(tmp_path / "s.csv", grid=4)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0][:3] == ["x", "y", "s11"] and len(rows) == 17
    a = (tmp_path / "s.csv").read_bytes()
    sol.to_csv(tmp_path / "s2.csv", grid=4)
    assert a == (tmp_path / "s2.csv").read_bytes()
