"""Invariant suite run by ``weaksym selftest`` on small meshes."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import forms
from . import polynomial as poly
from .analysis import RESIDUAL_TOL, check_A1, manufactured_case, orthogonality_residual
from .assembly import assemble_saddle, solve_saddle
from .mesh import build_mesh, check_invariants
from .operators import discrete_identity_residual, interpolate_hdiv, l2_project
from .spaces import CATALOGUE, MESH_FAMILY, SpaceDescriptor, build_space, make_triple

EXACTNESS_TOL = 1e-12
CONTINUITY_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def interface_jumps(space, coef, normal_only=True, npts=4):
    """Largest jump across interior edges, in the normal flux (rows) or in all components."""
    mesh = space.mesh
    interior = np.flatnonzero(mesh.edge_cells[:, 1] >= 0)
    s = np.linspace(0.1, 0.9, npts)
    a = mesh.vertices[mesh.edges[interior, 0]]
    b = mesh.vertices[mesh.edges[interior, 1]]
    pts = (a[:, None] + s[None, :, None] * (b - a)[:, None]).reshape(-1, 2)
    cl = np.repeat(mesh.edge_cells[interior, 0], npts)
    cr = np.repeat(mesh.edge_cells[interior, 1], npts)
    jump = space.evaluate(coef, cl, pts) - space.evaluate(coef, cr, pts)
    if normal_only:
        n = np.repeat(mesh.edge_normals()[interior], npts, axis=0)
        jump = jump.reshape(len(pts), -1, 2) @ n[:, :, None]
    return float(np.abs(jump).max(initial=0.0))


def _faulty(rule):
    w = np.array(rule.weights)
    w[0] *= 1.01
    return replace(rule, weights=w)


def check_quadrature(fault=None):
    worst, where = 0.0, ""
    for cell in (poly.TRIANGLE, poly.RECTANGLE):
        for deg in range(poly.MAX_QUADRATURE_DEGREE + 1):
            rule = poly.quadrature_rule(cell, deg)
            if fault == "quadrature" and cell == poly.TRIANGLE and deg == 6:
                rule = _faulty(rule)
            err = poly.check_exactness(rule)
            if err > worst:
                worst, where = err, f"{cell} degree {deg}"
    ok = worst <= EXACTNESS_TOL
    return CheckResult("quadrature exactness", ok, f"worst monomial error {worst:.1e}" + ("" if ok else f" ({where})"))


def check_meshes():
    bad = []
    for fam in ("tri", "rect", "bary"):
        mesh = build_mesh(fam, 2)
        bad += [f"{fam}: {msg}" for _, msg in check_invariants(mesh)]
        if not np.isclose(mesh.areas().sum(), 1.0):
            bad.append(f"{fam}: areas do not sum to 1")
    return CheckResult("mesh invariants", not bad, "; ".join(bad) or "tri, rect, bary at m=2")


def check_continuity(rng):
    worst = {}
    cases = [("tri", "BDM", 2, "vector", True), ("tri", "RTN", 2, "matrix", True),
             ("rect", "rBDM", 2, "vector", True), ("rect", "rRTN", 1, "matrix", True),
             ("tri", "Pc", 2, "skew", False), ("rect", "Qc", 2, "vector", False)]
    for fam, sfam, k, shape, normal in cases:
        space = build_space(build_mesh(fam, 2), SpaceDescriptor(sfam, k, shape))
        worst[f"{sfam}{k}"] = interface_jumps(space, rng.standard_normal(space.ndofs), normal)
    bad = {key: v for key, v in worst.items() if v > CONTINUITY_TOL}
    return CheckResult("interface continuity", not bad,
                       f"max jump {max(worst.values()):.1e}" + (f" in {sorted(bad)}" if bad else ""))


def check_commuting_div():
    mesh = build_mesh("tri", 2)
    sig = build_space(mesh, SpaceDescriptor("BDM", 2, "matrix"))
    u = build_space(mesh, SpaceDescriptor("Pd", 1, "vector"))

    def tau(p):
        x, y = p[..., 0], p[..., 1]
        return np.stack([np.sin(x + 2 * y), x * y**3, np.exp(x) * y, np.cos(3 * x - y)], -1).reshape(p.shape[:-1] + (2, 2))

    def div_tau(p):
        x, y = p[..., 0], p[..., 1]
        return np.stack([np.cos(x + 2 * y) + 3 * x * y**2, np.exp(x) * y + np.sin(3 * x - y)], -1)

    quad = forms.cell_quadrature(mesh, 10)
    pi = interpolate_hdiv(sig, tau)
    _, g = pi.values(quad, derivatives=True)
    lhs = forms.row_divergence(g)
    rhs = l2_project(u, div_tau, quad).values(quad)
    err = forms.l2_norm(lhs - rhs, quad.weights)
    return CheckResult("commuting interpolant div Pi = P div", err <= 1e-10, f"residual {err:.1e}")


def _triples(m=2):
    for name in CATALOGUE:
        k = 2 if name == "CGG" else 1
        yield make_triple(name, k, build_mesh(MESH_FAMILY[name], m))


def check_identities(triples):
    worst, names = 0.0, []
    for t in triples:
        if t.xi is None:
            continue
        r = max(discrete_identity_residual(t.xi, t.gamma))
        worst = max(worst, r)
        if r > RESIDUAL_TOL:
            names.append(t.name)
    return CheckResult("skw curl xi = chi div S xi", not names,
                       f"worst residual {worst:.1e}" + (f" in {names}" if names else ""))


def check_orthogonality(triples):
    res = {t.name: orthogonality_residual(t) for t in triples}
    bad = [n for n, r in res.items() if r > RESIDUAL_TOL]
    return CheckResult("Gamma0 orthogonal to chi div S Xi", not bad,
                       f"worst residual {max(res.values()):.1e}" + (f" in {bad}" if bad else ""))


def check_a1(triples):
    bad = {t.name: d for t in triples if (d := check_A1(t))}
    return CheckResult("(A1) div Sigma_h = U_h", not bad, f"rank deficits {bad}" if bad else "all catalogue triples at m=2")


def check_local_oracle():
    """P1 Lagrange mass on a single triangle against the closed form |T|/12 (1 + delta_ij)."""
    mesh = build_mesh("tri", 1)
    space = build_space(mesh, SpaceDescriptor("Pc", 1, "scalar"))
    quad = forms.cell_quadrature(mesh, 2)
    vals, _ = space.tabulate(quad, derivatives=False)
    A = forms.local_matrices(vals, vals, quad.weights)[0]
    exact = mesh.areas()[0] / 12.0 * (np.ones((3, 3)) + np.eye(3))
    err = float(np.abs(A - exact).max())
    return CheckResult("local mass matrix oracle", err <= 1e-14, f"max entry error {err:.1e}")


def check_solve():
    mesh = build_mesh("tri", 2)
    t = make_triple("AFW", 1, mesh)
    case = manufactured_case("default")
    sys_ = assemble_saddle(t, case.material, case.f_fn)
    sol = solve_saddle(sys_)
    div_res = float(np.abs(sys_.D @ sol.sigma.coef + sys_.F).max())
    sym_res = float(np.abs(sys_.S @ sol.sigma.coef).max())
    ok = sol.residual <= RESIDUAL_TOL and div_res <= 1e-10 and sym_res <= 1e-10
    return CheckResult("saddle solve residuals", ok,
                       f"solver {sol.residual:.1e}, equilibrium {div_res:.1e}, weak symmetry {sym_res:.1e}")


def run_selftest(seed=0, fault=None):
    rng = np.random.default_rng(seed)
    triples = list(_triples())
    return [
        check_quadrature(fault), check_meshes(), check_continuity(rng), check_commuting_div(),
        check_identities(triples), check_orthogonality(triples), check_a1(triples),
        check_local_oracle(), check_solve(),
    ]
