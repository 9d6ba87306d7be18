"""Stability lab and convergence harness.

Stability quantities are measured as generalized eigenvalues of assembled
matrices.  Convergence studies solve the discrete problem on a sequence of
uniformly refined meshes of the unit square for a manufactured solution.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import sympy

from . import forms
from . import polynomial as poly
from .assembly import Material, SingularSystemError, assemble_saddle, compliance_flat, solve_saddle
from .mesh import build_mesh
from .operators import (FieldCoefficients, discrete_identity_residual, div_S_scalar, interpolate_hdiv,
                        l2_project, mass_matrix)
from .spaces import (MESH_FAMILY, SpaceDescriptor, build_space, construction_degree, curl_from_gradients,
                     make_triple, table_rates)

RANK_TOL = 1e-10
DENSE_LIMIT = 5000
RESIDUAL_TOL = 1e-10
BETA_MIN = 1e-2
DRIFT_TOL = 0.10
DECAY_TOL = 0.30
RATE_TOL = 0.2


# -- norms and blocks ----------------------------------------------------------

def sigma_norm_matrices(sigma, quad):
    """L2 mass and div-div Gram of a matrix H(div) space."""
    v, g = sigma.tabulate(quad)
    div = forms.row_divergence(g)
    M = forms.assemble_matrix(sigma, sigma, v, v, quad.weights)
    Ddiv = forms.assemble_matrix(sigma, sigma, div, div, quad.weights)
    return M, Ddiv, v, div


def _quad_for(triple):
    return forms.cell_quadrature(triple.mesh, max(2 * triple.k + 2, 2 * triple.sigma.degree))


def constraint_blocks(triple, quad=None):
    """D = (div tau, v), S = (tau, eta), plus U and Gamma masses."""
    quad = quad or _quad_for(triple)
    sv, sg = triple.sigma.tabulate(quad)
    uv, _ = triple.u.tabulate(quad, derivatives=False)
    gv, _ = triple.gamma.tabulate(quad, derivatives=False)
    div = forms.row_divergence(sg)
    D = forms.assemble_matrix(triple.u, triple.sigma, uv, div, quad.weights)
    S = forms.assemble_matrix(triple.gamma, triple.sigma, gv, sv, quad.weights)
    Mu = forms.assemble_matrix(triple.u, triple.u, uv, uv, quad.weights)
    Mg = forms.assemble_matrix(triple.gamma, triple.gamma, gv, gv, quad.weights)
    return D, S, Mu, Mg


def matrix_rank(A, tol=RANK_TOL):
    A = A.toarray() if sp.issparse(A) else np.asarray(A)
    if A.size == 0:
        return 0
    s = np.linalg.svd(A, compute_uv=False)
    return int(np.sum(s > tol * s[0])) if s[0] > 0 else 0


def check_A1(triple, sigma=None, u=None, quad=None):
    """dim U_h - rank of the (div tau, v) coupling (0 iff div maps onto U_h)."""
    sigma = sigma or triple.sigma
    u = u or triple.u
    quad = quad or forms.cell_quadrature(triple.mesh, 2 * max(sigma.degree, 1))
    _, sg = sigma.tabulate(quad)
    uv, _ = u.tabulate(quad, derivatives=False)
    D = forms.assemble_matrix(u, sigma, uv, forms.row_divergence(sg), quad.weights)
    return u.ndofs - matrix_rank(D)


def _min_gen_eig_dense(S, M):
    w, V = sla.eigh(S, M)
    return w[0], V[:, 0]


def _infsup_sq(Mdiv, B, Mq):
    """Smallest lambda with B Mdiv^{-1} B^T w = lambda Mq w (and its w)."""
    n = B.shape[0]
    if n == 0:
        return math.inf, np.zeros(0)
    if Mdiv.shape[0] + n <= DENSE_LIMIT:
        L = sla.cholesky(Mdiv.toarray(), lower=True)
        X = sla.solve_triangular(L, B.toarray().T, lower=True)
        S = X.T @ X
        lam, w = _min_gen_eig_dense(0.5 * (S + S.T), Mq.toarray())
        return max(lam, 0.0), w
    K = sp.bmat([[Mdiv, B.T], [B, None]], format="csc")
    try:
        lu = spla.splu(K)
    except RuntimeError:
        return 0.0, None
    ns = Mdiv.shape[0]

    def s_inv(r):
        y = lu.solve(np.concatenate([np.zeros(ns), np.ravel(r)]))[ns:]
        return -y

    def s_apply(w):
        x = spla.spsolve(Mdiv.tocsc(), B.T @ np.ravel(w))
        return B @ x

    Sop = spla.LinearOperator((n, n), matvec=s_apply, dtype=float)
    Sinv = spla.LinearOperator((n, n), matvec=s_inv, dtype=float)
    mu, vec = spla.eigsh(Mq.tocsc(), k=1, M=Sop, Minv=Sinv, which="LM", tol=1e-10,
                         v0=np.ones(n))
    return 1.0 / mu[0], vec[:, 0]


def infsup_constant(triple, gamma_basis=None, quad=None, return_mode=False):
    """beta for (Sigma_h, U_h x Gamma_h) in the ||.||_div x L2 norms.

    ``gamma_basis`` (columns in the Gamma_h basis) restricts the multiplier to
    a subspace, e.g. Gamma_h^0 for the reduced triple.
    """
    quad = quad or _quad_for(triple)
    M, Ddiv, _, _ = sigma_norm_matrices(triple.sigma, quad)
    D, S, Mu, Mg = constraint_blocks(triple, quad)
    if gamma_basis is not None:
        G = sp.csc_matrix(gamma_basis)
        S = (G.T @ S).tocsr()
        Mg = (G.T @ Mg @ G).tocsr()
    B = sp.vstack([D, S]).tocsr() if S.shape[0] else D
    Mq = sp.block_diag([Mu, Mg]).tocsr() if S.shape[0] else Mu
    lam, w = _infsup_sq((M + Ddiv).tocsr(), B, Mq)
    beta = math.sqrt(lam) if np.isfinite(lam) else math.inf
    if return_mode:
        nu = triple.u.ndofs
        return beta, (None if w is None else (w[:nu], w[nu:]))
    return beta


def kernel_basis(triple, quad=None, mean_trace_free=True):
    """Orthonormal basis (columns) of {tau: (div tau, v) = (tau, eta) = 0} in Sigma_h.

    With ``mean_trace_free`` the constraint int tr(tau) = 0 is added, removing
    the constant identity field which lies in the kernel for a pure
    displacement problem.
    """
    quad = quad or _quad_for(triple)
    D, S, _, _ = constraint_blocks(triple, quad)
    rows = [D.toarray(), S.toarray()]
    if mean_trace_free:
        sv, _ = triple.sigma.tabulate(quad, derivatives=False)
        tr = (sv[..., 0] + sv[..., 3])[..., None]
        ones = np.ones(tr.shape[:2] + (1,))
        t = forms.assemble_vector(triple.sigma, tr, ones, quad.weights)
        rows.append(t[None, :])
    C = np.vstack(rows)
    return sla.null_space(C, rcond=RANK_TOL)


def coercivity_on_kernel(triple, mat: Material, quad=None, mean_trace_free=True):
    """alpha = min over the discrete kernel of (A tau, tau) / ||tau||_div^2 (dense)."""
    quad = quad or _quad_for(triple)
    if triple.sigma.ndofs > DENSE_LIMIT:
        return float("nan")
    M, Ddiv, sv, _ = sigma_norm_matrices(triple.sigma, quad)
    mu, lam = mat.at(quad.points)
    A = forms.assemble_matrix(triple.sigma, triple.sigma, sv,
                              compliance_flat(sv, mu[:, :, None], lam[:, :, None]), quad.weights)
    Z = kernel_basis(triple, quad, mean_trace_free)
    if Z.shape[1] == 0:
        return math.inf
    Ak = Z.T @ (A @ Z)
    Nk = Z.T @ ((M + Ddiv) @ Z)
    w = sla.eigh(0.5 * (Ak + Ak.T), 0.5 * (Nk + Nk.T), eigvals_only=True)
    return float(w[0])


def kernel_divergence(triple, quad=None):
    """max ||div tau||_0 over an orthonormal kernel basis."""
    quad = quad or _quad_for(triple)
    _, Ddiv, _, _ = sigma_norm_matrices(triple.sigma, quad)
    Z = kernel_basis(triple, quad, mean_trace_free=False)
    if Z.shape[1] == 0:
        return 0.0
    return float(np.sqrt(np.maximum(np.einsum("ij,ij->j", Z, Ddiv @ Z), 0)).max())


# -- Stokes pair -----------------------------------------------------------------

def stokes_blocks(xi, gamma, quad):
    """(chi div S xi, eta) block (nGamma x nXi), curl Gram on Xi, Gamma mass."""
    _, g = xi.tabulate(quad)
    curl = curl_from_gradients(g)
    divS = div_S_scalar(g)
    gv, _ = gamma.tabulate(quad, derivatives=False)
    r = gv[..., 1]
    # (chi(a), chi(b)) = 2 a b pointwise
    B = forms.assemble_matrix(gamma, xi, r[..., None], 2.0 * divS[..., None], quad.weights)
    K = forms.assemble_matrix(xi, xi, curl, curl, quad.weights)
    Mg = forms.assemble_matrix(gamma, gamma, gv, gv, quad.weights)
    return B, K, Mg


def stokes_infsup(xi, gamma, gamma1, quad=None):
    """beta_B for the pair (Xi_h, Gamma_h^1) with the ||curl xi||_0 seminorm.

    The null space of curl on Xi_h (constants, for spaces without boundary
    conditions) is quotiented out by adding Z Z^T to the curl Gram matrix.
    Returns ``inf`` when Gamma_h^1 is trivial and 0 when Xi_h is degenerate.
    """
    G1 = sp.csc_matrix(gamma1)
    if G1.shape[1] == 0:
        return math.inf
    if xi is None:
        return 0.0
    quad = quad or forms.cell_quadrature(xi.mesh, max(2 * xi.degree, xi.degree - 1 + gamma.degree, 2))
    B, K, Mg = stokes_blocks(xi, gamma, quad)
    B1 = (G1.T @ B).tocsr()
    M1 = (G1.T @ Mg @ G1).tocsr()
    n = xi.ndofs
    if K.nnz == 0 or abs(K).max() == 0:
        return 0.0
    if n + B1.shape[0] <= DENSE_LIMIT:
        Kd = K.toarray()
        w, V = np.linalg.eigh(Kd)
        Z = V[:, w <= RANK_TOL * w.max()]
        Kt = Kd + Z @ Z.T * w.max()
        L = sla.cholesky(Kt, lower=True)
        X = sla.solve_triangular(L, B1.toarray().T, lower=True)
        S = X.T @ X
        lam = sla.eigh(0.5 * (S + S.T), M1.toarray(), eigvals_only=True)[0]
        return math.sqrt(max(lam, 0.0))
    Z = _constant_fields(xi)
    Kt = K + sp.csr_matrix(Z @ Z.T) * abs(K).max() if Z.shape[1] else K
    lam, _ = _infsup_sq(Kt.tocsr(), B1, M1)
    return math.sqrt(max(lam, 0.0))


def _constant_fields(xi):
    """Coefficients of constant vector fields contained in Xi_h (for continuous nodal spaces)."""
    if xi.desc.family not in ("Pc", "Qc", "S2c", "Mini"):
        return np.zeros((xi.ndofs, 0))
    quad = forms.cell_quadrature(xi.mesh, 2 * xi.degree)
    cols = []
    for comp in range(2):
        def f(p, comp=comp):
            out = np.zeros(p.shape[:-1] + (2,))
            out[..., comp] = 1.0
            return out
        c = l2_project(xi, f, quad=quad).coef
        cols.append(c / np.linalg.norm(c))
    return np.column_stack(cols)


def orthogonality_residual(triple, quad=None):
    """max |(chi div S xi, eta0)| / (||chi div S xi|| ||eta0||) over bases of Xi_h and Gamma_h^0."""
    if triple.xi is None or triple.gamma0.shape[1] == 0:
        return 0.0
    xi = triple.xi
    quad = quad or forms.cell_quadrature(xi.mesh, max(2 * xi.degree, xi.degree - 1 + triple.gamma.degree, 2))
    B, _, Mg = stokes_blocks(xi, triple.gamma, quad)
    G0 = sp.csc_matrix(triple.gamma0)
    R = (G0.T @ B).toarray()
    _, g = xi.tabulate(quad)
    divS = div_S_scalar(g)
    per_cell = np.einsum("cqi,cqi,cq->ci", divS, divS, quad.weights) * 2.0
    nx = np.zeros(xi.ndofs)
    d = xi.cell_dofs
    np.add.at(nx, d[d >= 0], per_cell[d >= 0])
    nx = np.sqrt(nx)
    ng = np.sqrt(np.maximum((G0.T @ Mg @ G0).diagonal(), 0))
    denom = np.outer(ng, nx)
    ok = denom > 0
    return float(np.max(np.abs(R[ok]) / denom[ok], initial=0.0))


# -- certificates ------------------------------------------------------------

@dataclass
class StabilityReport:
    triple: str
    k: int
    level: int
    a1_rank_deficit: int
    infsup_beta: float
    reduced_beta: float
    coercivity_alpha: float
    stokes_beta: float
    orthogonality_residual: float
    commuting_residual: float
    commuting_pointwise: float
    dims: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures

    def to_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        for key, val in d.items():
            if isinstance(val, float) and not math.isfinite(val):
                d[key] = None if math.isnan(val) else "inf"
        return d

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def certify_composition(triple, mat: Material | None = None, level=0) -> StabilityReport:
    """Check (A1), the reduced-triple inf-sup, (B), orthogonality and the full inf-sup."""
    mat = mat or Material()
    quad = _quad_for(triple)
    deficit = check_A1(triple, quad=quad)
    beta = infsup_constant(triple, quad=quad)
    reduced = infsup_constant(triple, gamma_basis=triple.gamma0, quad=quad)
    alpha = coercivity_on_kernel(triple, mat, quad=quad)
    stokes = stokes_infsup(triple.xi, triple.gamma, triple.gamma1)
    orth = orthogonality_residual(triple)
    if triple.xi is not None:
        comm, comm_pt = discrete_identity_residual(triple.xi, triple.gamma)
    else:
        comm, comm_pt = 0.0, 0.0
    fails = []
    if deficit:
        fails.append(f"(A1) div Sigma_h != U_h: rank deficit {deficit}")
    if not beta >= BETA_MIN:
        fails.append(f"(A2) inf-sup constant {beta:.3e} below {BETA_MIN:g}")
    if not reduced >= BETA_MIN:
        fails.append(f"(A2) reduced-triple inf-sup {reduced:.3e} below {BETA_MIN:g}")
    if not (math.isnan(alpha) or alpha >= BETA_MIN):
        fails.append(f"(S1) kernel coercivity {alpha:.3e} below {BETA_MIN:g}")
    if not stokes >= BETA_MIN:
        fails.append(f"(B) Stokes inf-sup {stokes:.3e} below {BETA_MIN:g}")
    if orth > RESIDUAL_TOL:
        fails.append(f"orthogonality chi div S Xi_h vs Gamma_h^0 residual {orth:.3e}")
    if max(comm, comm_pt) > RESIDUAL_TOL:
        fails.append(f"commuting identity skw curl = chi div S residual {max(comm, comm_pt):.3e}")
    return StabilityReport(triple.name, triple.k, level, deficit, beta, reduced, alpha, stokes, orth,
                           comm, comm_pt, triple.dims(), fails)


def mesh_for(name, m):
    return build_mesh(MESH_FAMILY[name], m)


def drift(values):
    """Relative changes between consecutive entries."""
    v = np.asarray(values, float)
    return np.abs(np.diff(v)) / np.abs(v[:-1])


def certify_levels(name, k, ms=(2, 4, 8), mat=None):
    """Certify on several meshes and check mesh independence of beta and beta_B.

    Returns ``(reports, failures)``; a probe that should be unstable shows up
    as beta decaying by more than 30% per refinement.
    """
    reports = [certify_composition(make_triple(name, k, mesh_for(name, m)), mat, level=m) for m in ms]
    fails = [f"m={r.level}: {f}" for r in reports for f in r.failures]
    for key in ("infsup_beta", "stokes_beta"):
        vals = [getattr(r, key) for r in reports]
        if all(np.isfinite(vals)) and min(vals) > 0:
            d = drift(vals)
            if np.any(d > DRIFT_TOL):
                fails.append(f"{key} drifts by {d.max():.1%} between refinements (> {DRIFT_TOL:.0%})")
    return reports, fails


def beta_decay(reports):
    b = np.array([r.infsup_beta for r in reports])
    return 1.0 - b[1:] / b[:-1]


# -- manufactured solutions ---------------------------------------------------------

X, Y = sympy.symbols("x y", real=True)


def _lambdify_field(exprs, shape):
    """Numpy callable p -> values of shape p.shape[:-1] + shape."""
    fns = [sympy.lambdify((X, Y), e, "numpy") for e in exprs]

    def call(p):
        p = np.asarray(p, float)
        x, y = p[..., 0], p[..., 1]
        vals = [np.broadcast_to(np.asarray(fn(x, y), float), x.shape) for fn in fns]
        return np.stack(vals, axis=-1).reshape(x.shape + shape)
    return call


@dataclass
class ManufacturedCase:
    """Exact solution of the elasticity problem on the unit square."""
    name: str
    u: tuple
    mu: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        u1, u2 = (sympy.sympify(c) for c in self.u)
        mu, lam = sympy.nsimplify(self.mu), sympy.nsimplify(self.lam)
        grad = sympy.Matrix([[sympy.diff(u1, X), sympy.diff(u1, Y)], [sympy.diff(u2, X), sympy.diff(u2, Y)]])
        eps = (grad + grad.T) / 2
        sig = 2 * mu * eps + lam * eps.trace() * sympy.eye(2)
        gam = (grad - grad.T) / 2
        f = -sympy.Matrix([sympy.diff(sig[0, 0], X) + sympy.diff(sig[0, 1], Y),
                           sympy.diff(sig[1, 0], X) + sympy.diff(sig[1, 1], Y)])
        self._sym = {"u": sympy.Matrix([u1, u2]), "sigma": sig, "gamma": gam, "f": f, "grad": grad}
        self.sigma_fn = _lambdify_field([sympy.simplify(s) for s in sig], (2, 2))
        self.gamma_fn = _lambdify_field([sympy.simplify(s) for s in gam], (2, 2))
        self.u_fn = _lambdify_field([u1, u2], (2,))
        self.f_fn = _lambdify_field([sympy.simplify(s) for s in f], (2,))
        self.div_sigma_fn = _lambdify_field([-s for s in f], (2,))

    @property
    def material(self):
        return Material(self.mu, self.lam)

    def symbolic(self, key):
        return self._sym[key]

    def navier_check(self):
        """|f - (-mu lap u - (mu + lam) grad div u)| simplified symbolically (0 expected)."""
        u = self._sym["u"]
        mu, lam = sympy.nsimplify(self.mu), sympy.nsimplify(self.lam)
        div = sympy.diff(u[0], X) + sympy.diff(u[1], Y)
        lap = sympy.Matrix([sympy.diff(c, X, 2) + sympy.diff(c, Y, 2) for c in u])
        nav = -mu * lap - (mu + lam) * sympy.Matrix([sympy.diff(div, X), sympy.diff(div, Y)])
        return [sympy.simplify(a - b) for a, b in zip(self._sym["f"], nav)]

    def boundary_trace(self, n=33):
        t = np.linspace(0.0, 1.0, n)
        z, o = np.zeros(n), np.ones(n)
        pts = np.concatenate([np.column_stack(c) for c in ((t, z), (t, o), (z, t), (o, t))])
        return float(np.abs(self.u_fn(pts)).max())


def manufactured_case(name="default", mu=1.0, lam=1.0) -> ManufacturedCase:
    if name == "default":
        u = (sympy.sin(sympy.pi * X) * sympy.sin(sympy.pi * Y), X * (1 - X) * Y * (1 - Y))
    elif name == "locking":
        psi = X**2 * (1 - X)**2 * Y**2 * (1 - Y)**2
        u = (-sympy.diff(psi, Y), sympy.diff(psi, X))
    elif name == "quadratic":
        u = (X * (1 - X), X * Y)
    else:
        raise ValueError(f"unknown case {name!r}; choose default, locking or quadratic")
    return ManufacturedCase(name, u, mu, lam)


CASES = ("default", "locking")


# -- errors and post-processing ------------------------------------------------

def postprocess_displacement(sol, quad=None):
    """Cell-local displacement u* in P_{k+1}(T; R^2).

    The cell mean of u* equals that of u_h and its mean-free part solves
    (grad u*, grad w)_T = (A sigma_h + gamma_h, grad w)_T.
    """
    triple = sol.system.triple
    mat = sol.system.material
    deg = triple.u.degree + 2
    space = build_space(triple.mesh, SpaceDescriptor("Pd", deg, "vector"))
    quad = quad or forms.cell_quadrature(triple.mesh, max(2 * deg, 2 * triple.sigma.degree))
    sv = sol.sigma.values(quad)
    gv = sol.gamma.values(quad)
    mu, lam = mat.at(quad.points)
    G = compliance_flat(sv, mu, lam) + gv  # (nc, nq, 4): approximates grad u
    uv = sol.u.values(quad)
    area = quad.weights.sum(axis=1)
    means = np.einsum("cqk,cq->ck", uv, quad.weights) / area[:, None]
    vals, grads = space.tabulate(quad)
    nb = space.nloc // 2
    # scalar modal functions from the first component block
    phi_g = grads[:, :, 1:nb, 0, :]  # (nc, nq, nb-1, 2)
    K = np.einsum("cqid,cqjd,cq->cij", phi_g, phi_g, quad.weights)
    coef = np.zeros(space.ndofs)
    for r in range(2):
        rhs = np.einsum("cqid,cqd,cq->ci", phi_g, G[..., 2 * r:2 * r + 2], quad.weights)
        c = np.linalg.solve(K, rhs[..., None])[..., 0] if nb > 1 else np.zeros((len(area), 0))
        dofs = space.cell_dofs[:, r * nb:(r + 1) * nb]
        coef[dofs[:, 0]] = means[:, r]  # the first modal function is the constant 1
        coef[dofs[:, 1:]] = c
    return FieldCoefficients(space, coef)


@dataclass
class LevelErrors:
    level: int
    m: int
    h: float
    err_sigma: float
    err_pu: float
    err_u: float
    err_gamma: float
    err_ustar: float
    interp_sigma: float
    interp_gamma: float
    div_residual: float
    symmetry_residual: float
    solver_residual: float
    ndofs: int
    beta: float = float("nan")
    alpha: float = float("nan")

    @property
    def constant(self):
        """Measured C of the improved estimate."""
        return (self.err_sigma + self.err_pu + self.err_gamma) / (self.interp_sigma + self.interp_gamma)


def _err(values, exact, w):
    return forms.l2_norm(values - exact, w)


def level_errors(triple, case: ManufacturedCase, level=0, stability=False, m=0):
    """Solve one level and measure all error quantities."""
    mat = case.material
    sol = solve_saddle(assemble_saddle(triple, mat, case.f_fn))
    mesh = triple.mesh
    deg = min(max(2 * triple.sigma.degree, 2 * triple.gamma.degree, 2 * triple.u.degree + 4) + 4,
              poly.MAX_QUADRATURE_DEGREE)
    quad = forms.cell_quadrature(mesh, deg)
    w = quad.weights
    sig_ex = case.sigma_fn(quad.points).reshape(w.shape + (4,))
    gam_ex = case.gamma_fn(quad.points).reshape(w.shape + (4,))
    u_ex = case.u_fn(quad.points)
    sv, sg = sol.sigma.values(quad, derivatives=True)
    uv = sol.u.values(quad)
    gv = sol.gamma.values(quad)
    Pu = l2_project(triple.u, None, quad=quad, values=u_ex)
    Pu_v = Pu.values(quad)
    ustar = postprocess_displacement(sol)
    # interpolation errors of the improved estimate
    Pi = interpolate_hdiv(triple.sigma, case.sigma_fn)
    Qg = l2_project(triple.gamma, None, quad=quad, values=gam_ex)
    # conservation: div sigma_h + P_h f with the load quadrature of the solve
    lq = sol.system.quad
    _, lsg = sol.sigma.values(lq, derivatives=True)
    Pf = l2_project(triple.u, case.f_fn, quad=lq)
    divres = forms.l2_norm(forms.row_divergence(lsg) + Pf.values(lq), lq.weights)
    # weak symmetry: (sigma_h, eta) relative to ||sigma_h|| ||eta||
    Mg = mass_matrix(triple.gamma, lq)
    gvl, _ = triple.gamma.tabulate(lq, derivatives=False)
    svl = sol.sigma.values(lq)
    sym = forms.assemble_vector(triple.gamma, gvl, svl, lq.weights)
    sym_rel = float(np.max(np.abs(sym) / (np.sqrt(Mg.diagonal()) * forms.l2_norm(svl, lq.weights))))
    beta = alpha = float("nan")
    if stability:
        beta = infsup_constant(triple)
        alpha = coercivity_on_kernel(triple, mat)
    return LevelErrors(
        level=level, m=m, h=float(mesh.h),
        err_sigma=_err(sv, sig_ex, w), err_pu=_err(uv, Pu_v, w), err_u=_err(uv, u_ex, w),
        err_gamma=_err(gv, gam_ex, w), err_ustar=_err(ustar.values(quad), u_ex, w),
        interp_sigma=_err(Pi.values(quad), sig_ex, w), interp_gamma=_err(Qg.values(quad), gam_ex, w),
        div_residual=divres, symmetry_residual=sym_rel, solver_residual=sol.residual,
        ndofs=sol.system.ndofs, beta=beta, alpha=alpha)


def fit_rate(h, err, last=3):
    """Least-squares slope of log(err) against log(h) over the last levels."""
    h = np.asarray(h, float)[-last:]
    e = np.asarray(err, float)[-last:]
    if np.any(e <= 0):
        return float("inf")
    return float(np.polyfit(np.log(h), np.log(e), 1)[0])


RATE_COLUMNS = ("err_sigma", "err_pu", "err_gamma")
CSV_COLUMNS = ("level", "h", "err_sigma", "err_pu", "err_u", "err_gamma", "err_ustar", "beta", "alpha")


@dataclass
class RateReport:
    triple: str
    table_k: int
    k: int
    case: str
    levels: list
    targets: tuple | None
    error: str | None = None

    def rates(self):
        h = [lv.h for lv in self.levels]
        keys = ("err_sigma", "err_pu", "err_u", "err_gamma", "err_ustar")
        return {key: fit_rate(h, [getattr(lv, key) for lv in self.levels]) for key in keys}

    def misses(self):
        """Names of rate columns whose fitted rate misses the target by more than 0.2."""
        if self.error:
            return ["solver"]
        if self.targets is None or len(self.levels) < 3:
            return []
        r = self.rates()
        return [c for c, t in zip(RATE_COLUMNS, self.targets) if not abs(r[c] - t) <= RATE_TOL]

    @property
    def passed(self):
        return not self.misses()

    def constants(self):
        return [lv.constant for lv in self.levels]

    def constant_growth(self):
        c = self.constants()
        return [c[i + 1] / c[i] - 1.0 for i in range(len(c) - 1)]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for lv in self.levels:
                w.writerow([lv.level] + [_fmt(getattr(lv, c)) for c in CSV_COLUMNS[1:]])

    def summary(self):
        r = self.rates()
        parts = [f"{self.triple} k={self.table_k} case={self.case}"]
        parts.append("rates " + " ".join(f"{c}={r[c]:.3f}" for c in r))
        if self.targets:
            parts.append("targets " + "/".join(str(t) for t in self.targets))
        return "; ".join(parts)


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if not np.isfinite(v) else f"{v:.10e}"


def run_convergence(triple_name, table_k, case: ManufacturedCase, levels=4, m0=2, stability=False) -> RateReport:
    """Convergence study on meshes m0, 2 m0, ... for one catalogue row.

    ``table_k`` is the catalogue order; the construction degree follows from it.
    A solver failure stops the study and returns the partial report.
    """
    if levels < 3:
        raise ValueError("a rate study needs at least 3 levels")
    k = construction_degree(triple_name, table_k)
    report = RateReport(triple_name, table_k, k, case.name, [], table_rates(triple_name, k))
    for lv in range(levels):
        m = m0 * 2**lv
        triple = make_triple(triple_name, k, mesh_for(triple_name, m))
        try:
            report.levels.append(level_errors(triple, case, lv, stability, m))
        except SingularSystemError as exc:
            report.error = f"level {lv}: {exc}"
            break
    return report
