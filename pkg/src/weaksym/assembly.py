"""Assembly and solution of the weakly symmetric Hellinger-Reissner system.

Unknown ordering is (sigma, u, gamma).  The system is

    [ M   D^T  S^T ] [sigma]   [  0 ]
    [ D   0    0   ] [  u  ] = [ -F ]
    [ S   0    0   ] [gamma]   [  0 ]

with M the compliance mass, D the (div tau, v) coupling, S the (tau, eta)
coupling and F the load (f, v).  The displacement condition u = 0 on the
boundary is natural and needs no constraint.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import forms
from .mesh import RECTANGLE
from .operators import FieldCoefficients
from .spaces import ElementTriple

RESIDUAL_TOL = 1e-10
DENSE_NULL_LIMIT = 6000


class AssemblyError(ValueError):
    pass


class SingularSystemError(RuntimeError):
    """Raised when the saddle matrix is singular; carries a near-null vector."""

    def __init__(self, message, null_vector=None):
        super().__init__(message)
        self.null_vector = null_vector


# -- material ------------------------------------------------------------------

def _sample(p, points):
    if callable(p):
        return np.asarray(p(points), float)
    return np.full(np.asarray(points).shape[:-1], float(p))


@dataclass(frozen=True)
class Material:
    """Isotropic Lame parameters; each may be a constant or ``f(points)``."""
    mu: object = 1.0
    lam: object = 1.0
    isotropic: bool = True

    def __post_init__(self):
        if not self.isotropic:
            raise ValueError("only isotropic materials are supported")
        probe = np.array([[0.5, 0.5], [0.0, 0.0], [1.0, 1.0], [0.25, 0.75]])
        self.validate(probe)

    def validate(self, points):
        mu, lam = self.at(points)
        if np.any(~np.isfinite(mu)) or np.any(mu <= 0):
            raise ValueError("shear modulus mu must be positive")
        if np.any(~np.isfinite(lam)) or np.any(lam < 0):
            raise ValueError("Lame parameter lambda must be non-negative")

    def at(self, points):
        return _sample(self.mu, points), _sample(self.lam, points)


def compliance_apply(mat: Material, tau, points=None):
    """A tau = (sym tau - lam/(2 mu + 2 lam) tr(tau) I) / (2 mu) + skw tau.

    ``tau`` has shape (..., 2, 2); ``points`` (..., 2) is only needed for
    spatially varying parameters.
    """
    tau = np.asarray(tau, float)
    if points is None:
        points = np.zeros(tau.shape[:-2] + (2,))
    mu, lam = mat.at(points)
    mu = np.broadcast_to(mu, tau.shape[:-2])
    lam = np.broadcast_to(lam, tau.shape[:-2])
    if np.any(mu <= 0):
        raise ValueError("shear modulus mu must be positive")
    sym = 0.5 * (tau + np.swapaxes(tau, -1, -2))
    skw = 0.5 * (tau - np.swapaxes(tau, -1, -2))
    tr = np.trace(tau, axis1=-2, axis2=-1)
    c = lam / (2.0 * mu + 2.0 * lam)
    out = (sym - (c * tr)[..., None, None] * np.eye(2)) / (2.0 * mu)[..., None, None] + skw
    return out


def compliance_flat(vals, mu, lam):
    """A applied to flat matrix values (..., 4) with mu, lam broadcastable to (...)."""
    t11, t12, t21, t22 = (vals[..., i] for i in range(4))
    c = lam / (2.0 * mu + 2.0 * lam)
    tr = t11 + t22
    s = 0.5 * (t12 + t21)
    k = 0.5 * (t12 - t21)
    inv = 1.0 / (2.0 * mu)
    a11 = inv * (t11 - c * tr)
    a22 = inv * (t22 - c * tr)
    return np.stack([a11, inv * s + k, inv * s - k, a22], axis=-1)


# -- the saddle system ---------------------------------------------------------

@dataclass
class SaddleSystem:
    triple: ElementTriple
    material: Material
    M: sp.csr_matrix
    D: sp.csr_matrix
    S: sp.csr_matrix
    F: np.ndarray
    quad: forms.CellQuadrature

    @property
    def offsets(self):
        ns, nu, ng = self.M.shape[0], self.D.shape[0], self.S.shape[0]
        return (0, ns, ns + nu, ns + nu + ng)

    @property
    def matrix(self):
        return sp.bmat([[self.M, self.D.T, self.S.T], [self.D, None, None], [self.S, None, None]],
                       format="csr")

    @property
    def rhs(self):
        return np.concatenate([np.zeros(self.M.shape[0]), -self.F, np.zeros(self.S.shape[0])])

    @property
    def ndofs(self):
        return self.offsets[-1]


def required_degree(triple: ElementTriple):
    """Smallest admissible quadrature degree: 2k+2, and exact for the Sigma mass."""
    return max(2 * triple.k + 2, 2 * triple.sigma.degree)


def coupling_blocks(triple: ElementTriple, quad):
    """(div tau, v) and (tau, eta) blocks, plus Sigma values/gradients on ``quad``."""
    sv, sg = triple.sigma.tabulate(quad)
    uv, _ = triple.u.tabulate(quad, derivatives=False)
    gv, _ = triple.gamma.tabulate(quad, derivatives=False)
    div = forms.row_divergence(sg)
    D = forms.assemble_matrix(triple.u, triple.sigma, uv, div, quad.weights)
    S = forms.assemble_matrix(triple.gamma, triple.sigma, gv, sv, quad.weights)
    return D, S, sv, div


def assemble_saddle(triple: ElementTriple, mat: Material, f=None, degree=None) -> SaddleSystem:
    """Assemble blocks and load for body force ``f(points) -> (..., 2)``."""
    need = required_degree(triple)
    if degree is None:
        degree = need
    if degree < need:
        raise AssemblyError(f"quadrature degree {degree} below the required {need} for {triple.name} k={triple.k}")
    quad = forms.cell_quadrature(triple.mesh, degree)
    D, S, sv, _ = coupling_blocks(triple, quad)
    mu, lam = mat.at(quad.points)
    mat.validate(quad.points)
    Asv = compliance_flat(sv, mu[:, :, None], lam[:, :, None])
    M = forms.assemble_matrix(triple.sigma, triple.sigma, sv, Asv, quad.weights)
    M = 0.5 * (M + M.T)
    if f is None:
        F = np.zeros(triple.u.ndofs)
    else:
        uv, _ = triple.u.tabulate(quad, derivatives=False)
        F = forms.assemble_vector(triple.u, uv, forms.evaluate_callable(f, quad, 2), quad.weights)
    return SaddleSystem(triple, mat, M.tocsr(), D, S, F, quad)


@dataclass
class SaddleSolution:
    sigma: FieldCoefficients
    u: FieldCoefficients
    gamma: FieldCoefficients
    residual: float
    system: SaddleSystem = field(repr=False)

    def to_dict(self, grid=0):
        out = {
            "triple": self.system.triple.name, "k": self.system.triple.k,
            "residual": self.residual,
            "sigma": self.sigma.coef.tolist(), "u": self.u.coef.tolist(), "gamma": self.gamma.coef.tolist(),
        }
        if grid:
            out["samples"] = sample_grid(self, grid)
        return out

    def to_json(self, path, grid=11):
        Path(path).write_text(json.dumps(self.to_dict(grid), indent=1))

    def to_csv(self, path, grid=11):
        s = sample_grid(self, grid)
        cols = ["x", "y", "s11", "s12", "s21", "s22", "u1", "u2", "gamma"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in zip(*(s[c] for c in cols)):
                w.writerow([f"{v:.12g}" for v in row])


def locate_points(mesh, points):
    """Index of a cell containing each point (first match), -1 if outside."""
    points = np.asarray(points, float)
    v = mesh.cell_coordinates()
    out = -np.ones(len(points), dtype=np.int64)
    tol = 1e-12
    if mesh.cell_type == RECTANGLE:
        lo, hi = v.min(axis=1), v.max(axis=1)
        inside = np.all((points[:, None] >= lo[None] - tol) & (points[:, None] <= hi[None] + tol), axis=-1)
    else:
        a, b, c = v[:, 0], v[:, 1], v[:, 2]

        def cross(p, q, r):
            return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])
        P = points[:, None, :]
        area = cross(a, b, c)[None]
        l0 = cross(P, b[None], c[None]) / area
        l1 = cross(a[None], P, c[None]) / area
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol)
    hit = inside.any(axis=1)
    out[hit] = inside[hit].argmax(axis=1)
    return out


def sample_grid(sol: SaddleSolution, n=11):
    """Evaluate the discrete fields on an n x n uniform grid of the unit square."""
    t = np.linspace(0.0, 1.0, n)
    X, Y = np.meshgrid(t, t, indexing="xy")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    cells = locate_points(sol.system.triple.mesh, pts)
    s = sol.sigma(cells, pts)
    u = sol.u(cells, pts)
    g = sol.gamma(cells, pts)
    return {
        "x": pts[:, 0].tolist(), "y": pts[:, 1].tolist(),
        "s11": s[:, 0].tolist(), "s12": s[:, 1].tolist(), "s21": s[:, 2].tolist(), "s22": s[:, 3].tolist(),
        "u1": u[:, 0].tolist(), "u2": u[:, 1].tolist(), "gamma": g[:, 1].tolist(),
    }


def near_null_vector(K):
    """Unit vector approximately in the kernel of K (dense SVD on small systems)."""
    if K.shape[0] > DENSE_NULL_LIMIT:
        return None
    _, s, Vt = np.linalg.svd(K.toarray())
    return Vt[-1]


def solve_saddle(sys: SaddleSystem) -> SaddleSolution:
    """Direct sparse LU solve with one refinement step and a residual check."""
    K = sys.matrix.tocsc()
    b = sys.rhs
    try:
        lu = spla.splu(K, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SingularSystemError(f"saddle matrix is singular ({exc}); stability red flag",
                                  near_null_vector(K)) from exc
    x = lu.solve(b)
    r = b - K @ x
    x += lu.solve(r)
    r = b - K @ x
    scale = max(np.linalg.norm(b), 1e-300)
    res = float(np.linalg.norm(r) / scale) if np.linalg.norm(b) > 0 else float(np.linalg.norm(r))
    if not np.isfinite(res) or res > RESIDUAL_TOL:
        raise SingularSystemError(f"relative residual {res:.3e} exceeds {RESIDUAL_TOL:g}; system near singular",
                                  near_null_vector(K))
    o = sys.offsets
    t = sys.triple
    return SaddleSolution(FieldCoefficients(t.sigma, x[o[0]:o[1]]), FieldCoefficients(t.u, x[o[1]:o[2]]),
                          FieldCoefficients(t.gamma, x[o[2]:o[3]]), res, sys)


def solve(triple, mat, f, degree=None):
    return solve_saddle(assemble_saddle(triple, mat, f, degree))
