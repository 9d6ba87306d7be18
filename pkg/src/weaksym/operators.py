"""Algebraic operators, L2 projections and the canonical H(div) interpolant.

Matrix fields are stored flat as ``(t11, t12, t21, t22)``; rows are the
H(div) directions.  Skew fields are identified with scalars through
``chi(r) = [[0, r], [-r, 0]]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from . import forms
from . import polynomial as poly
from .spaces import FESpace, curl_from_gradients


# -- algebra -------------------------------------------------------------------

def apply_S(xi):
    """S(xi) = xi / 2 as a row field, for vectors of shape (..., 2)."""
    return 0.5 * np.asarray(xi, float)


def apply_S_inverse(row):
    return 2.0 * np.asarray(row, float)


def apply_chi(r):
    """chi(r) = [[0, r], [-r, 0]]; r may be an array, output shape r.shape + (2, 2)."""
    r = np.asarray(r, float)
    out = np.zeros(r.shape + (2, 2))
    out[..., 0, 1] = r
    out[..., 1, 0] = -r
    return out


def apply_chi_inverse(m, check=True):
    m = np.asarray(m, float)
    if check and not np.allclose(m, -np.swapaxes(m, -1, -2), atol=1e-12 * max(1.0, np.abs(m).max(initial=0.0))):
        raise ValueError("chi inverse needs a skew-symmetric matrix")
    return m[..., 0, 1].copy()


def skw_part(m):
    m = np.asarray(m, float)
    return 0.5 * (m - np.swapaxes(m, -1, -2))


def sym_part(m):
    m = np.asarray(m, float)
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def skw_scalar(flat):
    """chi^{-1}(skw tau) for flat matrix values (..., 4)."""
    return 0.5 * (flat[..., 1] - flat[..., 2])


def div_S_scalar(xi_grads):
    """div S xi = (d1 xi1 + d2 xi2) / 2 from vector gradients (..., 2, 2)."""
    return 0.5 * (xi_grads[..., 0, 0] + xi_grads[..., 1, 1])


# -- discrete fields -----------------------------------------------------------

@dataclass
class FieldCoefficients:
    """A discrete field: a coefficient vector in a given space."""
    space: FESpace
    coef: np.ndarray

    def __post_init__(self):
        self.coef = np.asarray(self.coef, float)
        if self.coef.shape != (self.space.ndofs,):
            raise ValueError(f"expected {self.space.ndofs} coefficients, got {self.coef.shape}")

    @property
    def value_shape(self):
        return self.space.desc.value_shape

    def values(self, quad, derivatives=False):
        return forms.field_values(self.space, self.coef, quad, derivatives)

    def __call__(self, cells, points):
        return self.space.evaluate(self.coef, cells, points)


# -- projections ---------------------------------------------------------------

def default_degree(space, extra=4):
    return min(2 * max(space.degree, 0) + extra, poly.MAX_QUADRATURE_DEGREE)


def mass_matrix(space, quad=None):
    quad = quad or forms.cell_quadrature(space.mesh, 2 * max(space.degree, 0))
    vals, _ = space.tabulate(quad, derivatives=False)
    return forms.assemble_matrix(space, space, vals, vals, quad.weights)


def _cell_local(space):
    d = space.cell_dofs
    return bool(np.all(d >= 0)) and space.discontinuous


def l2_project(space, f, quad=None, values=None):
    """L2 projection of a callable (or of values on ``quad``) into ``space``.

    ``f(points)`` receives points of shape (nc, nq, 2) and returns values of
    shape (nc, nq) or (nc, nq, ncomp) (matrices may be (nc, nq, 2, 2)).
    Discontinuous targets are solved cell by cell.
    """
    quad = quad or forms.cell_quadrature(space.mesh, default_degree(space))
    vals, _ = space.tabulate(quad, derivatives=False)
    if values is None:
        values = forms.evaluate_callable(f, quad, space.ncomp)
    values = np.asarray(values, float).reshape(vals.shape[0], vals.shape[1], space.ncomp)
    b_loc = np.einsum("cqik,cqk,cq->ci", vals, values, quad.weights, optimize=True)
    if _cell_local(space):
        G = forms.local_matrices(vals, vals, quad.weights)
        try:
            x_loc = np.linalg.solve(G, b_loc[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"singular local Gram matrix in {space!r}") from exc
        coef = np.zeros(space.ndofs)
        coef[space.cell_dofs] = x_loc
        return FieldCoefficients(space, coef)
    G = forms.scatter_matrix(space, space, forms.local_matrices(vals, vals, quad.weights))
    b = forms.scatter_vector(space, b_loc)
    try:
        lu = spla.splu(G.tocsc())
    except RuntimeError as exc:
        raise np.linalg.LinAlgError(f"singular Gram matrix in {space!r}") from exc
    return FieldCoefficients(space, lu.solve(b))


# -- canonical interpolation ---------------------------------------------------

def _edge_points(mesh, npts):
    s, w = poly.gauss_legendre_01(npts)
    a = mesh.vertices[mesh.edges[:, 0]]
    b = mesh.vertices[mesh.edges[:, 1]]
    pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    return s, w, pts


def interpolate_hdiv(space: FESpace, tau, edge_points=None) -> FieldCoefficients:
    """Canonical DOF interpolant into an H(div) space (vector or matrix valued).

    ``tau(points)`` maps (..., 2) points to (..., 2) vectors or (..., 2, 2)
    matrices.  On enriched spaces the base block is interpolated and the
    enrichment coefficients are set to zero.
    """
    info = space.hdiv
    if not info or info.get("restricted"):
        raise ValueError(f"{space!r} is not a DOF-interpolable H(div) space")
    mesh = space.mesh
    ne, ni, nvec = info["edge_moments"], info["interior"], info["nvec"]
    rows = 1 if space.ncomp == 2 else 2
    coef = np.zeros(space.ndofs)
    npts = space.desc.degree + 4
    s, w, epts = _edge_points(mesh, npts)
    ev = np.asarray(tau(epts), float).reshape(mesh.num_edges, npts, rows, 2)
    flux = np.einsum("eqrc,ec->erq", ev, mesh.edge_normals())
    leg = poly.legendre_01(ne - 1)
    q = np.array([np.polynomial.polynomial.polyval(s, leg[j]) for j in range(ne)])  # (ne, nq)
    mom = np.einsum("erq,jq,q->rej", flux, q, w)  # (rows, nedge, ne)
    for r in range(rows):
        coef[r * nvec: r * nvec + mesh.num_edges * ne] = mom[r].ravel()
    if ni:
        quad = forms.cell_quadrature(mesh, min(2 * space.desc.degree + 6, poly.MAX_QUADRATURE_DEGREE))
        tv = np.asarray(tau(quad.points), float).reshape(mesh.num_cells, -1, rows, 2)
        hat = (quad.points - space.centers[:, None, :]) / space.h[:, None, None]
        tests = info["tests"]  # (nshape, ni, 2, n, n)
        area = quad.weights.sum(axis=1)
        for sidx in range(tests.shape[0]):
            cells = np.flatnonzero(space.shape_index == sidx)
            if not len(cells):
                continue
            tval = poly.peval(tests[sidx], hat[cells[0]])  # (ni, 2, nq)
            m = np.einsum("cqrd,idq,cq->cri", tv[cells], tval, quad.weights[cells]) / area[cells, None, None]
            for r in range(rows):
                base = r * nvec + mesh.num_edges * ne
                idx = base + cells[:, None] * ni + np.arange(ni)
                coef[idx] = m[:, r, :]
    return FieldCoefficients(space, coef)


# -- the commuting triangle -----------------------------------------------------

def curl_image_values(xi_space, quad):
    """Values of curl xi (nc, nq, nloc, 4) and div S xi (nc, nq, nloc) per basis member."""
    _, g = xi_space.tabulate(quad)
    return curl_from_gradients(g), div_S_scalar(g)


def discrete_identity_residual(xi_space: FESpace, gamma_space: FESpace, quad=None):
    """Check skw curl xi = chi div S xi on a basis of Xi_h.

    Returns ``(projected, pointwise)``: the max over basis members of
    ||Q_h skw curl xi - Q_h chi div S xi|| / (1 + ||curl xi||) and the max
    pointwise discrepancy at quadrature points.
    """
    if xi_space.mesh is not gamma_space.mesh:
        raise ValueError("spaces live on different meshes")
    deg = max(2 * max(xi_space.degree, 1), xi_space.degree - 1 + gamma_space.degree)
    quad = quad or forms.cell_quadrature(xi_space.mesh, deg)
    curl, divS = curl_image_values(xi_space, quad)
    skw_curl = skw_scalar(curl)  # chi^{-1} of skw curl xi
    pointwise = float(np.abs(skw_curl - divS).max(initial=0.0))
    gvals, _ = gamma_space.tabulate(quad, derivatives=False)
    g = gvals[..., 1]  # chi^{-1} of the skew basis; matrix inner product doubles it
    Bskw = forms.assemble_matrix(gamma_space, xi_space, g[..., None], 2 * skw_curl[..., None], quad.weights)
    Bdiv = forms.assemble_matrix(gamma_space, xi_space, g[..., None], 2 * divS[..., None], quad.weights)
    G = mass_matrix(gamma_space, quad)
    lu = spla.splu(G.tocsc())
    diff = (Bskw - Bdiv).toarray()
    X = lu.solve(diff) if diff.size else diff
    proj_norms = np.sqrt(np.maximum(np.einsum("ij,ij->j", X, G @ X), 0.0)) if X.size else np.zeros(0)
    curl_norm = np.sqrt(np.einsum("cqik,cqik,cq->ci", curl, curl, quad.weights))
    cn = np.zeros(xi_space.ndofs)
    d = xi_space.cell_dofs
    np.add.at(cn, d[d >= 0], curl_norm[d >= 0] ** 2)
    cn = np.sqrt(cn)
    projected = float((proj_norms / (1.0 + cn)).max(initial=0.0))
    return projected, pointwise
