"""Quadrature on meshes and generic bilinear/linear form assembly."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import TRIANGLE, Mesh
from .polynomial import MAX_QUADRATURE_DEGREE, QuadratureRule, quadrature_rule


@dataclass(frozen=True)
class CellQuadrature:
    """A reference rule mapped to every cell: points (nc, nq, 2), weights (nc, nq)."""
    mesh: Mesh
    rule: QuadratureRule
    points: np.ndarray
    weights: np.ndarray

    @property
    def degree(self):
        return self.rule.degree


def cell_quadrature(mesh: Mesh, degree: int, rule: QuadratureRule | None = None) -> CellQuadrature:
    degree = min(int(degree), MAX_QUADRATURE_DEGREE)
    rule = rule or quadrature_rule(mesh.cell_type, degree)
    v = mesh.cell_coordinates()
    e1 = v[:, 1] - v[:, 0]
    e2 = (v[:, 2] if mesh.cell_type == TRIANGLE else v[:, 3]) - v[:, 0]
    pts = v[:, None, 0] + rule.points[None, :, 0, None] * e1[:, None] + rule.points[None, :, 1, None] * e2[:, None]
    det = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    return CellQuadrature(mesh, rule, pts, rule.weights[None, :] * det[:, None])


def row_divergence(grads):
    """Row-wise divergence of matrix-field gradients (..., 4, 2) -> (..., 2)."""
    return np.stack([grads[..., 0, 0] + grads[..., 1, 1], grads[..., 2, 0] + grads[..., 3, 1]], axis=-1)


def vector_divergence(grads):
    """Divergence of vector-field gradients (..., 2, 2) -> (...)."""
    return grads[..., 0, 0] + grads[..., 1, 1]


def local_matrices(row_vals, col_vals, weights):
    """Per-cell Gram blocks sum_q w * row . col, shapes (nc, nq, nr, K) x (nc, nq, nc', K)."""
    return np.einsum("cqik,cqjk,cq->cij", row_vals, col_vals, weights, optimize=True)


def assemble_matrix(row_space, col_space, row_vals, col_vals, weights) -> sp.csr_matrix:
    """Global sparse matrix of (col, row) pairings; rows index ``row_space`` dofs."""
    A = local_matrices(row_vals, col_vals, weights)
    return scatter_matrix(row_space, col_space, A)


def scatter_matrix(row_space, col_space, A) -> sp.csr_matrix:
    rd, cd = row_space.cell_dofs, col_space.cell_dofs
    R = np.broadcast_to(rd[:, :, None], A.shape)
    C = np.broadcast_to(cd[:, None, :], A.shape)
    keep = (R >= 0) & (C >= 0)
    M = sp.coo_matrix((A[keep], (R[keep], C[keep])), shape=(row_space.ndofs, col_space.ndofs))
    return M.tocsr()


def assemble_vector(space, vals, fvals, weights) -> np.ndarray:
    """Global vector of (f, phi_i) with basis values (nc, nq, nl, K) and f (nc, nq, K)."""
    b = np.einsum("cqik,cqk,cq->ci", vals, fvals, weights, optimize=True)
    return scatter_vector(space, b)


def scatter_vector(space, b):
    out = np.zeros(space.ndofs)
    d = space.cell_dofs
    keep = d >= 0
    np.add.at(out, d[keep], b[keep])
    return out


def evaluate_callable(f, quad: CellQuadrature, ncomp: int):
    """Evaluate ``f(points)`` on quadrature points and flatten to (nc, nq, ncomp)."""
    vals = np.asarray(f(quad.points), float)
    nc, nq = quad.points.shape[:2]
    if ncomp == 1 and vals.shape == (nc, nq):
        return vals[..., None]
    return vals.reshape(nc, nq, ncomp)


def field_values(space, coef, quad: CellQuadrature, derivatives=False):
    """Values (nc, nq, K) (and gradients (nc, nq, K, 2)) of a discrete field."""
    vals, grads = space.tabulate(quad, derivatives=derivatives)
    # tabulate applies signs and scales, so use raw global coefficients here
    c = np.where(space.cell_dofs >= 0, np.asarray(coef, float)[np.maximum(space.cell_dofs, 0)], 0.0)
    v = np.einsum("cqik,ci->cqk", vals, c, optimize=True)
    if not derivatives:
        return v
    g = np.einsum("cqikd,ci->cqkd", grads, c, optimize=True)
    return v, g


def l2_norm(values, weights):
    """sqrt(sum_q w |v|^2) for values (nc, nq, K)."""
    return float(np.sqrt(np.einsum("cqk,cqk,cq->", values, values, weights)))
