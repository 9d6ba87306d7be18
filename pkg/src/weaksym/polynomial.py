"""Polynomials in two variables, reference bases, bubbles and quadrature.

A polynomial is stored as a coefficient array ``c`` whose last two axes index
monomials: ``c[..., i, j]`` multiplies ``x**i * y**j``.  Leading axes are free
batch dimensions, which lets a whole local basis (or one basis per cell) be
differentiated, multiplied and evaluated in a single numpy call.

Reference cells are the triangle ``{(0,0), (1,0), (0,1)}`` and the square
``[0,1]^2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .mesh import RECTANGLE, TRIANGLE

MAX_QUADRATURE_DEGREE = 20

REF_VERTICES = {
    TRIANGLE: np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
    RECTANGLE: np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]),
}
REF_MEASURE = {TRIANGLE: 0.5, RECTANGLE: 1.0}


# -- coefficient-array arithmetic ---------------------------------------

def pad(c, n):
    """Zero-pad (or trim, if the trimmed part is zero) the monomial axes to n x n."""
    c = np.asarray(c, dtype=float)
    m = c.shape[-1]
    if m == n:
        return c
    if m > n:
        if np.any(c[..., n:, :]) or np.any(c[..., :, n:]):
            raise ValueError("cannot trim nonzero coefficients")
        return c[..., :n, :n].copy()
    out = np.zeros(c.shape[:-2] + (n, n))
    out[..., :m, :m] = c
    return out


def monomial(i, j, n=None):
    n = max(i, j) + 1 if n is None else n
    c = np.zeros((n, n))
    c[i, j] = 1.0
    return c


def affine(a0, ax, ay, n=2):
    """The polynomial a0 + ax*x + ay*y."""
    c = np.zeros((n, n))
    c[0, 0], c[1, 0], c[0, 1] = a0, ax, ay
    return c


def pmul(a, b):
    """Product of polynomials; ``a`` may carry batch axes, ``b`` broadcasts."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    na, nb = a.shape[-1], b.shape[-1]
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(shape + (na + nb - 1, na + nb - 1))
    for p in range(nb):
        for q in range(nb):
            bpq = b[..., p, q]
            if not np.any(bpq):
                continue
            out[..., p:p + na, q:q + na] += a * np.asarray(bpq)[..., None, None]
    return out


def pder(c, axis):
    """Partial derivative: axis 0 is d/dx, axis 1 is d/dy.  Shape preserved."""
    c = np.asarray(c, float)
    n = c.shape[-1]
    out = np.zeros_like(c)
    k = np.arange(1, n, dtype=float)
    if axis == 0:
        out[..., :-1, :] = c[..., 1:, :] * k[:, None]
    else:
        out[..., :, :-1] = c[..., :, 1:] * k[None, :]
    return out


def monomial_table(points, n):
    """``T[..., i, j] = x**i * y**j`` for points of shape ``(..., 2)``."""
    points = np.asarray(points, float)
    px = points[..., 0, None] ** np.arange(n)
    py = points[..., 1, None] ** np.arange(n)
    return px[..., :, None] * py[..., None, :]


def peval(c, points):
    """Evaluate ``c`` (batch shape B) at points (shape P + (2,)); returns B + P."""
    c = np.asarray(c, float)
    n = c.shape[-1]
    tab = monomial_table(points, n)
    batch = c.shape[:-2]
    flat_c = c.reshape(-1, n * n)
    flat_t = tab.reshape(-1, n * n)
    return (flat_c @ flat_t.T).reshape(batch + tab.shape[:-2])


def total_degree(c, tol=0.0):
    """Largest i + j carrying a coefficient with magnitude above tol (-1 if zero)."""
    c = np.abs(np.asarray(c, float))
    n = c.shape[-1]
    mask = c.reshape(-1, n, n).max(axis=0) > tol
    if not mask.any():
        return -1
    i, j = np.nonzero(mask)
    return int((i + j).max())


def compose_affine(c, offset, scale):
    """Coefficients of ``q(x) = c(offset + scale * x)`` (uniform scale)."""
    c = np.asarray(c, float)
    n = c.shape[-1]
    out = np.zeros_like(c)
    bx = affine(offset[0], scale, 0.0)
    by = affine(offset[1], 0.0, scale)
    px = [monomial(0, 0, 1)]
    py = [monomial(0, 0, 1)]
    for _ in range(1, n):
        px.append(pmul(px[-1], bx))
        py.append(pmul(py[-1], by))
    for i in range(n):
        for j in range(n):
            cij = c[..., i, j]
            if not np.any(cij):
                continue
            term = pad(pmul(px[i], py[j]), n)
            out += cij[..., None, None] * term
    return out


# -- exponent sets --------------------------------------------------------

def exponents_P(k):
    """Monomial exponents of total degree <= k, graded order."""
    return [(d - j, j) for d in range(k + 1) for j in range(d + 1)]


def exponents_homogeneous(k):
    return [(k - j, j) for j in range(k + 1)]


def exponents_Q(k):
    return [(i, j) for d in range(2 * k + 1) for j in range(d + 1) for i in [d - j] if i <= k and j <= k]


def exponents_S2():
    return [(0, 0), (1, 0), (0, 1), (1, 1), (2, 0), (0, 2), (2, 1), (1, 2)]


def dim_P(k):
    return (k + 1) * (k + 2) // 2 if k >= 0 else 0


def dim_Q(k):
    return (k + 1) ** 2 if k >= 0 else 0


def polys_from_exponents(exps, n=None):
    """Stack of monomial coefficient arrays, one per exponent pair."""
    n = (max(max(e) for e in exps) + 1) if n is None else n
    out = np.zeros((len(exps), n, n))
    for r, (i, j) in enumerate(exps):
        out[r, i, j] = 1.0
    return out


# -- quadrature ----------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int
    cell_type: str

    def __len__(self):
        return len(self.weights)


def gauss_legendre_01(n):
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def _quadrature_rule(cell_type, degree):
    n = degree // 2 + 1
    if cell_type == RECTANGLE:
        x, w = gauss_legendre_01(n)
        X, Y = np.meshgrid(x, x, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        wts = np.outer(w, w).ravel()
    elif cell_type == TRIANGLE:
        # collapsed (Duffy) product: Gauss-Jacobi(1, 0) in the collapsing direction
        a, wa = roots_jacobi(n, 1.0, 0.0)
        u = 0.5 * (a + 1.0)
        wu = wa / 4.0
        v, wv = gauss_legendre_01(n)
        U, V = np.meshgrid(u, v, indexing="ij")
        pts = np.stack([U.ravel(), (V * (1.0 - U)).ravel()], axis=1)
        wts = np.outer(wu, wv).ravel()
    else:
        raise ValueError(f"unknown cell type {cell_type!r}")
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule(pts, wts, degree, cell_type)


def quadrature_rule(cell_type: str, exactness_degree: int) -> QuadratureRule:
    """Positive-weight rule on the reference cell, exact up to the given degree."""
    if int(exactness_degree) != exactness_degree or exactness_degree < 0:
        raise ValueError(f"invalid exactness degree {exactness_degree!r}")
    if exactness_degree > MAX_QUADRATURE_DEGREE:
        raise ValueError(f"quadrature degree {exactness_degree} > {MAX_QUADRATURE_DEGREE} unsupported")
    return _quadrature_rule(cell_type, int(exactness_degree))


def reference_monomial_integral(cell_type, i, j):
    """Exact integral of x**i y**j over the reference cell (as a float)."""
    from math import factorial
    if cell_type == RECTANGLE:
        return 1.0 / ((i + 1) * (j + 1))
    return factorial(i) * factorial(j) / factorial(i + j + 2)


def check_exactness(rule: QuadratureRule, degree=None, rtol=1e-13):
    """Worst relative monomial error of ``rule`` up to ``degree``."""
    degree = rule.degree if degree is None else degree
    worst = 0.0
    for i, j in exponents_P(degree):
        exact = reference_monomial_integral(rule.cell_type, i, j)
        approx = float(np.sum(rule.weights * rule.points[:, 0] ** i * rule.points[:, 1] ** j))
        worst = max(worst, abs(approx - exact) / abs(exact))
    return worst


# -- barycentric coordinates and bubbles ----------------------------------

def barycentric_polys(vertices):
    """Affine polynomials lambda_i for a triangle with the given vertices."""
    v = np.asarray(vertices, float)
    A = np.column_stack([np.ones(3), v])  # rows: (1, x_i, y_i)
    coef = np.linalg.solve(A, np.eye(3))  # column i: (a0, ax, ay) of lambda_i
    return np.stack([affine(*coef[:, i]) for i in range(3)])


def triangle_bubble_poly(vertices):
    lam = barycentric_polys(vertices)
    return pmul(pmul(lam[0], lam[1]), lam[2])


def rectangle_bubble_poly(vertices):
    """x(1-x)y(1-y) transported to the axis-aligned rectangle ``vertices``."""
    v = np.asarray(vertices, float)
    x0, y0 = v.min(axis=0)
    x1, y1 = v.max(axis=0)
    sx = affine(-x0 / (x1 - x0), 1.0 / (x1 - x0), 0.0)
    sy = affine(-y0 / (y1 - y0), 0.0, 1.0 / (y1 - y0))
    one = affine(1.0, 0.0, 0.0)
    return pmul(pmul(sx, one - sx), pmul(sy, one - sy))


def _check_in_reference(cell_type, point, tol=1e-12):
    x, y = float(point[0]), float(point[1])
    if cell_type == TRIANGLE:
        inside = x >= -tol and y >= -tol and x + y <= 1 + tol
    else:
        inside = -tol <= x <= 1 + tol and -tol <= y <= 1 + tol
    if not inside:
        raise ValueError(f"point {point!r} lies outside the reference {cell_type}")


_B_TRI = triangle_bubble_poly(REF_VERTICES[TRIANGLE])
_B_RECT = rectangle_bubble_poly(REF_VERTICES[RECTANGLE])


def _value_and_gradient(c, point):
    p = np.asarray(point, float)
    return float(peval(c, p)), np.array([float(peval(pder(c, 0), p)), float(peval(pder(c, 1), p))])


def bubble_triangle(point):
    """Cubic bubble lambda_1 lambda_2 lambda_3 on the reference triangle."""
    _check_in_reference(TRIANGLE, point)
    return _value_and_gradient(_B_TRI, point)


def bubble_rectangle(point):
    """Quartic bubble x(1-x)y(1-y) on the reference square."""
    _check_in_reference(RECTANGLE, point)
    return _value_and_gradient(_B_RECT, point)


# -- nodal sets ------------------------------------------------------------

def lagrange_nodes_P(k, vertices):
    """Equispaced P_k nodes of a triangle: vertices, edge nodes, interior."""
    v = np.asarray(vertices, float)
    if k == 0:
        return v.mean(axis=0, keepdims=True)
    nodes = [v[0], v[1], v[2]]
    for a, b in ((1, 2), (2, 0), (0, 1)):  # edge i opposite vertex i
        for t in range(1, k):
            nodes.append(v[a] + (v[b] - v[a]) * t / k)
    for j in range(1, k):
        for i in range(1, k - j):
            nodes.append(v[0] + (v[1] - v[0]) * i / k + (v[2] - v[0]) * j / k)
    return np.array(nodes)


def lagrange_nodes_Q(k, vertices):
    v = np.asarray(vertices, float)
    lo, hi = v.min(axis=0), v.max(axis=0)
    t = np.linspace(0.0, 1.0, k + 1)
    return np.array([lo + (hi - lo) * np.array([t[i], t[j]]) for j in range(k + 1) for i in range(k + 1)])


def s2_nodes(vertices):
    """Four vertices followed by the four edge midpoints."""
    v = np.asarray(vertices, float)
    mids = 0.5 * (v + np.roll(v, -1, axis=0))
    return np.concatenate([v, mids])


def nodal_basis(exps, nodes, n=None):
    """Coefficient arrays of the Lagrange basis dual to point evaluation at nodes."""
    polys = polys_from_exponents(exps, n)
    V = peval(polys, nodes)  # V[e, n] = monomial e at node n
    coef = np.linalg.solve(V.T, np.eye(len(exps)))  # columns: basis in exponent coords
    return np.einsum("eb,eij->bij", coef, polys)


def modal_basis(exps, vertices, cell_type, n=None, measure=None):
    """Basis of span(monomials) orthonormal for the mean inner product (1/|T|) int_T.

    Gram-Schmidt order follows ``exps`` so the first member is constant when
    ``exps[0] == (0, 0)``.
    """
    polys = polys_from_exponents(exps, n)
    deg = 2 * max(i + j for i, j in exps) if cell_type == TRIANGLE else 2 * max(max(e) for e in exps) * 2
    pts, wts = mapped_quadrature(cell_type, vertices, min(deg, MAX_QUADRATURE_DEGREE))
    vals = peval(polys, pts)
    G = (vals * wts) @ vals.T / wts.sum()
    L = np.linalg.cholesky(G)
    coef = np.linalg.solve(L, np.eye(len(exps)))  # rows: orthonormal combos
    return np.einsum("be,eij->bij", coef, polys)


def mapped_quadrature(cell_type, vertices, degree):
    """Reference rule pushed to a physical cell: (points, weights)."""
    rule = quadrature_rule(cell_type, degree)
    v = np.asarray(vertices, float)
    if cell_type == TRIANGLE:
        J = np.column_stack([v[1] - v[0], v[2] - v[0]])
    else:
        J = np.column_stack([v[1] - v[0], v[3] - v[0]])
    pts = v[0] + rule.points @ J.T
    return pts, rule.weights * abs(np.linalg.det(J))


def legendre_01(n_max):
    """Orthonormal shifted Legendre polynomials on [0, 1] as 1D coefficient rows."""
    from numpy.polynomial import legendre as L
    from numpy.polynomial import polynomial as P
    rows = []
    for j in range(n_max + 1):
        c = np.zeros(j + 1)
        c[j] = 1.0
        power = L.leg2poly(c)  # in t on [-1, 1]
        # substitute t = 2s - 1
        out = np.zeros(1)
        tpow = np.ones(1)
        for a in power:
            out = P.polyadd(out, a * tpow)
            tpow = P.polymul(tpow, [-1.0, 2.0])
        out = out * np.sqrt(2 * j + 1)
        rows.append(np.pad(out, (0, n_max + 1 - len(out))))
    return np.array(rows)


# -- reference bases ------------------------------------------------------

KINDS = ("P", "Q", "lagrangeP", "lagrangeQ", "S2", "bubble")
SHAPES = {"scalar": 1, "vector": 2, "matrix": 4, "skew": 1}


@dataclass(frozen=True)
class ReferenceBasis:
    """Scalar basis on the reference cell.

    ``kind`` is one of ``P``/``Q`` (modal, orthonormal), ``lagrangeP``,
    ``lagrangeQ``, ``S2`` (nodal) or ``bubble`` (bubble times modal P_{k-1}).
    ``value_shape`` only records how many scalar copies a global space uses.
    """
    cell_type: str
    degree: int
    kind: str = "P"
    value_shape: str = "scalar"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.value_shape not in SHAPES:
            raise ValueError(f"unknown value shape {self.value_shape!r}")
        tri = self.cell_type == TRIANGLE
        if self.kind in ("P", "lagrangeP", "bubble") and not tri and self.kind != "P":
            raise ValueError(f"{self.kind} basis needs a triangle")
        if self.kind in ("Q", "lagrangeQ", "S2") and tri:
            raise ValueError(f"{self.kind} basis needs a rectangle")
        if self.kind == "S2" and self.degree != 2:
            raise ValueError("serendipity basis is degree 2")
        if self.kind.startswith("lagrange") and self.degree < 1:
            raise ValueError("Lagrange bases need degree >= 1")

    @property
    def coefficients(self):
        return _reference_coefficients(self.cell_type, self.degree, self.kind)

    @property
    def dim(self):
        return len(self.coefficients)

    @property
    def nodes(self):
        v = REF_VERTICES[self.cell_type]
        if self.kind == "lagrangeP":
            return lagrange_nodes_P(self.degree, v)
        if self.kind == "lagrangeQ":
            return lagrange_nodes_Q(self.degree, v)
        if self.kind == "S2":
            return s2_nodes(v)
        raise AttributeError("modal bases have no nodes")

    def tabulate(self, points):
        """Values (npts, dim) and gradients (npts, dim, 2) at reference points."""
        c = self.coefficients
        pts = np.atleast_2d(np.asarray(points, float))
        vals = peval(c, pts).T
        grads = np.stack([peval(pder(c, 0), pts).T, peval(pder(c, 1), pts).T], axis=-1)
        return vals, grads


@lru_cache(maxsize=None)
def _reference_coefficients(cell_type, degree, kind):
    v = REF_VERTICES[cell_type]
    if kind == "P":
        c = modal_basis(exponents_P(degree), v, cell_type)
    elif kind == "Q":
        c = modal_basis(exponents_Q(degree), v, cell_type)
    elif kind == "lagrangeP":
        c = nodal_basis(exponents_P(degree), lagrange_nodes_P(degree, v))
    elif kind == "lagrangeQ":
        c = nodal_basis(exponents_Q(degree), lagrange_nodes_Q(degree, v))
    elif kind == "S2":
        c = nodal_basis(exponents_S2(), s2_nodes(v))
    else:  # bubble
        if degree < 1:
            raise ValueError("bubble basis needs degree >= 1")
        b = _B_TRI if cell_type == TRIANGLE else _B_RECT
        c = pmul(modal_basis(exponents_P(degree - 1), v, cell_type), b)
    c.setflags(write=False)
    return c


def eval_scalar_basis(basis: ReferenceBasis, point):
    """Values and gradients of every basis member at one reference point."""
    _check_in_reference(basis.cell_type, point)
    vals, grads = basis.tabulate(np.asarray(point, float)[None, :])
    return vals[0], grads[0]
