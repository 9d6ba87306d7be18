"""Global finite element spaces and the catalogue of element triples.

Every space is described per cell by polynomial coefficient arrays in the
cell's *scaled* coordinates ``xh = (x - centroid) / h_T``.  Local bases only
depend on the cell shape in these coordinates (plus the global orientation
of its edges), so they are built once per distinct shape and shared.

Global functions restricted to a cell are ``sign * scale * local``, with the
sign table carrying the H(div) facet orientation and ``scale`` any per-cell
size factor (only the curl-bubble spaces use one).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import polynomial as poly
from .mesh import RECTANGLE, TRIANGLE, Mesh

HDIV_FAMILIES = ("RTN", "BDM", "rBDM", "rRTN")
L2_FAMILIES = ("Pd", "Qd")
H1_FAMILIES = ("Pc", "Qc", "S2c")
XI_FAMILIES = ("BubbleVec", "CurlBubbleHat", "CurlBubbleHatRect", "Mini", "MacroBubble")
FAMILIES = HDIV_FAMILIES + L2_FAMILIES + H1_FAMILIES + XI_FAMILIES

NCOMP = {"scalar": 1, "vector": 2, "matrix": 4, "skew": 4}

_CELL_OF = {
    "RTN": TRIANGLE, "BDM": TRIANGLE, "rBDM": RECTANGLE, "rRTN": RECTANGLE,
    "Qd": RECTANGLE, "Pc": TRIANGLE, "Qc": RECTANGLE, "S2c": RECTANGLE,
    "BubbleVec": TRIANGLE, "CurlBubbleHat": TRIANGLE, "CurlBubbleHatRect": RECTANGLE,
    "Mini": TRIANGLE, "MacroBubble": TRIANGLE,
}
_MIN_DEGREE = {
    "RTN": 1, "BDM": 1, "rBDM": 1, "rRTN": 1, "Pd": 0, "Qd": 0, "Pc": 1, "Qc": 1,
    "S2c": 2, "BubbleVec": 1, "CurlBubbleHat": 1, "CurlBubbleHatRect": 1, "Mini": 1,
    "MacroBubble": 2,
}
ENRICHMENT_KINDS = ("B", "Bhat", "Bhat_r")
RANK_TOL = 1e-10


class SpaceError(ValueError):
    pass


@dataclass(frozen=True)
class SpaceDescriptor:
    """Declarative description of a finite element space.

    ``enrichment`` is ``(kind, k)`` with kind in ``B`` (B_k), ``Bhat`` (the
    curl-bubble space built on mean-free P_k) or ``Bhat_r`` (its rectangular
    version); the space is then base + curl(enrichment).
    """
    family: str
    degree: int
    value_shape: str = "scalar"
    enrichment: tuple | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpaceError(f"unknown family {self.family!r}")
        if self.value_shape not in NCOMP:
            raise SpaceError(f"unknown value shape {self.value_shape!r}")
        if self.degree < _MIN_DEGREE[self.family]:
            raise SpaceError(f"{self.family} needs degree >= {_MIN_DEGREE[self.family]}, got {self.degree}")
        if self.family == "S2c" and self.degree != 2:
            raise SpaceError("S2c is the 8-node serendipity space of degree 2")
        if self.family == "Mini" and self.degree != 1:
            raise SpaceError("Mini is P1 + cubic bubble")
        if self.family in HDIV_FAMILIES and self.value_shape not in ("vector", "matrix"):
            raise SpaceError("H(div) spaces are vector or matrix valued")
        if self.family in XI_FAMILIES and self.value_shape != "vector":
            raise SpaceError(f"{self.family} is vector valued")
        if self.enrichment is not None:
            kind, k = self.enrichment
            if self.family not in HDIV_FAMILIES or self.value_shape != "matrix":
                raise SpaceError("only matrix-valued H(div) spaces take an enrichment")
            if kind not in ENRICHMENT_KINDS or k < 1:
                raise SpaceError(f"invalid enrichment {self.enrichment!r}")

    @property
    def continuity(self):
        if self.family in HDIV_FAMILIES:
            return "H(div)-rowwise" if self.value_shape == "matrix" else "H(div)"
        if self.family in L2_FAMILIES:
            return "L2"
        if self.family in ("BubbleVec", "CurlBubbleHat", "CurlBubbleHatRect"):
            return "H1-cell-bubble"
        return "H1"

    def label(self):
        s = f"{self.family}_{self.degree}({self.value_shape})"
        if self.enrichment:
            s += f"+curl {self.enrichment[0]}_{self.enrichment[1]}"
        return s


# -- per-cell geometry -----------------------------------------------------

@dataclass(frozen=True)
class LocalCell:
    cell_type: str
    verts: np.ndarray        # scaled vertex coordinates
    edge_forward: tuple      # local edge traversed low->high global index?

    @property
    def key(self):
        return (self.cell_type, tuple(np.round(self.verts, 9).ravel().tolist()), self.edge_forward)


def _cell_geometry(mesh: Mesh):
    coords = mesh.cell_coordinates()
    centers = coords.mean(axis=1)
    h = mesh.h_per_cell
    hat = (coords - centers[:, None, :]) / h[:, None, None]
    fwd = np.array([[mesh.cells[c, a] < mesh.cells[c, b] for a, b in mesh.local_edges]
                    for c in range(mesh.num_cells)])
    return centers, h, hat, fwd


def _shape_groups(mesh: Mesh):
    centers, h, hat, fwd = _cell_geometry(mesh)
    keys, reps, index = {}, [], np.empty(mesh.num_cells, dtype=np.int64)
    for c in range(mesh.num_cells):
        lc = LocalCell(mesh.cell_type, hat[c], tuple(bool(t) for t in fwd[c]))
        k = lc.key
        if k not in keys:
            keys[k] = len(reps)
            reps.append(lc)
        index[c] = keys[k]
    return centers, h, reps, index


# -- local element builders --------------------------------------------------

def _vec(p, comp, n):
    out = np.zeros((2, n, n))
    out[comp] = poly.pad(p, n)
    return out


def _curl_scalar(p):
    """curl p = (-dp/dy, dp/dx) in the coordinates of p."""
    return np.stack([-poly.pder(p, 1), poly.pder(p, 0)], axis=-3)


def rot_skew(r):
    """Row-wise rot of the skew field chi(r), rot v = d1 v2 - d2 v1 per row.

    Rows of chi(r) are (0, r) and (-r, 0), so the result is grad r.  This is
    the choice for which (curl(b rot eta1), eta2) = (b rot eta1, rot eta2).
    """
    return np.stack([poly.pder(r, 0), poly.pder(r, 1)], axis=-3)


def _mean_inner(a, b, pts, wts):
    """(1/|T|) int a.b for stacks of vector polynomials (na,2,n,n), (nb,2,n,n)."""
    va = poly.peval(a, pts)  # (na, 2, nq)
    vb = poly.peval(b, pts)
    return np.einsum("acq,bcq,q->ab", va, vb, wts) / wts.sum()


def _orthonormalize(funcs, pts, wts):
    G = _mean_inner(funcs, funcs, pts, wts)
    L = np.linalg.cholesky(G)
    C = np.linalg.solve(L, np.eye(len(funcs)))
    return np.einsum("be,e...->b...", C, funcs)


def _hdiv_spanning(family, k, lc, n):
    vecs = []
    if family == "BDM":
        for e in poly.exponents_P(k):
            vecs += [_vec(poly.monomial(*e), 0, n), _vec(poly.monomial(*e), 1, n)]
    elif family == "RTN":
        for e in poly.exponents_P(k - 1):
            vecs += [_vec(poly.monomial(*e), 0, n), _vec(poly.monomial(*e), 1, n)]
        for i, j in poly.exponents_homogeneous(k - 1):
            vecs.append(np.stack([poly.pad(poly.monomial(i + 1, j), n), poly.pad(poly.monomial(i, j + 1), n)]))
    elif family == "rBDM":
        for e in poly.exponents_P(k):
            vecs += [_vec(poly.monomial(*e), 0, n), _vec(poly.monomial(*e), 1, n)]
        for p in (poly.monomial(k + 1, 1), poly.monomial(1, k + 1)):
            vecs.append(poly.pad(_curl_scalar(p), n))
    elif family == "rRTN":
        for i in range(k + 1):
            for j in range(k):
                vecs.append(_vec(poly.monomial(i, j), 0, n))
        for i in range(k):
            for j in range(k + 1):
                vecs.append(_vec(poly.monomial(i, j), 1, n))
    return np.array(vecs)


def _hdiv_interior_tests(family, k, lc, n):
    tests = []
    if k < 2:
        return np.zeros((0, 2, n, n))
    if family == "BDM":
        for e in poly.exponents_P(k - 1)[1:]:
            g = np.stack([poly.pder(poly.monomial(*e, n), 0), poly.pder(poly.monomial(*e, n), 1)])
            tests.append(g)
        b = poly.triangle_bubble_poly(lc.verts)
        for e in poly.exponents_P(k - 2):
            tests.append(poly.pad(_curl_scalar(poly.pmul(poly.monomial(*e), b)), n))
    elif family in ("RTN", "rBDM"):
        for e in poly.exponents_P(k - 2):
            tests += [_vec(poly.monomial(*e), 0, n), _vec(poly.monomial(*e), 1, n)]
    elif family == "rRTN":
        for i in range(k - 1):
            for j in range(k):
                tests.append(_vec(poly.monomial(i, j), 0, n))
        for i in range(k):
            for j in range(k - 1):
                tests.append(_vec(poly.monomial(i, j), 1, n))
    return np.array(tests)


def _edge_moments_per_edge(family, k):
    return k + 1 if family in ("BDM", "rBDM") else k


def _local_edges(cell_type):
    from .mesh import _RECT_LOCAL_EDGES, _TRI_LOCAL_EDGES
    return _TRI_LOCAL_EDGES if cell_type == TRIANGLE else _RECT_LOCAL_EDGES


def _edge_frames(lc):
    """Per local edge: start point, end point (global orientation) and outward normal."""
    frames = []
    v = lc.verts
    for i, (a, b) in enumerate(_local_edges(lc.cell_type)):
        t = v[b] - v[a]
        n_out = np.array([t[1], -t[0]]) / np.linalg.norm(t)  # ccw cells: right of a->b is outside
        start, end = (v[a], v[b]) if lc.edge_forward[i] else (v[b], v[a])
        frames.append((start, end, n_out))
    return frames


_HDIV_CACHE = {}


def local_hdiv(family, k, lc):
    """Nodal H(div) basis on one cell.

    Returns ``(basis (nloc, 2, n, n), entities, interior_tests)``.  Functionals
    are edge means of ``v . n_out * q_j(s)`` with q_j orthonormal Legendre in
    the global edge parameter, then cell means against orthonormalized tests.
    """
    key = (family, k, lc.key)
    if key in _HDIV_CACHE:
        return _HDIV_CACHE[key]
    n = k + 2
    span = _hdiv_spanning(family, k, lc, n)
    tests = _hdiv_interior_tests(family, k, lc, n)
    pts, wts = poly.mapped_quadrature(lc.cell_type, lc.verts, min(2 * n + 2, poly.MAX_QUADRATURE_DEGREE))
    if len(tests):
        tests = _orthonormalize(tests, pts, wts)
    ne = _edge_moments_per_edge(family, k)
    leg = poly.legendre_01(ne - 1)
    s, ws = poly.gauss_legendre_01(k + 3)
    rows, entities = [], []
    for i, (start, end, n_out) in enumerate(_edge_frames(lc)):
        epts = start + s[:, None] * (end - start)
        vals = poly.peval(span, epts)  # (nspan, 2, ns)
        flux = np.einsum("scq,c->sq", vals, n_out)
        for j in range(ne):
            qj = np.polynomial.polynomial.polyval(s, leg[j])
            rows.append(flux @ (ws * qj))
            entities.append(("edge", i, j))
    if len(tests):
        M = _mean_inner(tests, span, pts, wts)
        for i in range(len(tests)):
            rows.append(M[i])
            entities.append(("cell", i))
    V = np.array(rows)
    if V.shape[0] != V.shape[1]:
        raise SpaceError(f"{family}_{k}: {V.shape[0]} functionals for {V.shape[1]} shape functions")
    C = np.linalg.solve(V, np.eye(len(V)))
    basis = np.einsum("sb,s...->b...", C, span)
    out = (basis, entities, tests)
    _HDIV_CACHE[key] = out
    return out


def _lagrange_local(family, k, lc):
    v = lc.verts
    if family == "Pc":
        exps, nodes = poly.exponents_P(k), poly.lagrange_nodes_P(k, v)
    elif family == "Qc":
        exps, nodes = poly.exponents_Q(k), poly.lagrange_nodes_Q(k, v)
    else:
        exps, nodes = poly.exponents_S2(), poly.s2_nodes(v)
    return poly.nodal_basis(exps, nodes), nodes


def _modal_local(family, k, lc):
    exps = poly.exponents_Q(k) if family == "Qd" else poly.exponents_P(k)
    return poly.modal_basis(exps, lc.verts, lc.cell_type)


def _bubble(lc):
    if lc.cell_type == TRIANGLE:
        return poly.triangle_bubble_poly(lc.verts)
    return poly.rectangle_bubble_poly(lc.verts)


def xi_bubble_local(kind, k, lc):
    """Vector bubble fields (unscaled) of one cell, shape (nb, 2, n, n).

    ``B``: b * P_{k-1}(T; R^2).  ``Bhat``/``Bhat_r``: b * rot(chi(r)) for r in
    the mean-free part of P_k(T); the h_T^{-3} factor (h^{-2} times the 1/h of
    rot in scaled coordinates) is applied per cell by the caller.
    """
    b = _bubble(lc)
    if kind == "B":
        m = poly.modal_basis(poly.exponents_P(k - 1), lc.verts, lc.cell_type)
        n = m.shape[-1] + b.shape[-1] - 1
        out = []
        for comp in range(2):
            for p in m:
                out.append(_vec(poly.pmul(p, b), comp, n))
        return np.array(out)
    eta = poly.modal_basis(poly.exponents_P(k), lc.verts, lc.cell_type)[1:]
    r = rot_skew(eta)  # (nb, 2, n, n)
    return poly.pmul(r, b)


def curl_vector_field(xi):
    """Row-wise curl of vector polynomials (..., 2, n, n) -> (..., 4, n, n)."""
    c0 = _curl_scalar(xi[..., 0, :, :])
    c1 = _curl_scalar(xi[..., 1, :, :])
    return np.concatenate([c0, c1], axis=-3)


def _xi_kind_for_family(family):
    return {"BubbleVec": "B", "CurlBubbleHat": "Bhat", "CurlBubbleHatRect": "Bhat_r"}[family]


# -- the space object ------------------------------------------------------

@dataclass(eq=False)
class FESpace:
    """A global finite element space (the DofMap of a SpaceDescriptor).

    ``local`` holds one local basis per distinct cell shape with shape
    ``(nshape, nloc, ncomp, n, n)``; ``shape_index`` maps cells to it.
    ``cell_dofs`` uses -1 for local functions that are not part of the space.
    """
    mesh: Mesh
    desc: SpaceDescriptor
    ncomp: int
    local: np.ndarray
    shape_index: np.ndarray
    cell_dofs: np.ndarray
    signs: np.ndarray
    scale: np.ndarray
    ndofs: int
    dof_kind: np.ndarray
    centers: np.ndarray
    h: np.ndarray
    hdiv: dict = field(default_factory=dict)

    def __post_init__(self):
        scale = np.asarray(self.scale, float)
        if scale.ndim == 1:
            scale = np.repeat(scale[:, None], self.cell_dofs.shape[1], axis=1)
        self.scale = scale

    @property
    def nloc(self):
        return self.local.shape[1]

    @property
    def degree(self):
        return poly.total_degree(self.local, tol=1e-13)

    @property
    def discontinuous(self):
        """True when every dof lives on exactly one cell."""
        d = self.cell_dofs[self.cell_dofs >= 0]
        return len(np.unique(d)) == len(d)

    def __repr__(self):
        return f"FESpace({self.desc.label()}, ndofs={self.ndofs}, cells={self.mesh.num_cells})"

    # -- evaluation ------------------------------------------------------
    def _factors(self):
        return self.signs * self.scale

    def tabulate(self, quad, derivatives=True):
        """Values ``(nc, nq, nloc, ncomp)`` and gradients ``(..., 2)`` at a CellQuadrature."""
        hat = (quad.points - self.centers[:, None, :]) / self.h[:, None, None]
        nshape = self.local.shape[0]
        n = self.local.shape[-1]
        vals = np.empty(hat.shape[:2] + self.local.shape[1:3])
        grads = np.empty(vals.shape + (2,)) if derivatives else None
        flat = self.local.reshape(nshape, -1, n * n)
        if derivatives:
            dx = poly.pder(self.local, 0).reshape(nshape, -1, n * n)
            dy = poly.pder(self.local, 1).reshape(nshape, -1, n * n)
        for s in range(nshape):
            cells = np.flatnonzero(self.shape_index == s)
            if not len(cells):
                continue
            # same shape => same scaled quadrature points as the first member
            T = poly.monomial_table(hat[cells[0]], n).reshape(-1, n * n)
            v = (T @ flat[s].T).reshape(len(T), self.nloc, self.ncomp)
            vals[cells] = v[None]
            if derivatives:
                gx = (T @ dx[s].T).reshape(len(T), self.nloc, self.ncomp)
                gy = (T @ dy[s].T).reshape(len(T), self.nloc, self.ncomp)
                grads[cells] = np.stack([gx, gy], axis=-1)[None]
        f = self._factors()
        vals *= f[:, None, :, None]
        if derivatives:
            grads *= (f / self.h[:, None])[:, None, :, None, None]
        return vals, grads

    def evaluate(self, coef, cells, points, derivatives=False):
        """Evaluate a coefficient vector at physical points lying in ``cells``."""
        cells = np.asarray(cells, dtype=np.int64)
        points = np.asarray(points, float)
        hat = (points - self.centers[cells]) / self.h[cells, None]
        n = self.local.shape[-1]
        T = poly.monomial_table(hat, n).reshape(len(cells), n * n)
        loc = self.local[self.shape_index[cells]].reshape(len(cells), self.nloc, self.ncomp, n * n)
        c = self.local_coefficients(coef)[cells]  # (npts, nloc)
        val = np.einsum("pbkm,pm,pb->pk", loc, T, c)
        if not derivatives:
            return val
        ld = np.stack([poly.pder(self.local, 0), poly.pder(self.local, 1)], axis=-1)
        ld = ld[self.shape_index[cells]].reshape(len(cells), self.nloc, self.ncomp, n * n, 2)
        grad = np.einsum("pbkmd,pm,pb->pkd", ld, T, c) / self.h[cells, None, None]
        return val, grad

    def local_coefficients(self, coef):
        """Per-cell coefficients multiplying the *unsigned, unscaled* local basis."""
        coef = np.asarray(coef, float)
        c = np.where(self.cell_dofs >= 0, coef[np.maximum(self.cell_dofs, 0)], 0.0)
        return c * self._factors()

    def dof_counts(self):
        kinds, counts = np.unique(self.dof_kind, return_counts=True)
        return {str(k): int(c) for k, c in zip(kinds, counts)}


# -- builders ----------------------------------------------------------------

def _expand_components(scalar_local, shape):
    """Turn a scalar local basis (nshape, nb, 1, n, n) into vector/matrix/skew copies."""
    ns, nb, _, n, _ = scalar_local.shape
    s = scalar_local[:, :, 0]
    if shape == "scalar":
        return scalar_local, 1
    if shape == "skew":
        out = np.zeros((ns, nb, 4, n, n))
        out[:, :, 1] = s
        out[:, :, 2] = -s
        return out, 1
    nc = NCOMP[shape]
    out = np.zeros((ns, nc * nb, nc, n, n))
    for r in range(nc):
        out[:, r * nb:(r + 1) * nb, r] = s
    return out, nc


def _pad_stack(arrs):
    n = max(a.shape[-1] for a in arrs)
    return np.array([poly.pad(a, n) for a in arrs])


def _node_numbering(points, decimals=9):
    """Global ids for physical node coordinates (ncell, nnode, 2)."""
    flat = np.round(points.reshape(-1, 2), decimals) + 0.0
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    return inv.reshape(points.shape[:2]), uniq


def build_space(mesh: Mesh, d: SpaceDescriptor) -> FESpace:
    """Construct the global space for descriptor ``d`` on ``mesh``."""
    need = _CELL_OF.get(d.family)
    if need is not None and need != mesh.cell_type:
        raise SpaceError(f"{d.family} needs a {need} mesh, got {mesh.cell_type}")
    if d.family == "MacroBubble" and not mesh.is_barycentric:
        raise SpaceError("MacroBubble needs a barycentric mesh")
    if d.enrichment is not None:
        kind = d.enrichment[0]
        if (kind == "Bhat_r") != (mesh.cell_type == RECTANGLE):
            raise SpaceError(f"enrichment {kind} incompatible with {mesh.cell_type} mesh")

    centers, h, reps, shape_index = _shape_groups(mesh)
    nc = mesh.num_cells
    scale = np.ones(nc)
    hdiv = {}

    if d.family in HDIV_FAMILIES:
        built = [local_hdiv(d.family, d.degree, lc) for lc in reps]
        basis = _pad_stack([b[0] for b in built])
        entities = built[0][1]
        ne = _edge_moments_per_edge(d.family, d.degree)
        ni = sum(1 for e in entities if e[0] == "cell")
        nE = mesh.num_edges
        nvec = nE * ne + nc * ni
        vec_dofs = np.empty((nc, len(entities)), dtype=np.int64)
        vec_signs = np.empty((nc, len(entities)))
        for b, ent in enumerate(entities):
            if ent[0] == "edge":
                _, i, j = ent
                vec_dofs[:, b] = mesh.cell_edges[:, i] * ne + j
                vec_signs[:, b] = mesh.edge_signs[:, i]
            else:
                vec_dofs[:, b] = nE * ne + np.arange(nc) * ni + ent[1]
                vec_signs[:, b] = 1.0
        vec_kind = np.array(["facet"] * (nE * ne) + ["interior"] * (nc * ni), dtype=object)
        tests = _pad_stack([b[2] for b in built]) if ni else None
        hdiv = {"edge_moments": ne, "interior": ni, "tests": tests, "nvec": nvec}
        if d.value_shape == "vector":
            local, ncomp = basis, 2
            cell_dofs, signs, ndofs, kind = vec_dofs, vec_signs, nvec, vec_kind
        else:
            nb, n = basis.shape[1], basis.shape[-1]
            local = np.zeros((len(reps), 2 * nb, 4, n, n))
            local[:, :nb, 0:2] = basis
            local[:, nb:, 2:4] = basis
            ncomp = 4
            cell_dofs = np.concatenate([vec_dofs, vec_dofs + nvec], axis=1)
            signs = np.concatenate([vec_signs, vec_signs], axis=1)
            ndofs = 2 * nvec
            kind = np.concatenate([vec_kind, vec_kind])
            hdiv["nbase"] = ndofs
            if d.enrichment is not None:
                enr = [enrichment_local(d.family, d.degree, d.enrichment, lc) for lc in reps]
                ne_loc = {len(e) for e in enr}
                if len(ne_loc) != 1:
                    raise SpaceError("enrichment dimension differs between cell shapes")
                nenr = ne_loc.pop()
                n2 = max(local.shape[-1], enr[0].shape[-1])
                local = np.concatenate([poly.pad(local, n2), np.array([poly.pad(e, n2) for e in enr])], axis=1)
                cell_dofs = np.concatenate([cell_dofs, ndofs + np.arange(nc * nenr).reshape(nc, nenr)], axis=1)
                signs = np.concatenate([signs, np.ones((nc, nenr))], axis=1)
                kind = np.concatenate([kind, np.array(["enrichment"] * (nc * nenr), dtype=object)])
                ndofs += nc * nenr
                hdiv["nenrich"] = nenr
        return FESpace(mesh, d, ncomp, local, shape_index, cell_dofs, signs, scale, ndofs,
                       kind, centers, h, hdiv)

    if d.family in L2_FAMILIES:
        scal = _pad_stack([_modal_local(d.family, d.degree, lc) for lc in reps])[:, :, None]
        nb = scal.shape[1]
        sdofs = np.arange(nc * nb).reshape(nc, nb)
        return _finish_scalar(mesh, d, scal, shape_index, sdofs, nc * nb, "modal", centers, h, scale)

    if d.family in H1_FAMILIES:
        built = [_lagrange_local(d.family, d.degree, lc) for lc in reps]
        scal = _pad_stack([b[0] for b in built])[:, :, None]
        node_hat = np.array([b[1] for b in built])[shape_index]  # (nc, nnode, 2)
        phys = centers[:, None, :] + h[:, None, None] * node_hat
        sdofs, _ = _node_numbering(phys)
        return _finish_scalar(mesh, d, scal, shape_index, sdofs, int(sdofs.max()) + 1, "node",
                              centers, h, scale)

    if d.family in ("BubbleVec", "CurlBubbleHat", "CurlBubbleHatRect"):
        kind = _xi_kind_for_family(d.family)
        local = _pad_stack([xi_bubble_local(kind, d.degree, lc) for lc in reps])
        nb = local.shape[1]
        if kind != "B":
            scale = h ** -3.0
        cell_dofs = np.arange(nc * nb).reshape(nc, nb)
        return FESpace(mesh, d, 2, local, shape_index, cell_dofs, np.ones((nc, nb)),
                       np.repeat(scale[:, None], nb, axis=1), nc * nb,
                       np.array(["bubble"] * (nc * nb), dtype=object), centers, h)

    if d.family == "Mini":
        p1 = build_space(mesh, SpaceDescriptor("Pc", 1, "vector"))
        bub = build_space(mesh, SpaceDescriptor("BubbleVec", 1, "vector"))
        return direct_sum(p1, bub, d)

    if d.family == "MacroBubble":
        pc = build_space(mesh, SpaceDescriptor("Pc", d.degree, "vector"))
        keep = ~_macro_boundary_dofs(pc)
        return restrict(pc, keep, d)

    raise SpaceError(f"cannot build {d.family}")  # pragma: no cover


def _finish_scalar(mesh, d, scal, shape_index, sdofs, nscalar, kind, centers, h, scale):
    local, copies = _expand_components(scal, d.value_shape)
    nc = mesh.num_cells
    cell_dofs = np.concatenate([sdofs + r * nscalar for r in range(copies)], axis=1)
    ncomp = NCOMP[d.value_shape]
    nloc = local.shape[1]
    kinds = np.array([kind] * (nscalar * copies), dtype=object)
    return FESpace(mesh, d, ncomp, local, shape_index, cell_dofs, np.ones((nc, nloc)),
                   np.ones((nc, nloc)), nscalar * copies, kinds, centers, h)


def direct_sum(a: FESpace, b: FESpace, desc=None) -> FESpace:
    """Concatenate two spaces on the same mesh (dofs of b follow those of a)."""
    if a.mesh is not b.mesh or a.ncomp != b.ncomp:
        raise SpaceError("direct sum needs spaces on the same mesh with equal value shape")
    if not np.array_equal(a.shape_index, b.shape_index):
        raise SpaceError("shape grouping mismatch")
    n = max(a.local.shape[-1], b.local.shape[-1])
    local = np.concatenate([poly.pad(a.local, n), poly.pad(b.local, n)], axis=1)
    cell_dofs = np.concatenate([a.cell_dofs, np.where(b.cell_dofs >= 0, b.cell_dofs + a.ndofs, -1)], axis=1)
    return FESpace(a.mesh, desc or a.desc, a.ncomp, local, a.shape_index, cell_dofs,
                   np.concatenate([a.signs, b.signs], axis=1), np.concatenate(
                       [np.broadcast_to(a.scale, a.cell_dofs.shape), np.broadcast_to(b.scale, b.cell_dofs.shape)], axis=1),
                   a.ndofs + b.ndofs, np.concatenate([a.dof_kind, b.dof_kind]), a.centers, a.h)


def restrict(space: FESpace, keep, desc=None) -> FESpace:
    """Subspace spanned by the global basis functions with ``keep[dof]`` true."""
    keep = np.asarray(keep, bool)
    new_id = -np.ones(space.ndofs, dtype=np.int64)
    new_id[keep] = np.arange(keep.sum())
    cell_dofs = np.where(space.cell_dofs >= 0, new_id[np.maximum(space.cell_dofs, 0)], -1)
    signs = np.where(cell_dofs >= 0, space.signs, 0.0)
    hdiv = dict(space.hdiv)
    hdiv["restricted"] = True
    return FESpace(space.mesh, desc or space.desc, space.ncomp, space.local, space.shape_index,
                   cell_dofs, signs, np.broadcast_to(space.scale, space.cell_dofs.shape).copy(),
                   int(keep.sum()), space.dof_kind[keep], space.centers, space.h, hdiv)


def _macro_boundary_dofs(space: FESpace):
    """Mask of nodal dofs lying on the boundary of their macro triangle."""
    mesh = space.mesh
    centers_of = {}
    for M, kids in enumerate(mesh.macro_cells()):
        common = set(mesh.cells[kids[0]])
        for c in kids[1:]:
            common &= set(mesh.cells[c])
        centers_of[M] = common.pop()
    on_bdry = np.zeros(space.ndofs, bool)
    nodes = space.local.shape[1] // space.ncomp
    # recover node coordinates from the nodal numbering of each child
    from .polynomial import lagrange_nodes_P
    for c in range(mesh.num_cells):
        g = centers_of[mesh.parent_map[c]]
        macro_verts = [v for v in mesh.cells[c] if v != g]
        a, b = mesh.vertices[macro_verts[0]], mesh.vertices[macro_verts[1]]
        pts = lagrange_nodes_P(space.desc.degree, mesh.vertices[mesh.cells[c]])
        t = b - a
        cross = t[0] * (pts[:, 1] - a[1]) - t[1] * (pts[:, 0] - a[0])
        hit = np.abs(cross) <= 1e-12 * np.dot(t, t)
        for r in range(space.ncomp):
            d = space.cell_dofs[c, r * nodes:(r + 1) * nodes]
            on_bdry[d[hit]] = True
    return on_bdry


_ENRICH_CACHE = {}


def enrichment_local(family, k, enrichment, lc):
    """Matrix fields curl(xi) independent of the base H(div) space on one cell.

    Dependent directions are removed by an SVD of the component of the
    enrichment orthogonal (in coefficient space) to the base local space,
    with relative threshold 1e-10.  Survivors are normalized in the mean L2
    sense on the cell.
    """
    key = (family, k, enrichment, lc.key)
    if key in _ENRICH_CACHE:
        return _ENRICH_CACHE[key]
    kind, ke = enrichment
    xi = xi_bubble_local(kind, ke, lc)
    fields = curl_vector_field(xi)  # (ne, 4, n, n)
    base, _, _ = local_hdiv(family, k, lc)
    nb = base.shape[0]
    n = max(fields.shape[-1], base.shape[-1])
    mat = np.zeros((2 * nb, 4, n, n))
    mat[:nb, 0:2] = poly.pad(base, n)
    mat[nb:, 2:4] = poly.pad(base, n)
    fields = poly.pad(fields, n)
    B = mat.reshape(2 * nb, -1)
    E = fields.reshape(len(fields), -1)
    U, s, Vt = np.linalg.svd(B, full_matrices=False)
    Q = Vt[s > RANK_TOL * s[0]]
    R = E - (E @ Q.T) @ Q
    Ur, sr, _ = np.linalg.svd(R, full_matrices=False)
    ref = np.linalg.norm(E, 2)
    r = int(np.sum(sr > RANK_TOL * ref))
    combos = Ur[:, :r].T @ E
    out = combos.reshape((r,) + fields.shape[1:])
    pts, wts = poly.mapped_quadrature(lc.cell_type, lc.verts, min(2 * n, poly.MAX_QUADRATURE_DEGREE))
    vals = poly.peval(out, pts)
    norms = np.sqrt(np.einsum("bcq,bcq,q->b", vals, vals, wts) / wts.sum())
    out = out / norms[:, None, None, None]
    _ENRICH_CACHE[key] = out
    return out


# -- curl-bubble images (matrix fields) --------------------------------------

@dataclass
class CurlBubbleImage:
    """Cell-wise matrix fields curl(xi) for xi running over a basis of Xi_h."""
    xi: FESpace

    def tabulate(self, quad):
        _, g = self.xi.tabulate(quad)
        return curl_from_gradients(g)


def curl_from_gradients(grads):
    """Row-wise curl of vector-field gradients (..., 2, 2) -> matrices (..., 4)."""
    return np.stack([-grads[..., 0, 1], grads[..., 0, 0], -grads[..., 1, 1], grads[..., 1, 0]], axis=-1)


def curl_bubble_image(mesh: Mesh, kind: str, k: int) -> CurlBubbleImage:
    """Basis of curl(Xi_h) for Xi_h one of B_k, B-hat_k, B-hat_k^r."""
    if k < 1:
        raise SpaceError("curl-bubble spaces need k >= 1 (mean-free P_0 is empty)")
    family = {"B": "BubbleVec", "Bhat": "CurlBubbleHat", "Bhat_r": "CurlBubbleHatRect"}[kind]
    return CurlBubbleImage(build_space(mesh, SpaceDescriptor(family, k, "vector")))


# -- element triples -----------------------------------------------------------

@dataclass
class ElementTriple:
    """A (Sigma_h, U_h, Gamma_h) choice plus the stability-lab data.

    ``gamma0``/``gamma1`` hold coefficient vectors (as columns, in the basis of
    ``gamma``) of L2-orthogonal bases of Gamma_h^0 and its complement.
    ``targets`` are the expected rates of (sigma, P_h u - u_h, gamma).
    """
    name: str
    k: int
    mesh: Mesh
    sigma: FESpace
    u: FESpace
    gamma: FESpace
    xi: FESpace | None
    gamma0: sp.csc_matrix
    gamma1: sp.csc_matrix
    targets: tuple | None
    table_k: int | None = None
    notes: str = ""

    @property
    def descriptors(self):
        return {
            "sigma": self.sigma.desc.label(), "u": self.u.desc.label(), "gamma": self.gamma.desc.label(),
            "xi": None if self.xi is None else self.xi.desc.label(),
        }

    def dims(self):
        return {
            "sigma": self.sigma.ndofs, "u": self.u.ndofs, "gamma": self.gamma.ndofs,
            "gamma0": self.gamma0.shape[1], "gamma1": self.gamma1.shape[1],
            "xi": 0 if self.xi is None else self.xi.ndofs,
        }


CATALOGUE = ("PEERS", "THB", "Rect2D", "AFW", "CGG", "GG", "Stenberg", "BaryBDM", "AwanouLow", "rGG")
PROBES = ("UNSTABLE_PROBE",)

# minimum construction degree and whether the degree is fixed
_K_RANGE = {
    "PEERS": (1, True), "Rect2D": (1, True), "AwanouLow": (1, True), "UNSTABLE_PROBE": (1, True),
    "THB": (1, False), "AFW": (1, False), "CGG": (2, False), "GG": (1, False),
    "Stenberg": (1, False), "BaryBDM": (1, False), "rGG": (1, False),
}
# catalogue orders that sit one above the construction degree
_TABLE_SHIFT = {"THB": 1, "GG": 1, "Stenberg": 1, "BaryBDM": 1, "rGG": 1}

MESH_FAMILY = {
    "PEERS": "tri", "THB": "tri", "AFW": "tri", "CGG": "tri", "GG": "tri", "Stenberg": "tri",
    "UNSTABLE_PROBE": "tri", "BaryBDM": "bary", "Rect2D": "rect", "AwanouLow": "rect", "rGG": "rect",
}


def table_rates(name, k):
    """Target rates (sigma, P_h u - u_h, gamma) for a construction degree."""
    if name == "UNSTABLE_PROBE":
        return None
    if name in ("PEERS", "AwanouLow"):
        return (1, 1, 1)
    if name == "Rect2D":
        return (2, 2, 2)
    r = k + _TABLE_SHIFT.get(name, 0)
    return (r, r, r)


FIXED_TABLE_ORDER = {"PEERS": 1, "Rect2D": 2, "AwanouLow": 1, "UNSTABLE_PROBE": 1}


def construction_degree(name, table_k=None):
    """Construction degree for catalogue order ``table_k``."""
    if name in FIXED_TABLE_ORDER:
        if table_k is not None and table_k != FIXED_TABLE_ORDER[name]:
            raise SpaceError(f"{name} only exists with order {FIXED_TABLE_ORDER[name]}")
        return 1
    if table_k is None:
        raise SpaceError(f"{name} needs a degree")
    return table_k - _TABLE_SHIFT.get(name, 0)


def _modal_split(gamma: FESpace):
    """Cell constants vs. the rest for a modal discontinuous skew space."""
    const = gamma.cell_dofs[:, 0]
    rest = np.setdiff1d(np.arange(gamma.ndofs), const)
    I = sp.identity(gamma.ndofs, format="csc")
    return I[:, np.sort(const)], I[:, rest]


def _macro_split(gamma: FESpace):
    """Macro-cell constants vs. their L2 complement for a modal skew space."""
    mesh = gamma.mesh
    areas = mesh.areas()
    nloc = gamma.nloc
    const_dof = gamma.cell_dofs[:, 0]
    rows0, cols0, vals0 = [], [], []
    rows1, cols1, vals1 = [], [], []
    n1 = 0
    for M, kids in enumerate(mesh.macro_cells()):
        w = np.sqrt(areas[kids])
        # the modal constant is 1 on its cell, so column sum_T phi_0^T is the macro constant
        rows0 += list(const_dof[kids]); cols0 += [M] * len(kids); vals0 += [1.0] * len(kids)
        # complement of the constants inside span{phi_0^T}: orthogonal to sqrt(|T|)
        Qf, _ = np.linalg.qr(np.column_stack([w, np.eye(len(kids))]))
        comp = Qf[:, 1:len(kids)] / w[:, None]
        for j in range(comp.shape[1]):
            rows1 += list(const_dof[kids]); cols1 += [n1] * len(kids); vals1 += list(comp[:, j])
            n1 += 1
        for c in kids:
            for b in range(1, nloc):
                rows1.append(gamma.cell_dofs[c, b]); cols1.append(n1); vals1.append(1.0)
                n1 += 1
    G0 = sp.csc_matrix((vals0, (rows0, cols0)), shape=(gamma.ndofs, len(mesh.macro_cells())))
    G1 = sp.csc_matrix((vals1, (rows1, cols1)), shape=(gamma.ndofs, n1))
    return G0, G1


def make_triple(name: str, k: int, mesh: Mesh) -> ElementTriple:
    """Build a catalogue triple with its Gamma_h^0 split and Stokes space Xi_h.

    ``k`` is the construction degree of the corresponding example (for GG,
    Sigma_h = BDM_k + curl B-hat_k); ``table_k`` records the catalogue order
    whose rates the triple reproduces.
    """
    if name not in _K_RANGE:
        raise SpaceError(f"unknown triple {name!r}; choose from {CATALOGUE + PROBES}")
    kmin, fixed = _K_RANGE[name]
    if fixed and k != kmin:
        raise SpaceError(f"{name} has fixed degree {kmin}")
    if k < kmin:
        raise SpaceError(f"{name} needs k >= {kmin}, got {k}")
    fam = MESH_FAMILY[name]
    want = RECTANGLE if fam == "rect" else TRIANGLE
    if mesh.cell_type != want:
        raise SpaceError(f"{name} needs a {want} mesh")
    if fam == "bary" and not mesh.is_barycentric:
        raise SpaceError("BaryBDM needs a barycentric mesh")

    def S(family, deg, shape, enr=None):
        return build_space(mesh, SpaceDescriptor(family, deg, shape, enr))

    xi = None
    split = "none"
    if name == "PEERS":
        sigma = S("RTN", 1, "matrix", ("B", 1))
        u, gamma = S("Pd", 0, "vector"), S("Pc", 1, "skew")
        xi = S("Mini", 1, "vector")
    elif name == "THB":
        sigma = S("BDM", k, "matrix")
        u, gamma = S("Pd", k - 1, "vector"), S("Pc", k, "skew")
        xi = S("Pc", k + 1, "vector")
    elif name == "Rect2D":
        sigma = S("rBDM", 1, "matrix")
        u, gamma = S("Pd", 0, "vector"), S("Qc", 1, "skew")
        xi = S("S2c", 2, "vector")
    elif name == "AFW":
        sigma = S("BDM", k, "matrix")
        u, gamma = S("Pd", k - 1, "vector"), S("Pd", k - 1, "skew")
        split = "cell"
        if k >= 2:
            xi = S("CurlBubbleHat", k - 1, "vector")
    elif name == "CGG":
        sigma = S("RTN", k, "matrix", ("Bhat", k - 1))
        u, gamma = S("Pd", k - 1, "vector"), S("Pd", k - 1, "skew")
        split = "cell"
        xi = S("CurlBubbleHat", k - 1, "vector")
    elif name == "GG":
        sigma = S("BDM", k, "matrix", ("Bhat", k))
        u, gamma = S("Pd", k - 1, "vector"), S("Pd", k, "skew")
        split = "cell"
        xi = S("CurlBubbleHat", k, "vector")
    elif name == "Stenberg":
        sigma = S("BDM", k, "matrix", ("B", k))
        u, gamma = S("Pd", k - 1, "vector"), S("Pd", k, "skew")
        split = "cell"
        xi = S("BubbleVec", k, "vector")
    elif name == "BaryBDM":
        sigma = S("BDM", k, "matrix")
        u, gamma = S("Pd", k - 1, "vector"), S("Pd", k, "skew")
        split = "macro"
        xi = S("MacroBubble", k + 1, "vector")
    elif name == "AwanouLow":
        sigma = S("rBDM", 1, "matrix")
        u, gamma = S("Pd", 0, "vector"), S("Pd", 0, "skew")
        split = "cell"
    elif name == "rGG":
        sigma = S("rBDM", k, "matrix", ("Bhat_r", k))
        u, gamma = S("Pd", k - 1, "vector"), S("Pd", k, "skew")
        split = "cell"
        xi = S("CurlBubbleHatRect", k, "vector")
    else:  # UNSTABLE_PROBE
        sigma = S("BDM", 1, "matrix")
        u, gamma = S("Pd", 0, "vector"), S("Pd", 1, "skew")
        split = "cell"

    if split == "none":
        G0 = sp.csc_matrix((gamma.ndofs, 0))
        G1 = sp.identity(gamma.ndofs, format="csc")
    elif split == "cell":
        G0, G1 = _modal_split(gamma)
    else:
        G0, G1 = _macro_split(gamma)
    return ElementTriple(name, k, mesh, sigma, u, gamma, xi, G0, G1, table_rates(name, k),
                         None if name == "UNSTABLE_PROBE" else k + _TABLE_SHIFT.get(name, 0))
