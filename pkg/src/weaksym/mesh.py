"""Affine 2D meshes of triangles or axis-aligned rectangles.

Meshes are immutable: generators and refinements always return a new
:class:`Mesh`.  Connectivity (edges, cell-to-edge map and the facet
orientation signs needed by H(div) spaces) is derived once at construction.

Local edge numbering
--------------------
* triangle ``(v0, v1, v2)``: local edge ``i`` is opposite vertex ``i``,
  i.e. ``(v1, v2), (v2, v0), (v0, v1)``.
* rectangle ``(v0, v1, v2, v3)`` counterclockwise: local edge ``i`` joins
  ``v[i]`` and ``v[(i + 1) % 4]``.

Every global edge is oriented from its lower to its higher vertex index.  Its
unit normal is the tangent rotated clockwise, and ``edge_signs[c, i]`` is +1
when that normal points out of cell ``c``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRIANGLE = "triangle"
RECTANGLE = "rectangle"

_TRI_LOCAL_EDGES = ((1, 2), (2, 0), (0, 1))
_RECT_LOCAL_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0))

SHAPE_RATIO_BOUND = 10.0


class MeshError(ValueError):
    """Raised for malformed mesh input."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    cells: np.ndarray
    cell_type: str
    parent_map: np.ndarray | None = None
    # "refine" or "barycentric": how parent_map was produced
    parent_kind: str | None = None

    edges: np.ndarray = field(init=False, repr=False)
    cell_edges: np.ndarray = field(init=False, repr=False)
    edge_signs: np.ndarray = field(init=False, repr=False)
    edge_cells: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.cell_type not in (TRIANGLE, RECTANGLE):
            raise MeshError(f"unknown cell_type {self.cell_type!r}")
        verts = _frozen(self.vertices, float)
        cells = _frozen(self.cells, np.int64)
        nv = 3 if self.cell_type == TRIANGLE else 4
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise MeshError("vertices must have shape (n, 2)")
        if cells.ndim != 2 or cells.shape[1] != nv:
            raise MeshError(f"{self.cell_type} cells need {nv} vertex indices each")
        if cells.size and (cells.min() < 0 or cells.max() >= len(verts)):
            raise MeshError("cell references a vertex index out of range")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "cells", cells)
        if self.parent_map is not None:
            object.__setattr__(self, "parent_map", _frozen(self.parent_map, np.int64))
        self._build_edges()

    def _build_edges(self):
        local = _TRI_LOCAL_EDGES if self.cell_type == TRIANGLE else _RECT_LOCAL_EDGES
        nc, nl = len(self.cells), len(local)
        pairs = np.stack([self.cells[:, list(e)] for e in local], axis=1)  # (nc, nl, 2)
        lo = pairs.min(axis=2)
        hi = pairs.max(axis=2)
        keys = np.stack([lo.ravel(), hi.ravel()], axis=1)
        edges, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(nc, nl)
        if counts.max(initial=0) > 2:
            raise MeshError("non-manifold mesh: an edge is shared by more than two cells")

        verts = self.vertices
        tangent = verts[edges[:, 1]] - verts[edges[:, 0]]
        normal = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        centroid = verts[self.cells].mean(axis=1)
        mid = 0.5 * (verts[edges[:, 0]] + verts[edges[:, 1]])
        outward = np.einsum("cld,cld->cl", normal[inverse], mid[inverse] - centroid[:, None, :])
        signs = np.where(outward > 0, 1, -1).astype(np.int64)

        edge_cells = -np.ones((len(edges), 2), dtype=np.int64)
        slot = np.zeros(len(edges), dtype=np.int64)
        for c in range(nc):
            for i in range(nl):
                e = inverse[c, i]
                edge_cells[e, slot[e]] = c
                slot[e] += 1

        object.__setattr__(self, "edges", _frozen(edges, np.int64))
        object.__setattr__(self, "cell_edges", _frozen(inverse, np.int64))
        object.__setattr__(self, "edge_signs", _frozen(signs, np.int64))
        object.__setattr__(self, "edge_cells", _frozen(edge_cells, np.int64))

    # -- geometry -------------------------------------------------------
    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def local_edges(self):
        return _TRI_LOCAL_EDGES if self.cell_type == TRIANGLE else _RECT_LOCAL_EDGES

    def cell_coordinates(self) -> np.ndarray:
        """Vertex coordinates per cell, shape ``(nc, nv, 2)``."""
        return self.vertices[self.cells]

    def areas(self) -> np.ndarray:
        """Signed cell areas (shoelace formula)."""
        p = self.cell_coordinates()
        q = np.roll(p, -1, axis=1)
        return 0.5 * np.sum(p[..., 0] * q[..., 1] - q[..., 0] * p[..., 1], axis=1)

    def centroids(self) -> np.ndarray:
        return self.cell_coordinates().mean(axis=1)

    @property
    def h_per_cell(self) -> np.ndarray:
        p = self.cell_coordinates()
        d = np.linalg.norm(p[:, :, None, :] - p[:, None, :, :], axis=-1)
        return d.max(axis=(1, 2))

    @property
    def h(self) -> float:
        return float(self.h_per_cell.max())

    def edge_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]], axis=1)

    def edge_normals(self) -> np.ndarray:
        """Global unit normals (tangent low->high rotated clockwise)."""
        t = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        n = np.stack([t[:, 1], -t[:, 0]], axis=1)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def boundary_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_cells[:, 1] < 0)

    def shape_ratios(self) -> np.ndarray:
        """h_T / rho_T with rho_T the diameter of the inscribed circle."""
        p = self.cell_coordinates()
        perimeter = np.linalg.norm(p - np.roll(p, -1, axis=1), axis=-1).sum(axis=1)
        inradius = 2.0 * np.abs(self.areas()) / perimeter
        return self.h_per_cell / (2.0 * inradius)

    def macro_cells(self) -> list[np.ndarray]:
        """Child cell indices grouped by parent (requires ``parent_map``)."""
        if self.parent_map is None:
            raise MeshError("mesh has no parent map")
        order = np.argsort(self.parent_map, kind="stable")
        _, starts = np.unique(self.parent_map[order], return_index=True)
        return np.split(order, starts[1:])

    @property
    def is_barycentric(self) -> bool:
        return self.parent_kind == "barycentric"

    def to_json(self) -> str:
        kind = "tri" if self.cell_type == TRIANGLE else "rect"
        lines = ['{', f'  "cell_type": "{kind}",', '  "vertices": [']
        lines += [f"    [{x!r}, {y!r}]" + ("," if i < self.num_vertices - 1 else "")
                  for i, (x, y) in enumerate(self.vertices.tolist())]
        lines += ["  ],", '  "cells": [']
        lines += ["    [" + ", ".join(str(v) for v in c) + "]" + ("," if i < self.num_cells - 1 else "")
                  for i, c in enumerate(self.cells.tolist())]
        lines += ["  ]", "}"]
        return "\n".join(lines) + "\n"


# -- validation ---------------------------------------------------------

def check_invariants(mesh: Mesh):
    """Return a list of ``(cell_index or None, message)`` invariant violations."""
    problems = []
    areas = mesh.areas()
    for c in np.flatnonzero(areas <= 0):
        problems.append((int(c), f"cell {c} has non-positive signed area {areas[c]:.3e} (must be counterclockwise)"))
    if mesh.cell_type == RECTANGLE:
        p = mesh.cell_coordinates()
        for c in range(mesh.num_cells):
            d = p[c] - np.roll(p[c], -1, axis=0)
            axis_aligned = np.all(np.isclose(d[:, 0], 0) | np.isclose(d[:, 1], 0))
            if not axis_aligned:
                problems.append((c, f"cell {c} is not an axis-aligned rectangle"))
    counts = (mesh.edge_cells >= 0).sum(axis=1)
    for e in np.flatnonzero(counts == 0):
        problems.append((None, f"edge {e} is not attached to any cell"))
    return problems


def _element_lines(text: str, key: str) -> list[int]:
    """Line numbers (1-based) of the elements of the top-level array ``key``."""
    pos = text.find(f'"{key}"')
    if pos < 0:
        return []
    pos = text.find("[", pos)
    depth, lines = 0, []
    line = text.count("\n", 0, pos) + 1
    for ch in text[pos:]:
        if ch == "\n":
            line += 1
        elif ch == "[":
            depth += 1
            if depth == 2:
                lines.append(line)
        elif ch == "]":
            depth -= 1
            if depth == 0:
                break
    return lines


def load_mesh_json(source) -> Mesh:
    """Load and validate a mesh from a JSON file path or JSON text.

    Failures raise :class:`MeshError` whose message starts with
    ``line N:`` pointing at the offending entry.
    """
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        text = Path(source).read_text()
    else:
        text = source
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MeshError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise MeshError("line 1: top-level value must be an object")
    for key in ("cell_type", "vertices", "cells"):
        if key not in data:
            raise MeshError(f"line 1: missing key {key!r}")
    kinds = {"tri": TRIANGLE, "rect": RECTANGLE}
    if data["cell_type"] not in kinds:
        line = text.count("\n", 0, text.find('"cell_type"')) + 1
        raise MeshError(f"line {line}: cell_type must be 'tri' or 'rect', got {data['cell_type']!r}")
    cell_type = kinds[data["cell_type"]]
    nv = 3 if cell_type == TRIANGLE else 4
    vline = _element_lines(text, "vertices")
    cline = _element_lines(text, "cells")

    def at(lines, i):
        return lines[i] if i < len(lines) else 1

    for i, v in enumerate(data["vertices"]):
        if not (isinstance(v, list) and len(v) == 2 and all(isinstance(t, (int, float)) for t in v)):
            raise MeshError(f"line {at(vline, i)}: vertex {i} must be [x, y]")
    nvert = len(data["vertices"])
    for i, c in enumerate(data["cells"]):
        if not (isinstance(c, list) and len(c) == nv and all(isinstance(t, int) for t in c)):
            raise MeshError(f"line {at(cline, i)}: cell {i} must list {nv} vertex indices")
        if any(t < 0 or t >= nvert for t in c) or len(set(c)) != nv:
            raise MeshError(f"line {at(cline, i)}: cell {i} has invalid or repeated vertex indices {c}")
    try:
        mesh = Mesh(np.array(data["vertices"], float).reshape(-1, 2),
                    np.array(data["cells"], np.int64).reshape(-1, nv), cell_type)
    except MeshError as exc:
        raise MeshError(f"line {at(cline, 0)}: {exc}") from None
    problems = check_invariants(mesh)
    if problems:
        c, msg = problems[0]
        line = at(cline, c) if c is not None else at(cline, 0)
        raise MeshError(f"line {line}: {msg}")
    return mesh


# -- generators ---------------------------------------------------------

def _grid_vertices(m):
    t = np.linspace(0.0, 1.0, m + 1)
    x, y = np.meshgrid(t, t)
    return np.stack([x.ravel(), y.ravel()], axis=1)


def _check_m(m):
    if int(m) != m or m < 1:
        raise ValueError(f"mesh parameter m must be a positive integer, got {m!r}")
    return int(m)


def unit_square_triangulation(m: int) -> Mesh:
    """Uniform m x m grid, each square cut from lower-left to upper-right."""
    m = _check_m(m)
    idx = np.arange((m + 1) ** 2).reshape(m + 1, m + 1)  # idx[j, i] -> (i/m, j/m)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[:-1, 1:].ravel()
    v11 = idx[1:, 1:].ravel()
    v01 = idx[1:, :-1].ravel()
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    cells = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return Mesh(_grid_vertices(m), cells, TRIANGLE)


def unit_square_rectgrid(m: int) -> Mesh:
    m = _check_m(m)
    idx = np.arange((m + 1) ** 2).reshape(m + 1, m + 1)
    cells = np.stack([idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(),
                      idx[1:, 1:].ravel(), idx[1:, :-1].ravel()], axis=1)
    return Mesh(_grid_vertices(m), cells, RECTANGLE)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every cell into four similar children via edge midpoints."""
    nv, ne = mesh.num_vertices, mesh.num_edges
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    m = nv + mesh.cell_edges  # midpoint vertex index per (cell, local edge)
    c = mesh.cells
    if mesh.cell_type == TRIANGLE:
        # local edge i is opposite vertex i
        m12, m20, m01 = m[:, 0], m[:, 1], m[:, 2]
        children = np.stack([
            np.stack([c[:, 0], m01, m20], axis=1),
            np.stack([m01, c[:, 1], m12], axis=1),
            np.stack([m20, m12, c[:, 2]], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ], axis=1)
        verts = np.concatenate([mesh.vertices, mids])
    else:
        centers = mesh.centroids()
        ctr = nv + ne + np.arange(mesh.num_cells)
        m01, m12, m23, m30 = m[:, 0], m[:, 1], m[:, 2], m[:, 3]
        children = np.stack([
            np.stack([c[:, 0], m01, ctr, m30], axis=1),
            np.stack([m01, c[:, 1], m12, ctr], axis=1),
            np.stack([ctr, m12, c[:, 2], m23], axis=1),
            np.stack([m30, ctr, m23, c[:, 3]], axis=1),
        ], axis=1)
        verts = np.concatenate([mesh.vertices, mids, centers])
    nchild = children.shape[1]
    parent = np.repeat(np.arange(mesh.num_cells), nchild)
    return Mesh(verts, children.reshape(-1, children.shape[-1]), mesh.cell_type,
                parent_map=parent, parent_kind="refine")


def barycentric_subdivide(mesh: Mesh) -> Mesh:
    """Connect the vertices of every triangle to its barycenter (3 children)."""
    if mesh.cell_type != TRIANGLE:
        raise MeshError("barycentric subdivision is defined for triangular meshes only")
    nv = mesh.num_vertices
    g = nv + np.arange(mesh.num_cells)
    c = mesh.cells
    children = np.stack([
        np.stack([c[:, 0], c[:, 1], g], axis=1),
        np.stack([c[:, 1], c[:, 2], g], axis=1),
        np.stack([c[:, 2], c[:, 0], g], axis=1),
    ], axis=1).reshape(-1, 3)
    verts = np.concatenate([mesh.vertices, mesh.centroids()])
    parent = np.repeat(np.arange(mesh.num_cells), 3)
    return Mesh(verts, children, TRIANGLE, parent_map=parent, parent_kind="barycentric")


def barycentric_triangulation(m: int) -> Mesh:
    """Barycentric refinement of the structured m x m triangulation."""
    return barycentric_subdivide(unit_square_triangulation(m))


def canonical_form(mesh: Mesh, decimals: int = 12) -> frozenset:
    """Cells as sets of rounded vertex coordinates; independent of numbering."""
    pts = np.round(mesh.vertices, decimals)
    return frozenset(frozenset(map(tuple, pts[c].tolist())) for c in mesh.cells)


def build_mesh(family: str, m: int) -> Mesh:
    """Structured unit-square mesh of the given family (tri, rect, bary)."""
    if family == "tri":
        return unit_square_triangulation(m)
    if family == "rect":
        return unit_square_rectgrid(m)
    if family == "bary":
        return barycentric_triangulation(m)
    raise ValueError(f"unknown mesh family {family!r}")
