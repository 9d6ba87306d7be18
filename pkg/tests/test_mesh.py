import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weaksym.mesh import (
    MeshError, barycentric_subdivide, barycentric_triangulation, build_mesh, canonical_form,
    check_invariants, load_mesh_json, refine_uniform, unit_square_rectgrid, unit_square_triangulation,
)


@pytest.mark.parametrize("m, cells, verts, edges", [(1, 2, 4, 5), (2, 8, 9, 16), (4, 32, 25, 56)])
def test_triangulation_counts(m, cells, verts, edges):
    mesh = unit_square_triangulation(m)
    assert (mesh.num_cells, mesh.num_vertices, mesh.num_edges) == (cells, verts, edges)
    # Euler: V - E + F = 1 for a disk
    assert verts - edges + cells == 1


def test_triangulation_uniform_areas():
    mesh = unit_square_triangulation(4)
    np.testing.assert_allclose(mesh.areas(), 1 / 32, rtol=1e-14)


@pytest.mark.parametrize("m, cells, verts, edges", [(1, 1, 4, 4), (3, 9, 16, 24)])
def test_rectgrid_counts(m, cells, verts, edges):
    mesh = unit_square_rectgrid(m)
    assert (mesh.num_cells, mesh.num_vertices, mesh.num_edges) == (cells, verts, edges)
    np.testing.assert_allclose(mesh.h_per_cell, np.sqrt(2) / m, rtol=1e-14)


@pytest.mark.parametrize("gen", [unit_square_triangulation, unit_square_rectgrid])
def test_m_zero_rejected(gen):
    with pytest.raises(ValueError):
        gen(0)


def test_refine_counts_and_h():
    mesh = unit_square_triangulation(1)
    fine = refine_uniform(mesh)
    assert fine.num_cells == 8
    assert np.isclose(fine.h_per_cell.max(), mesh.h_per_cell.max() / 2)
    assert canonical_form(fine) == canonical_form(unit_square_triangulation(2))


def test_barycentric_subdivide():
    mesh = unit_square_triangulation(1)
    bary = barycentric_subdivide(mesh)
    assert (bary.num_cells, bary.num_vertices) == (6, 6)
    assert bary.is_barycentric
    for parent, children in enumerate(bary.macro_cells()):
        np.testing.assert_allclose(bary.areas()[children], mesh.areas()[parent] / 3, rtol=1e-14)


def test_barycentric_shape_regularity():
    for m in (1, 2, 4):
        macro = unit_square_triangulation(m)
        assert barycentric_triangulation(m).shape_ratios().max() <= 3 * macro.shape_ratios().max()


def test_barycentric_rejects_rectangles():
    with pytest.raises(MeshError):
        barycentric_subdivide(unit_square_rectgrid(2))


@pytest.mark.parametrize("family", ["tri", "rect", "bary"])
@pytest.mark.parametrize("m", [1, 2, 3])
def test_invariants(family, m):
    mesh = build_mesh(family, m)
    assert check_invariants(mesh) == []
    assert abs(mesh.areas().sum() - 1.0) <= 1e-14
    assert np.all(mesh.areas() > 0)


@pytest.mark.parametrize("family", ["tri", "rect", "bary"])
def test_orientation_consistency(family):
    mesh = build_mesh(family, 3)
    signs = {}
    for c in range(mesh.num_cells):
        for i, e in enumerate(mesh.cell_edges[c]):
            signs.setdefault(int(e), []).append(int(mesh.edge_signs[c, i]))
    for e, s in signs.items():
        assert len(s) in (1, 2)
        if len(s) == 2:
            assert s[0] == -s[1]
    # edges oriented low -> high
    assert np.all(mesh.edges[:, 0] < mesh.edges[:, 1])


def test_outward_normals():
    mesh = build_mesh("tri", 2)
    n = mesh.edge_normals()
    cent = mesh.centroids()
    for c in range(mesh.num_cells):
        for i, e in enumerate(mesh.cell_edges[c]):
            mid = mesh.vertices[mesh.edges[e]].mean(axis=0)
            assert mesh.edge_signs[c, i] * np.dot(n[e], mid - cent[c]) > 0


def _inside(tri, p, tol=1e-12):
    a, b, c = tri
    def cross(u, v, w):
        return (v[0] - u[0]) * (w[1] - u[1]) - (v[1] - u[1]) * (w[0] - u[0])
    return cross(a, b, p) >= -tol and cross(b, c, p) >= -tol and cross(c, a, p) >= -tol


@pytest.mark.parametrize("refine", [refine_uniform, barycentric_subdivide])
def test_refinement_nesting(refine):
    coarse = unit_square_triangulation(2)
    fine = refine(coarse)
    cv = coarse.cell_coordinates()
    for child, parent in enumerate(fine.parent_map):
        for p in fine.cell_coordinates()[child]:
            assert _inside(cv[parent], p)


def test_immutable():
    mesh = unit_square_triangulation(1)
    with pytest.raises((ValueError, AttributeError, TypeError)):
        mesh.vertices[0, 0] = 5.0


def test_json_round_trip():
    mesh = build_mesh("rect", 2)
    again = load_mesh_json(mesh.to_json())
    np.testing.assert_array_equal(again.vertices, mesh.vertices)
    np.testing.assert_array_equal(again.cells, mesh.cells)


def test_json_error_has_line():
    text = json.dumps({"cell_type": "tri", "vertices": [[0, 0], [1, 0], [0, 1]], "cells": [[0, 1, 7]]}, indent=1)
    with pytest.raises(MeshError, match=r"^line \d+"):
        load_mesh_json(text)


def test_json_clockwise_rejected():
    text = json.dumps({"cell_type": "tri", "vertices": [[0, 0], [1, 0], [0, 1]], "cells": [[0, 2, 1]]})
    with pytest.raises(MeshError, match="line"):
        load_mesh_json(text)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.sampled_from(["tri", "rect", "bary"]))
def test_area_conservation_property(m, family):
    mesh = build_mesh(family, m)
    assert abs(mesh.areas().sum() - 1.0) <= 1e-14
    assert mesh.num_vertices - mesh.num_edges + mesh.num_cells == 1
