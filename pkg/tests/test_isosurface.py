import itertools

import numpy as np
import pytest

from fracta.algebra import constant_field, sphere_field
from fracta.geometry import OccupancyGrid, is_watertight
from fracta.isosurface import DEFAULT_K, extract, marching_cubes, query_grid


def sphere_deviation(k, r=0.3):
    grid = query_grid(sphere_field(r), k)
    mesh = marching_cubes(grid)
    dev = np.abs(np.linalg.norm(mesh.vertices, axis=1) - r).max()
    return mesh, grid, dev


def test_default_resolution():
    assert DEFAULT_K == 128


def test_sphere_occupied_fraction():
    grid = query_grid(sphere_field(0.3), 128)
    analytic = 4 / 3 * np.pi * 0.3 ** 3 / 1.1 ** 3
    assert grid.occupied_fraction() == pytest.approx(analytic, rel=0.01)


def test_sphere_mesh_k64():
    mesh, grid, dev = sphere_deviation(64)
    assert is_watertight(mesh)
    assert mesh.euler_characteristic() == 2
    assert dev < 2 * grid.cell_size
    # triangles face outward
    assert mesh.volume() > 0


def test_constant_zero_field():
    res = extract(constant_field(0.0), 16)
    assert not res.nonzero and res.mesh is None
    assert res.grid.values.max() == 0
    assert marching_cubes(OccupancyGrid.cube(8)) is None


def test_single_occupied_cell_is_closed_octahedron():
    vals = np.zeros((5, 5, 5))
    vals[2, 2, 2] = 1.0
    grid = OccupancyGrid.cube(5, vals)
    mesh = marching_cubes(grid)
    assert is_watertight(mesh)
    assert mesh.euler_characteristic() == 2
    # every vertex sits halfway along a grid edge from the occupied center
    center = grid.centers().reshape(5, 5, 5, 3, order="F")[2, 2, 2]
    offsets = np.abs(mesh.vertices - center) / grid.cell_size
    np.testing.assert_allclose(np.sort(offsets, axis=1), np.tile([0, 0, 0.5], (len(offsets), 1)), atol=1e-6)
    assert len(mesh.vertices) == 6 and len(mesh.triangles) == 8


def test_binary_grid_vertices_on_edge_midpoints():
    rng = np.random.default_rng(0)
    vals = (rng.random((6, 6, 6)) > 0.6).astype(float)
    grid = OccupancyGrid.cube(6, vals)
    mesh = marching_cubes(grid)
    assert is_watertight(mesh)
    u = (mesh.vertices - grid.origin) / grid.cell_size - 0.5
    frac = np.sort(np.abs(u - np.round(u)), axis=1)
    # two coordinates on grid lines, one at an edge midpoint
    np.testing.assert_allclose(frac, np.tile([0, 0, 0.5], (len(frac), 1)), atol=1e-6)


def test_nonzero_flag_matches_threshold():
    for value, expected in [(0.49, False), (0.5, True), (0.8, True)]:
        res = extract(constant_field(value), 4)
        assert res.nonzero is expected
        assert (res.mesh is not None) is expected


def test_all_eight_corner_cases_are_closed():
    # brute force over every 2x2x2 occupancy pattern in the middle of a 4^3 grid
    for bits in itertools.product((0.0, 1.0), repeat=8):
        if not any(bits):
            continue
        vals = np.zeros((4, 4, 4))
        vals[1:3, 1:3, 1:3] = np.array(bits).reshape(2, 2, 2)
        mesh = marching_cubes(OccupancyGrid.cube(4, vals))
        assert is_watertight(mesh), bits
        assert mesh.volume() > 0
