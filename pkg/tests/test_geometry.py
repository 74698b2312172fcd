import logging

import numpy as np
import pytest

from fracta.geometry import (
    MeshError,
    NotWatertightError,
    ParseError,
    RigidTransform,
    TriangleMesh,
    box_mesh,
    cylinder_mesh,
    grid_centers,
    icosphere,
    is_watertight,
    load_mesh,
    normalize_to_unit_cube,
    point_occupancy,
    points_inside,
    rotation_about_axis,
    save_mesh,
    surface_sample,
    voxelize,
)


def chordal_error(mesh, center=(0, 0, 0)):
    """Largest gap between a convex mesh's faces and the circumscribed surface through its vertices."""
    r = np.linalg.norm(mesh.vertices - center, axis=1).max()
    n = mesh.face_normals
    plane = np.einsum("ij,ij->i", n, mesh.vertices[mesh.triangles[:, 0]] - center)
    return r - plane.min()


# --------------------------------------------------------------------------
# construction


def test_degenerate_triangles_are_dropped(caplog):
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]]
    with caplog.at_level(logging.WARNING):
        m = TriangleMesh(v, [[0, 1, 2], [0, 1, 3], [1, 1, 2]])
    assert len(m.triangles) == 1
    assert m.dropped_faces == 2
    assert "degenerate" in caplog.text


def test_index_out_of_range_rejected():
    with pytest.raises(MeshError):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])


def test_normals_must_be_unit():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
    with pytest.raises(MeshError):
        TriangleMesh(v, [[0, 1, 2]], vertex_normals=[[0, 0, 2]] * 3)


def test_rigid_transform_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, 1.0 + 1e-6]))
    with pytest.raises(ValueError):
        RigidTransform(uniform_scale=0.0)


def test_rigid_transform_inverse_and_compose():
    rng = np.random.default_rng(1)
    t = RigidTransform(rotation_about_axis((1, 2, 3), 0.9), (0.1, -0.2, 0.3), 1.7)
    p = rng.normal(size=(50, 3))
    np.testing.assert_allclose(t.inverse().apply(t.apply(p)), p, atol=1e-12)
    both = t.compose(t.inverse())
    np.testing.assert_allclose(both.matrix(), np.eye(4), atol=1e-12)
    np.testing.assert_allclose(RigidTransform.from_matrix(t.matrix()).matrix(), t.matrix(), atol=1e-12)


# --------------------------------------------------------------------------
# normalization


def test_normalize_cube_0_2():
    m, t = normalize_to_unit_cube(box_mesh((0, 0, 0), (2, 2, 2)))
    lo, hi = m.bounds()
    np.testing.assert_allclose(lo, -0.5)
    np.testing.assert_allclose(hi, 0.5)
    assert t.uniform_scale == pytest.approx(0.5)
    np.testing.assert_allclose(t.translation, -0.5)


def test_normalize_is_idempotent():
    m, _ = normalize_to_unit_cube(icosphere(2, 3.0, (1, 2, 3)))
    m2, t2 = normalize_to_unit_cube(m)
    np.testing.assert_allclose(t2.matrix(), np.eye(4), atol=1e-9)
    np.testing.assert_allclose(m2.vertices, m.vertices, atol=1e-9)


def test_normalize_elongated_box():
    src = box_mesh((0, 0, 0), (4, 1, 1))
    m, t = normalize_to_unit_cube(src)
    lo, hi = m.bounds()
    np.testing.assert_allclose(hi - lo, [1, 0.25, 0.25])
    np.testing.assert_allclose((lo + hi) / 2, 0, atol=1e-15)
    np.testing.assert_allclose(t.apply(src.vertices), m.vertices, atol=1e-9)


def test_normalize_errors():
    with pytest.raises(MeshError):
        normalize_to_unit_cube(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))))
    with pytest.raises(MeshError):
        normalize_to_unit_cube(TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3))))


# --------------------------------------------------------------------------
# watertightness and occupancy


def test_watertight_cube():
    assert is_watertight(box_mesh())


def test_cube_missing_face_has_four_boundary_edges():
    cube = box_mesh()
    open_cube = TriangleMesh(cube.vertices, cube.triangles[2:])
    report = is_watertight(open_cube)
    assert not report
    assert len(report.boundary_edges) == 4


def test_two_disjoint_spheres_are_watertight():
    a, b = icosphere(1, 0.2, (-0.3, 0, 0)), icosphere(1, 0.2, (0.3, 0, 0))
    both = TriangleMesh(np.concatenate([a.vertices, b.vertices]),
                        np.concatenate([a.triangles, b.triangles + len(a.vertices)]))
    assert is_watertight(both)


def test_flipped_face_is_inconsistent():
    cube = box_mesh()
    tris = cube.triangles.copy()
    tris[0] = tris[0, ::-1]
    report = is_watertight(TriangleMesh(cube.vertices, tris))
    assert not report and len(report.inconsistent_edges) == 3


def test_unit_cube_occupancy():
    cube = box_mesh()
    assert point_occupancy(cube, (0, 0, 0)) == 1
    assert point_occupancy(cube, (0.6, 0, 0)) == 0
    # open-set convention: the boundary is outside
    assert point_occupancy(cube, (0.5, 0, 0)) == 0
    assert point_occupancy(cube, (0.5, 0.5, 0.5)) == 0


def test_occupancy_refuses_open_mesh():
    cube = box_mesh()
    with pytest.raises(NotWatertightError, match="4 open edges"):
        point_occupancy(TriangleMesh(cube.vertices, cube.triangles[2:]), (0, 0, 0))


@pytest.mark.parametrize("shape", ["sphere", "box", "cylinder"])
def test_parity_matches_analytic_membership(shape):
    rng = np.random.default_rng(7)
    p = rng.uniform(-0.55, 0.55, size=(10_000, 3))
    if shape == "sphere":
        mesh = icosphere(3, 0.3)
        assert len(mesh.triangles) == 1280
        band = 2 * chordal_error(mesh)
        d = np.linalg.norm(p, axis=1) - 0.3
    elif shape == "box":
        mesh = box_mesh((-0.3, -0.2, -0.25), (0.3, 0.2, 0.25))
        band = 1e-9
        d = np.max(np.abs(p) - [0.3, 0.2, 0.25], axis=1)
    else:
        mesh = cylinder_mesh(0.3, 0.4, 64)
        band = 2 * 0.3 * (1 - np.cos(np.pi / 64))
        d = np.maximum(np.hypot(p[:, 0], p[:, 2]) - 0.3, np.abs(p[:, 1]) - 0.4)
    occ = points_inside(mesh, p)
    clear = np.abs(d) > band
    assert clear.sum() > 9000
    np.testing.assert_array_equal(occ[clear], (d[clear] < 0).astype(np.uint8))


# --------------------------------------------------------------------------
# voxelization


def test_voxelize_cube_count():
    k = 64
    grid = voxelize(box_mesh((-0.25,) * 3, (0.25,) * 3), k)
    centers_1d = grid_centers(k, grid.origin, grid.cell_size)[:k, 0]
    per_axis = int((np.abs(centers_1d) < 0.25).sum())
    count = int(grid.values.sum())
    assert count == per_axis ** 3
    side = 0.5 / 1.1 * k
    shell = 6 * (side + 1) ** 2
    assert abs(count - side ** 3) <= shell


def test_voxelize_empty_region_and_k2_layout():
    grid = voxelize(box_mesh((0.3,) * 3, (0.5,) * 3), 2)
    assert grid.values.sum() == 0
    np.testing.assert_allclose(np.unique(grid.centers()), [-0.275, 0.275])
    assert grid.values.size == 8


def test_voxel_fraction_converges_for_sphere():
    mesh = icosphere(4, 0.3)
    exact = -mesh.volume() if mesh.volume() < 0 else mesh.volume()
    errs = []
    for k in (16, 32):
        frac = voxelize(mesh, k).occupied_fraction()
        errs.append(abs(frac * 1.1 ** 3 - exact))
    assert errs[1] <= errs[0] / 2 * 1.2


# --------------------------------------------------------------------------
# surface sampling


def test_samples_lie_in_triangle_plane():
    tri = TriangleMesh([[0.1, 0.2, 0.3], [1.0, 0.4, -0.2], [0.3, 1.1, 0.5]], [[0, 1, 2]])
    p, n = surface_sample(tri, 10_000, seed=3)
    dist = (p - tri.vertices[0]) @ tri.face_normals[0]
    assert np.abs(dist).max() < 1e-9
    np.testing.assert_allclose(n, np.repeat(tri.face_normals, len(p), axis=0))


def test_area_weighted_split():
    # two triangles with area ratio 3:1
    v = [[0, 0, 0], [3, 0, 0], [0, 1, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]]
    mesh = TriangleMesh(v, [[0, 1, 2], [3, 4, 5]])
    n = 40_000
    _, _, faces = surface_sample(mesh, n, seed=11, return_faces=True)
    first = int((faces == 0).sum())
    sigma = np.sqrt(n * 0.75 * 0.25)
    assert abs(first - 0.75 * n) < 3 * sigma


def test_surface_sample_deterministic_and_errors():
    mesh = icosphere(2)
    a = surface_sample(mesh, 500, seed=5)
    b = surface_sample(mesh, 500, seed=5)
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(ValueError):
        surface_sample(mesh, 0, seed=5)


# --------------------------------------------------------------------------
# file I/O


def test_minimal_off(tmp_path):
    path = tmp_path / "tri.off"
    path.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    mesh = load_mesh(path)
    assert len(mesh.triangles) == 1 and len(mesh.vertices) == 3


def _ply_bytes(n_vertices, faces):
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n_vertices}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {len(faces)}\nproperty list uchar int vertex_indices\nend_header\n"
    ).encode()
    body = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]][:n_vertices], "<f4").tobytes()
    for f in faces:
        body += bytes([3]) + np.array(f, "<i4").tobytes()
    return header, body


def test_ply_bad_index_reports_offset(tmp_path):
    header, body = _ply_bytes(4, [[0, 1, 2], [0, 1, 99]])
    path = tmp_path / "bad.ply"
    path.write_bytes(header + body)
    with pytest.raises(ParseError) as info:
        load_mesh(path)
    # the second face record starts after the vertices and the first 13-byte face
    assert info.value.offset == len(header) + 4 * 12 + 13


def test_ply_unsupported_layout(tmp_path):
    path = tmp_path / "ascii.ply"
    path.write_text("ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(ParseError, match="unsupported"):
        load_mesh(path)


@pytest.mark.parametrize("suffix", [".ply", ".off"])
def test_round_trip_bit_exact(tmp_path, suffix):
    rng = np.random.default_rng(2)
    sphere = icosphere(3)
    v = (sphere.vertices + rng.normal(scale=0.01, size=sphere.vertices.shape)).astype(np.float32)
    tris = sphere.triangles[rng.permutation(1000)]
    mesh = TriangleMesh(v, tris, vertex_colors=rng.random(v.shape).astype(np.float32))
    if suffix == ".off":
        mesh = TriangleMesh(v, tris)
    assert len(mesh.triangles) == 1000
    save_mesh(mesh, tmp_path / f"m{suffix}")
    back = load_mesh(tmp_path / f"m{suffix}")
    assert back.vertices.tobytes() == mesh.vertices.tobytes()
    assert back.triangles.tobytes() == mesh.triangles.tobytes()
    save_mesh(back, tmp_path / f"again{suffix}")
    assert (tmp_path / f"again{suffix}").read_bytes() == (tmp_path / f"m{suffix}").read_bytes()


def test_ply_labels_and_normals_round_trip(tmp_path):
    sphere = icosphere(1)
    normals = sphere.vertices / np.linalg.norm(sphere.vertices, axis=1, keepdims=True)
    labels = (np.arange(len(sphere.triangles)) % 2).astype(np.uint8)
    mesh = TriangleMesh(sphere.vertices.astype(np.float32), sphere.triangles,
                        vertex_normals=normals.astype(np.float32).astype(np.float64) /
                        np.linalg.norm(normals.astype(np.float32), axis=1, keepdims=True),
                        face_labels=labels)
    save_mesh(mesh, tmp_path / "l.ply")
    back = load_mesh(tmp_path / "l.ply")
    np.testing.assert_array_equal(back.face_labels, labels)
    np.testing.assert_allclose(back.vertex_normals, mesh.vertex_normals, atol=1e-6)


def test_truncated_ply(tmp_path):
    header, body = _ply_bytes(4, [[0, 1, 2]])
    path = tmp_path / "t.ply"
    path.write_bytes(header + body[:-3])
    with pytest.raises(ParseError):
        load_mesh(path)
