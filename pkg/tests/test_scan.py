import logging
import struct

import numpy as np
import pytest

from fracta.geometry import RigidTransform, TriangleMesh, box_mesh, rotation_about_axis
from fracta.raster import intrinsics, rasterize, silhouette
from fracta.scan import (
    BadMagicError,
    DepthScanRecord,
    LengthMismatchError,
    OrthonormalityError,
    ProjectError,
    ScanFormatError,
    TrailingBytesError,
    TruncatedError,
    VersionMismatchError,
    parse_project,
    parse_scan,
    project_mask,
    scan_from_bytes,
    scan_to_bytes,
    write_scan,
)


def random_record(rng, n=None):
    n = int(rng.integers(0, 300)) if n is None else n
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    q = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    q *= np.sign(np.linalg.det(q))
    t = np.eye(4)
    t[:3, :3] = q
    t[:3, 3] = rng.normal(size=3)
    return DepthScanRecord(
        points=rng.normal(size=(n, 3)),
        colors=rng.integers(0, 256, size=(n, 3)) / 255.0,
        normals=normals,
        transform_matrix=t,
        camera_frame=rng.normal(size=(4, 4)),
        turntable_distance=rng.uniform(100, 900),
        flags=int(rng.integers(0, 2**32)),
    )


def test_round_trip_is_bit_exact():
    rng = np.random.default_rng(0)
    for _ in range(50):
        data = scan_to_bytes(random_record(rng))
        assert scan_to_bytes(scan_from_bytes(data)) == data


def test_large_record_file_round_trip(tmp_path):
    rec = random_record(np.random.default_rng(1), 10_000)
    write_scan(rec, tmp_path / "a.fxrg")
    back = parse_scan(tmp_path / "a.fxrg")
    write_scan(back, tmp_path / "b.fxrg")
    assert (tmp_path / "a.fxrg").read_bytes() == (tmp_path / "b.fxrg").read_bytes()
    np.testing.assert_array_equal(back.points, rec.points)
    np.testing.assert_array_equal(back.colors_u8, rec.colors_u8)
    assert back.record_id == "a"


def test_layout():
    rec = random_record(np.random.default_rng(2), 5)
    data = scan_to_bytes(rec)
    assert data[:4] == b"FXRG"
    assert struct.unpack_from("<III", data, 4) == (1, 5, rec.flags)
    # 15 color bytes padded to 16
    assert len(data) == 148 + 60 + 16 + 60
    t = np.frombuffer(data, "<f4", count=16, offset=84).reshape(4, 4)
    np.testing.assert_array_equal(t, rec.transform_matrix)


def test_empty_record():
    rec = random_record(np.random.default_rng(3), 0)
    back = scan_from_bytes(scan_to_bytes(rec))
    assert len(back.points) == 0
    assert back.alignment is not None


def corrupt(kind):
    rec = random_record(np.random.default_rng(4), 10)
    data = bytearray(scan_to_bytes(rec))
    if kind == "magic":
        data[:4] = b"RIFF"
    elif kind == "version":
        data[4:8] = struct.pack("<I", 2)
    elif kind == "truncation":
        data = data[:100]
    elif kind == "length":
        # N says 10 but only 9 color triples (28 padded bytes) are present
        head, body = data[:148], data[148:]
        data = head + body[:120] + body[120:120 + 27] + b"\0" + body[152:]
    elif kind == "orthonormal":
        t = np.frombuffer(bytes(data[84:148]), "<f4").reshape(4, 4).copy()
        t[:3, 0] *= 1.01
        data[84:148] = t.astype("<f4").tobytes()
    elif kind == "trailing":
        data += b"\0\0\0\0"
    return bytes(data)


@pytest.mark.parametrize("kind,error,offset", [
    ("magic", BadMagicError, 0),
    ("version", VersionMismatchError, 4),
    ("truncation", TruncatedError, 100),
    ("length", LengthMismatchError, None),
    ("orthonormal", OrthonormalityError, 84),
    ("trailing", TrailingBytesError, 148 + 120 + 32 + 120),
])
def test_corruption_classes(kind, error, offset):
    with pytest.raises(error) as err:
        scan_from_bytes(corrupt(kind))
    assert isinstance(err.value, ScanFormatError)
    if offset is not None:
        assert err.value.offset == offset
    assert "byte" in str(err.value) or err.value.offset is not None


def test_non_unit_normal_rejected():
    rec = random_record(np.random.default_rng(5), 4)
    rec.normals[2] *= 1.01
    with pytest.raises(ScanFormatError, match="normal 2"):
        scan_from_bytes(scan_to_bytes(rec))


def test_length_mismatch_in_memory():
    with pytest.raises(LengthMismatchError):
        DepthScanRecord(np.zeros((10, 3)), np.zeros((9, 3)), np.zeros((10, 3)), np.eye(4))


def test_alignment_inverse_round_trip():
    rec = random_record(np.random.default_rng(6), 100)
    t = rec.alignment
    p = rec.points.astype(np.float64)
    back = t.inverse().apply(t.apply(p))
    assert np.abs(back - p).max() <= 1e-4 * max(1.0, np.abs(p).max())


def write_project(tmp_path, text):
    path = tmp_path / "scan.project"
    path.write_text(text, encoding="utf-8")
    return path


BASE = "fx=100\nfy=100\ncx=64\ncy=64\nwidth=128\nheight=128\n"


def test_minimal_project(tmp_path):
    proj = parse_project(write_project(tmp_path, BASE + "scan.0.image=img.ppm\nscan.0.record=r.fxrg\n"))
    assert len(proj.scans) == 1
    assert proj.scans[0] == (tmp_path / "img.ppm", tmp_path / "r.fxrg")
    np.testing.assert_array_equal(proj.K, intrinsics(100, 100, 64, 64))
    assert proj.size == (128, 128)


def test_project_errors(tmp_path):
    with pytest.raises(ProjectError, match="positive"):
        parse_project(write_project(tmp_path, BASE.replace("fx=100", "fx=0")))
    with pytest.raises(ProjectError, match="missing"):
        parse_project(write_project(tmp_path, "fx=1\n"))
    with pytest.raises(ProjectError, match="principal"):
        parse_project(write_project(tmp_path, BASE.replace("cx=64", "cx=200")))


def test_duplicate_keys_last_wins(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        proj = parse_project(write_project(tmp_path, BASE + "fx=50\n"))
    assert proj.K[0, 0] == 50
    assert "duplicate" in caplog.text


def unit_square(z):
    verts = np.array([[-0.5, -0.5, z], [0.5, -0.5, z], [0.5, 0.5, z], [-0.5, 0.5, z]])
    return TriangleMesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))


K = intrinsics(100, 100, 64, 64)


def test_pinhole_square_is_50_pixel_block():
    mask = project_mask(unit_square(2.0), RigidTransform(), K, (128, 128))
    rows, cols = np.nonzero(mask)
    assert abs(mask.sum() - 2500) <= 2 * 50 + 1
    assert abs((rows.max() - rows.min() + 1) - 50) <= 1
    assert abs((cols.max() - cols.min() + 1) - 50) <= 1
    # the block is solid
    assert mask[rows.min():rows.max() + 1, cols.min():cols.max() + 1].all()


def test_depth_doubling_quarters_the_area():
    near = project_mask(unit_square(2.0), RigidTransform(), K, (128, 128)).sum()
    # T maps scan to model; its inverse pushes the model 2 units further away
    far = project_mask(unit_square(2.0), RigidTransform(translation=(0, 0, -2.0)), K, (128, 128)).sum()
    assert near / far == pytest.approx(4.0, rel=0.02)


def test_behind_camera_gives_empty_mask(caplog):
    with caplog.at_level(logging.WARNING):
        mask = project_mask(unit_square(-2.0), RigidTransform(), K, (128, 128))
    assert not mask.any()
    assert "behind" in caplog.text


def test_roll_by_90_degrees_rotates_the_mask():
    mesh = box_mesh((-0.31, -0.12, 1.7), (0.23, 0.37, 2.2))
    base = project_mask(mesh, RigidTransform(), K, (128, 128))
    roll = RigidTransform(rotation_about_axis((0, 0, 1), np.pi / 2))
    rolled = project_mask(mesh, roll, K, (128, 128))
    assert rolled.sum() == base.sum()
    assert any(np.array_equal(rolled, np.rot90(base, k)) for k in (1, 3))


def test_shared_edges_are_drawn_once():
    verts = np.array([[-0.4, -0.3, 2.0], [0.5, -0.35, 2.0], [0.45, 0.4, 2.0], [-0.5, 0.33, 2.0]])
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    both = silhouette(verts, tris, K, 128, 128).sum()
    one = silhouette(verts, tris[:1], K, 128, 128).sum()
    two = silhouette(verts, tris[1:], K, 128, 128).sum()
    assert both == one + two


def test_zbuffer_ties_and_order_independence():
    rng = np.random.default_rng(7)
    verts = np.concatenate([unit_square(2.0).vertices, unit_square(3.0).vertices])
    tris = np.array([[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7], [0, 1, 2]])
    depth, face = rasterize(verts, tris, K, 128, 128)
    assert depth[64, 64] == pytest.approx(2.0)
    # the duplicate of triangle 0 never wins
    assert not (face == 4).any()
    perm = rng.permutation(len(tris))
    depth2, face2 = rasterize(verts, tris[perm], K, 128, 128)
    np.testing.assert_array_equal(depth, depth2)
    mapped = np.where(face2 >= 0, perm[np.maximum(face2, 0)], -1)
    # equal-depth duplicates may swap ids but must resolve to the same geometry
    mapped = np.where(mapped == 4, 0, mapped)
    np.testing.assert_array_equal(np.where(face == 4, 0, face), mapped)
