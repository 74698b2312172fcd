"""Depth-scan records (FXRG), project descriptors and pose-based mask projection.

FXRG, little-endian::

    offset  size        field
    0       4           magic b"FXRG"
    4       4           u32 version (1)
    8       4           u32 N, number of points
    12      4           u32 flags (opaque, preserved)
    16      4           f32 turntable distance, millimeters
    20      64          16 x f32 camera frame, row-major
    84      64          16 x f32 alignment T (scan -> model), row-major
    148     12 N        N x 3 f32 points
    ..      3 N + pad   N x 3 u8 colors, zero-padded to a multiple of 4 bytes
    ..      12 N        N x 3 f32 normals

Supporting a vendor scan format only needs a different header mapping onto
:class:`DepthScanRecord`.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RigidTransform, TriangleMesh
from .raster import intrinsics, silhouette

log = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sIIIf16f16f")
_MAGIC = b"FXRG"
_VERSION = 1
_T_OFFSET = 84
ORTHONORMAL_TOL = 1e-4
NORMAL_TOL = 1e-3


class ScanFormatError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(ScanFormatError):
    pass


class VersionMismatchError(ScanFormatError):
    pass


class TruncatedError(ScanFormatError):
    """The file ends inside the fixed-size header."""


class LengthMismatchError(ScanFormatError):
    """An array section holds fewer bytes than the point count requires."""


class OrthonormalityError(ScanFormatError):
    pass


class TrailingBytesError(ScanFormatError):
    pass


def _pad4(n):
    return (n + 3) & ~3


@dataclass(eq=False)
class DepthScanRecord:
    points: np.ndarray  # (N, 3) float32
    colors: np.ndarray  # (N, 3) float64 in [0, 1], stored as u8
    normals: np.ndarray  # (N, 3) float32
    transform_matrix: np.ndarray  # (4, 4) float32, scan -> model
    camera_frame: np.ndarray = field(default_factory=lambda: np.eye(4, dtype=np.float32))
    turntable_distance: float = 0.0
    flags: int = 0
    record_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float32).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.transform_matrix = np.asarray(self.transform_matrix, dtype=np.float32).reshape(4, 4)
        self.camera_frame = np.asarray(self.camera_frame, dtype=np.float32).reshape(4, 4)
        self.turntable_distance = float(np.float32(self.turntable_distance))
        n = len(self.points)
        if len(self.colors) != n or len(self.normals) != n:
            raise LengthMismatchError(
                f"points/colors/normals lengths differ: {n}/{len(self.colors)}/{len(self.normals)}"
            )

    @property
    def alignment(self) -> RigidTransform:
        return RigidTransform.from_matrix(self.transform_matrix, atol=ORTHONORMAL_TOL)

    @property
    def colors_u8(self):
        return np.rint(self.colors * 255.0).astype(np.uint8)


def scan_to_bytes(rec: DepthScanRecord) -> bytes:
    n = len(rec.points)
    head = _HEADER.pack(
        _MAGIC, _VERSION, n, rec.flags, rec.turntable_distance,
        *rec.camera_frame.ravel(), *rec.transform_matrix.ravel(),
    )
    colors = rec.colors_u8.tobytes()
    colors += b"\0" * (_pad4(len(colors)) - len(colors))
    return head + rec.points.astype("<f4").tobytes() + colors + rec.normals.astype("<f4").tobytes()


def scan_from_bytes(data: bytes, record_id="") -> DepthScanRecord:
    if len(data) < 4 or data[:4] != _MAGIC:
        raise BadMagicError("not an FXRG record (bad magic)", 0)
    if len(data) < _HEADER.size:
        raise TruncatedError(f"header needs {_HEADER.size} bytes, file has {len(data)}", len(data))
    fields_ = _HEADER.unpack_from(data)
    _, version, n, flags, distance = fields_[:5]
    if version != _VERSION:
        raise VersionMismatchError(f"unsupported FXRG version {version}", 4)
    camera = np.array(fields_[5:21], dtype=np.float32).reshape(4, 4)
    transform = np.array(fields_[21:37], dtype=np.float32).reshape(4, 4)

    pos = _HEADER.size
    sections = [("points", 12 * n), ("colors", _pad4(3 * n)), ("normals", 12 * n)]
    chunks = {}
    for name, size in sections:
        if pos + size > len(data):
            raise LengthMismatchError(
                f"{name} section needs {size} bytes for N={n} but only {len(data) - pos} remain", pos
            )
        chunks[name] = (pos, data[pos:pos + size])
        pos += size
    if pos != len(data):
        raise TrailingBytesError(f"{len(data) - pos} bytes after the normals section", pos)

    points = np.frombuffer(chunks["points"][1], dtype="<f4").reshape(n, 3).astype(np.float32)
    col_off, col_bytes = chunks["colors"]
    colors = np.frombuffer(col_bytes[:3 * n], dtype=np.uint8).reshape(n, 3)
    if any(col_bytes[3 * n:]):
        raise ScanFormatError("nonzero color padding", col_off + 3 * n)
    nrm_off, nrm_bytes = chunks["normals"]
    normals = np.frombuffer(nrm_bytes, dtype="<f4").reshape(n, 3).astype(np.float32)

    a = transform[:3, :3].astype(np.float64)
    det = np.linalg.det(a)
    if not det > 0:
        raise OrthonormalityError("alignment transform has non-positive determinant", _T_OFFSET)
    r = a / np.cbrt(det)
    if np.abs(r.T @ r - np.eye(3)).max() > ORTHONORMAL_TOL:
        raise OrthonormalityError("alignment rotation block is not orthonormal", _T_OFFSET)
    if n:
        lengths = np.linalg.norm(normals.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(lengths - 1.0) > NORMAL_TOL)
        if len(bad):
            raise ScanFormatError(f"normal {bad[0]} is not unit length", nrm_off + 12 * bad[0])
    return DepthScanRecord(points, colors / 255.0, normals, transform, camera, distance, flags, record_id)


def write_scan(rec: DepthScanRecord, path):
    Path(path).write_bytes(scan_to_bytes(rec))


def parse_scan(path) -> DepthScanRecord:
    path = Path(path)
    return scan_from_bytes(path.read_bytes(), record_id=path.stem)


# --------------------------------------------------------------------------
# project descriptors


class ProjectError(ValueError):
    pass


@dataclass
class ProjectDescriptor:
    K: np.ndarray
    width: int
    height: int
    scans: list  # [(image path, record path)]
    model: Path = None

    @property
    def size(self):
        return self.width, self.height


_REQUIRED = ("fx", "fy", "cx", "cy", "width", "height")


def parse_project(path) -> ProjectDescriptor:
    """Read a UTF-8 ``key=value`` project file; duplicate keys keep the last value."""
    path = Path(path)
    base = path.parent
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ProjectError(f"line {lineno}: expected key=value")
        key, value = key.strip(), value.strip()
        if key in values:
            log.warning("duplicate key %r on line %d; using the last value", key, lineno)
        values[key] = value
    missing = [k for k in _REQUIRED if k not in values]
    if missing:
        raise ProjectError(f"missing mandatory keys: {', '.join(missing)}")
    try:
        fx, fy, cx, cy = (float(values[k]) for k in ("fx", "fy", "cx", "cy"))
        width, height = int(values["width"]), int(values["height"])
    except ValueError as exc:
        raise ProjectError(f"non-numeric intrinsics: {exc}") from exc
    if fx <= 0 or fy <= 0:
        raise ProjectError("focal lengths must be positive")
    if width <= 0 or height <= 0:
        raise ProjectError("image size must be positive")
    if not (0 <= cx <= width and 0 <= cy <= height):
        raise ProjectError("principal point lies outside the image")

    entries = {}
    for key, value in values.items():
        parts = key.split(".")
        if len(parts) == 3 and parts[0] == "scan" and parts[2] in ("image", "record"):
            try:
                idx = int(parts[1])
            except ValueError:
                raise ProjectError(f"bad scan index in key {key!r}")
            entries.setdefault(idx, {})[parts[2]] = base / value
        elif key not in _REQUIRED and key != "model":
            log.warning("ignoring unknown project key %r", key)
    scans = []
    for idx in sorted(entries):
        entry = entries[idx]
        if "record" not in entry:
            raise ProjectError(f"scan {idx} has no record path")
        scans.append((entry.get("image"), entry["record"]))
    model = base / values["model"] if "model" in values else None
    return ProjectDescriptor(intrinsics(fx, fy, cx, cy), width, height, scans, model)


def project_mask(mesh: TriangleMesh, transform: RigidTransform, K, size) -> np.ndarray:
    """Silhouette of the model placed in the camera frame by the inverse alignment."""
    width, height = size
    if mesh.is_empty:
        raise ValueError("cannot project an empty mesh")
    cam = transform.inverse().apply(mesh.vertices)
    mask = silhouette(cam, mesh.triangles, np.asarray(K, dtype=np.float64), width, height)
    if (cam[:, 2] <= 0).all():
        log.warning("model lies entirely behind the camera; mask is empty")
    return mask
