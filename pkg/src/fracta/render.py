"""Fracture-facing camera placement and minimal shaded rendering.

Camera frames follow the pinhole convention used by :mod:`fracta.raster`:
X right, Y down, Z forward.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import FRACTURE, RigidTransform, TriangleMesh
from .raster import intrinsics, rasterize

log = logging.getLogger(__name__)

DEFAULT_FOV_DEG = 50.0
DEFAULT_RESOLUTION = 224
FRAMING = 0.9
AMBIENT = 0.3
DIFFUSE = 0.7


@dataclass(frozen=True)
class CameraModel:
    pose: RigidTransform  # world -> camera
    K: np.ndarray
    width: int = DEFAULT_RESOLUTION
    height: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        if K.shape != (3, 3) or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("intrinsics need positive focal lengths")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "K", K)

    @property
    def eye(self):
        """Camera center in world coordinates."""
        return self.pose.inverse().translation

    @property
    def forward(self):
        return self.pose.rotation[2]

    def to_camera(self, points):
        return self.pose.apply(points)

    def half_fovs(self):
        fx, fy = self.K[0, 0], self.K[1, 1]
        return np.arctan(self.width / (2 * fx)), np.arctan(self.height / (2 * fy))


def look_at(eye, target, up=(0.0, 1.0, 0.0), fov_deg=DEFAULT_FOV_DEG,
            width=DEFAULT_RESOLUTION, height=DEFAULT_RESOLUTION) -> CameraModel:
    """Camera at ``eye`` whose optical axis passes through ``target``; ``fov_deg`` is vertical."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(z)
    if norm == 0:
        raise ValueError("eye and target coincide")
    z /= norm
    up = np.asarray(up, dtype=np.float64)
    up_orth = up - (up @ z) * z
    if np.linalg.norm(up_orth) < 1e-9:
        raise ValueError("up vector is parallel to the viewing direction")
    y = -up_orth / np.linalg.norm(up_orth)
    x = np.cross(y, z)
    rot = np.stack([x, y, z])
    f = (height / 2) / np.tan(np.radians(fov_deg) / 2)
    K = intrinsics(f, f, width / 2, height / 2)
    return CameraModel(RigidTransform(rot, -rot @ eye), K, width, height)


def fracture_region(mesh: TriangleMesh):
    """Unique vertices of faces labeled as fracture."""
    if mesh.face_labels is None:
        return np.zeros((0, 3))
    faces = mesh.triangles[mesh.face_labels == FRACTURE]
    return mesh.vertices[np.unique(faces)]


def fracture_normal(mesh: TriangleMesh):
    """(center, unit normal) of the fracture region, the normal pointing away from the object."""
    pts = fracture_region(mesh)
    if len(pts) < 3:
        raise ValueError(f"need at least 3 fracture vertices, found {len(pts)}")
    c = pts.mean(axis=0)
    evals, evecs = np.linalg.eigh(np.cov((pts - c).T, bias=True))
    n = evecs[:, 0]
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        # collinear region: any direction orthogonal to the principal axis
        log.warning("fracture region is degenerate (collinear); using an arbitrary orthogonal normal")
        axis = evecs[:, 2]
        helper = np.eye(3)[np.argmin(np.abs(axis))]
        n = np.cross(axis, helper)
        n /= np.linalg.norm(n)
    if np.mean((mesh.vertices - c) @ n) > 0:
        n = -n
    return c, n


def _bounding_sphere(points):
    lo, hi = points.min(axis=0), points.max(axis=0)
    center = (lo + hi) / 2
    return center, float(np.linalg.norm(points - center, axis=1).max())


def _framed(c, n, d, center, radius, half_fov):
    eye = c + d * n
    to_center = center - eye
    dist = np.linalg.norm(to_center)
    if dist <= radius:
        return False
    off_axis = np.arccos(np.clip((to_center @ -n) / dist, -1.0, 1.0))
    return off_axis + np.arcsin(radius / dist) <= FRAMING * half_fov


def fracture_camera(tup, fov_deg=DEFAULT_FOV_DEG, width=DEFAULT_RESOLUTION,
                    height=DEFAULT_RESOLUTION) -> CameraModel:
    """Camera facing the fracture along its outward plane normal, framing the whole object."""
    mesh = tup.fractured_mesh if hasattr(tup, "fractured_mesh") else tup
    c, n = fracture_normal(mesh)
    center, radius = _bounding_sphere(mesh.vertices)
    f = (height / 2) / np.tan(np.radians(fov_deg) / 2)
    half_fov = min(np.arctan(width / (2 * f)), np.arctan(height / (2 * f)))
    hi = max(radius, 1e-3)
    while not _framed(c, n, hi, center, radius, half_fov):
        hi *= 2
        if hi > 1e6:
            raise ValueError("cannot frame the object from the fracture side")
    lo = 0.0
    for _ in range(60):
        mid = (lo + hi) / 2
        if _framed(c, n, mid, center, radius, half_fov):
            hi = mid
        else:
            lo = mid
    up = np.array([0.0, 1.0, 0.0])
    if np.linalg.norm(up - (up @ n) * n) < 1e-6:
        up = np.array([0.0, 0.0, 1.0])
    return look_at(c + hi * n, c, up, fov_deg, width, height)


@dataclass(eq=False)
class Observation:
    image: np.ndarray  # (H, W) or (H, W, 3), in [0, 1]
    depth: np.ndarray  # (H, W), camera Z, 0 on background
    silhouette: np.ndarray  # (H, W) bool


def render_observation(mesh: TriangleMesh, camera: CameraModel, color=False) -> Observation:
    """Headlight-shaded render: 0.3 ambient plus 0.7 Lambertian toward the camera."""
    w, h = camera.width, camera.height
    cam = camera.to_camera(mesh.vertices)
    depth, face = rasterize(cam, mesh.triangles, camera.K, w, h)
    sil = face >= 0
    shape = (h, w, 3) if color else (h, w)
    image = np.zeros(shape)
    if not sil.any():
        log.warning("mesh is not visible from the camera; image is empty")
        return Observation(image, depth, sil)

    normals = mesh.face_normals @ camera.pose.rotation.T
    vv, uu = np.nonzero(sil)
    fid = face[vv, uu]
    K = camera.K
    rays = np.stack([(uu + 0.5 - K[0, 2]) / K[0, 0], (vv + 0.5 - K[1, 2]) / K[1, 1], np.ones(len(uu))], axis=1)
    to_cam = -rays / np.linalg.norm(rays, axis=1, keepdims=True)
    lambert = np.maximum(0.0, np.einsum("ij,ij->i", normals[fid], to_cam))
    shade = np.minimum(1.0, AMBIENT + DIFFUSE * lambert)
    if color:
        if mesh.vertex_colors is not None:
            albedo = mesh.vertex_colors[mesh.triangles[fid]].mean(axis=1)
        else:
            albedo = np.ones((len(fid), 3))
        image[vv, uu] = np.minimum(1.0, albedo * shade[:, None])
    else:
        image[vv, uu] = shade
    return Observation(image, depth, sil)


# --------------------------------------------------------------------------
# image and depth files


class ImageFormatError(ValueError):
    pass


def write_pnm(image, path):
    """Binary PGM for (H, W) arrays, PPM for (H, W, 3); values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    magic = {2: b"P5", 3: b"P6"}.get(img.ndim)
    if magic is None or (img.ndim == 3 and img.shape[2] != 3):
        raise ImageFormatError(f"unsupported image shape {img.shape}")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pnm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        tokens.append(data[start:pos])
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported PNM type {magic!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ImageFormatError("only 8-bit PNM is supported")
    channels = 1 if magic == b"P5" else 3
    body = data[pos:]
    if len(body) != w * h * channels:
        raise ImageFormatError("PNM payload size does not match header")
    img = np.frombuffer(body, dtype=np.uint8).reshape((h, w, 3) if channels == 3 else (h, w))
    return img / 255.0


_FXDM = struct.Struct("<4sIII")


def write_depth(depth, path):
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    Path(path).write_bytes(_FXDM.pack(b"FXDM", 1, w, h) + depth.tobytes())


def read_depth(path):
    data = Path(path).read_bytes()
    if len(data) < _FXDM.size:
        raise ImageFormatError("truncated FXDM header")
    magic, version, w, h = _FXDM.unpack_from(data)
    if magic != b"FXDM" or version != 1:
        raise ImageFormatError("not an FXDM version 1 depth map")
    if len(data) != _FXDM.size + 4 * w * h:
        raise ImageFormatError("FXDM payload size does not match header")
    return np.frombuffer(data, dtype="<f4", offset=_FXDM.size).reshape(h, w).astype(np.float64)
