"""Triangle meshes, rigid transforms, occupancy grids and point-in-mesh tests.

All geometry is float64 in memory. Mesh files carry float32 payloads, so a
mesh that came from disk survives a save/load cycle bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

EXTERIOR = 0
FRACTURE = 1

# Cube used for voxelization, grid queries and uniform sampling.
QUERY_HALF_SIDE = 0.55

_DEGENERATE_AREA2 = 1e-30


class MeshError(ValueError):
    pass


class ParseError(MeshError):
    """Malformed mesh file. ``offset`` is the byte offset of the bad record."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NotWatertightError(MeshError):
    pass


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_normals: Optional[np.ndarray] = None
    vertex_colors: Optional[np.ndarray] = None
    face_labels: Optional[np.ndarray] = None
    dropped_faces: int = field(default=0, init=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        nv = len(self.vertices)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= nv):
            raise MeshError(f"triangle index out of range for {nv} vertices")
        if self.vertex_normals is not None:
            n = np.asarray(self.vertex_normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != nv:
                raise MeshError("vertex_normals length does not match vertices")
            norms = np.linalg.norm(n, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise MeshError("vertex normals must be unit length")
            self.vertex_normals = n
        if self.vertex_colors is not None:
            c = np.asarray(self.vertex_colors, dtype=np.float64).reshape(-1, 3)
            if len(c) != nv:
                raise MeshError("vertex_colors length does not match vertices")
            if c.size and (c.min() < 0.0 or c.max() > 1.0):
                raise MeshError("vertex colors must lie in [0, 1]")
            self.vertex_colors = c
        if self.face_labels is not None:
            lab = np.asarray(self.face_labels, dtype=np.uint8).reshape(-1)
            if len(lab) != len(self.triangles):
                raise MeshError("face_labels length does not match triangles")
            if lab.size and lab.max() > FRACTURE:
                raise MeshError("face labels must be EXTERIOR (0) or FRACTURE (1)")
            self.face_labels = lab

        keep = self._nondegenerate()
        if not keep.all():
            self.dropped_faces = int((~keep).sum())
            log.warning("dropped %d degenerate triangles", self.dropped_faces)
            self.triangles = self.triangles[keep]
            if self.face_labels is not None:
                self.face_labels = self.face_labels[keep]
        self._watertight = None

    def _nondegenerate(self):
        if not len(self.triangles):
            return np.ones(0, dtype=bool)
        t = self.triangles
        distinct = (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
        cross = self._face_cross()
        return distinct & (np.einsum("ij,ij->i", cross, cross) > _DEGENERATE_AREA2)

    def _face_cross(self):
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    @property
    def face_areas(self):
        return 0.5 * np.linalg.norm(self._face_cross(), axis=1)

    @property
    def face_normals(self):
        cross = self._face_cross()
        return cross / np.linalg.norm(cross, axis=1, keepdims=True)

    @property
    def area(self):
        return float(self.face_areas.sum())

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def volume(self):
        """Signed enclosed volume (positive for outward-facing triangles)."""
        v = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def euler_characteristic(self):
        edges = _undirected_edges(self.triangles)
        used = np.unique(self.triangles)
        return len(used) - len(edges) + len(self.triangles)

    def transformed(self, transform: "RigidTransform") -> "TriangleMesh":
        normals = None
        if self.vertex_normals is not None:
            normals = self.vertex_normals @ transform.rotation.T
        return TriangleMesh(
            transform.apply(self.vertices), self.triangles.copy(), normals,
            self.vertex_colors, self.face_labels,
        )

    def flipped(self) -> "TriangleMesh":
        normals = None if self.vertex_normals is None else -self.vertex_normals
        return TriangleMesh(
            self.vertices.copy(), self.triangles[:, ::-1].copy(), normals,
            self.vertex_colors, self.face_labels,
        )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> uniform_scale * rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    uniform_scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if not self.uniform_scale > 0:
            raise ValueError("uniform_scale must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "uniform_scale", float(self.uniform_scale))

    @classmethod
    def from_matrix(cls, m, atol=1e-9):
        """Build from a 4x4 homogeneous matrix whose linear block is s*R."""
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        a = m[:3, :3]
        s = np.cbrt(np.linalg.det(a))
        if not s > 0:
            raise ValueError("matrix has non-positive determinant")
        r = a / s
        if not np.allclose(r.T @ r, np.eye(3), atol=atol, rtol=0):
            raise ValueError("linear block is not a scaled rotation")
        # re-orthonormalize so the stricter constructor check holds for f32 input
        u, _, vt = np.linalg.svd(r)
        return cls(u @ vt, m[:3, 3], s)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.uniform_scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return self.uniform_scale * points @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        s = 1.0 / self.uniform_scale
        return RigidTransform(rt, -s * (rt @ self.translation), s)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.apply(other.translation),
            self.uniform_scale * other.uniform_scale,
        )


def rotation_about_axis(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


@dataclass(eq=False)
class OccupancyGrid:
    """k^3 cell-centered samples of an occupancy field.

    ``values[ix, iy, iz]`` is the value at ``origin + (i + 0.5) * cell_size``;
    ``origin`` is the minimum corner of the sampled cube.
    """

    k: int
    origin: np.ndarray
    cell_size: float
    values: np.ndarray

    def __post_init__(self):
        self.k = int(self.k)
        if self.k < 2:
            raise ValueError("grid resolution must be at least 2")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.cell_size = float(self.cell_size)
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v.reshape((self.k,) * 3, order="F")
        if v.shape != (self.k,) * 3:
            raise ValueError(f"expected {self.k}^3 values, got shape {v.shape}")
        if v.size and (np.isnan(v).any() or v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("occupancy values must lie in [0, 1]")
        self.values = v

    @classmethod
    def cube(cls, k, values=None, half_side=QUERY_HALF_SIDE):
        cell = 2.0 * half_side / k
        if values is None:
            values = np.zeros((k,) * 3)
        return cls(k, np.full(3, -half_side), cell, values)

    def centers(self):
        """Cell centers as (k^3, 3), x-fastest."""
        return grid_centers(self.k, self.origin, self.cell_size)

    def flat_values(self):
        return self.values.reshape(-1, order="F")

    def same_layout(self, other: "OccupancyGrid"):
        return (
            self.k == other.k
            and np.array_equal(self.origin, other.origin)
            and self.cell_size == other.cell_size
        )

    def occupied(self, threshold=0.5):
        return self.values >= threshold

    def occupied_fraction(self, threshold=0.5):
        return float(self.occupied(threshold).mean())


def grid_centers(k, origin, cell_size):
    axis = (np.arange(k) + 0.5) * cell_size
    gz, gy, gx = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    return pts + np.asarray(origin, dtype=np.float64)


# --------------------------------------------------------------------------
# normalization, topology, occupancy


def normalize_to_unit_cube(mesh: TriangleMesh):
    if len(mesh.vertices) == 0:
        raise MeshError("cannot normalize an empty mesh")
    lo, hi = mesh.bounds()
    extent = float((hi - lo).max())
    if extent <= 0:
        raise MeshError("mesh has zero extent")
    s = 1.0 / extent
    center = 0.5 * (lo + hi)
    transform = RigidTransform(np.eye(3), -s * center, s)
    return mesh.transformed(transform), transform


def _undirected_edges(triangles):
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    return np.unique(np.sort(e, axis=1), axis=0)


@dataclass
class WatertightReport:
    watertight: bool
    boundary_edges: np.ndarray
    nonmanifold_edges: np.ndarray
    inconsistent_edges: np.ndarray

    def __bool__(self):
        return self.watertight

    @property
    def open_edge_count(self):
        return len(self.boundary_edges) + len(self.nonmanifold_edges) + len(self.inconsistent_edges)

    def describe(self):
        return (
            f"{len(self.boundary_edges)} boundary, {len(self.nonmanifold_edges)} non-manifold, "
            f"{len(self.inconsistent_edges)} inconsistently wound edges"
        )


def is_watertight(mesh: TriangleMesh) -> WatertightReport:
    t = mesh.triangles
    empty = np.zeros((0, 2), dtype=np.int64)
    if not len(t):
        return WatertightReport(False, empty, empty, empty)
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    edges, inverse, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    boundary = edges[counts == 1]
    nonmanifold = edges[counts > 2]
    # on a consistently wound 2-manifold each shared edge appears once per direction
    forward = (directed[:, 0] < directed[:, 1]).astype(np.int64)
    n_forward = np.bincount(inverse, weights=forward, minlength=len(edges))
    bad = (counts == 2) & (n_forward != 1)
    inconsistent = edges[bad]
    ok = not (len(boundary) or len(nonmanifold) or len(inconsistent))
    return WatertightReport(ok, boundary, nonmanifold, inconsistent)


def _check_watertight(mesh: TriangleMesh):
    if mesh._watertight is None:
        mesh._watertight = is_watertight(mesh)
    report = mesh._watertight
    if not report:
        raise NotWatertightError(
            f"occupancy needs a watertight mesh; found {report.open_edge_count} open edges "
            f"({report.describe()})"
        )


def points_inside(mesh: TriangleMesh, points, seed=0, max_retries=8, chunk_pairs=4_000_000):
    """Ray-crossing parity occupancy for many points.

    Returns a uint8 array: 1 strictly inside, 0 outside or on the surface.
    Rays that graze a triangle edge or vertex are recast in a fresh random
    direction, at most ``max_retries`` times.
    """
    _check_watertight(mesh)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(points).all():
        raise ValueError("points must be finite")
    out = np.zeros(len(points), dtype=np.uint8)
    if not len(points) or mesh.is_empty:
        return out

    v = mesh.vertices[mesh.triangles]
    v0, e1, e2 = v[:, 0], v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]
    normal = np.cross(e1, e2)
    lo, hi = mesh.bounds()
    tol = 1e-10 * max(1.0, float(np.abs(np.concatenate([lo, hi])).max()))
    rng = np.random.default_rng(seed)

    # nothing outside the bounding box can be enclosed
    in_box = np.all((points >= lo - tol) & (points <= hi + tol), axis=1)
    pending = np.flatnonzero(in_box)
    for _attempt in range(max_retries + 1):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        h = np.cross(d, e2)
        a = np.einsum("ij,ij->i", e1, h)
        g = np.cross(e1, d)
        # triangles parallel to the ray never count as crossings
        usable = np.abs(a) > 1e-14
        inv_a = np.where(usable, 1.0 / np.where(usable, a, 1.0), 0.0)
        hs, gs, ns = h * inv_a[:, None], g * inv_a[:, None], -normal * inv_a[:, None]
        off_u = np.einsum("ij,ij->i", v0, hs)
        off_v = np.einsum("ij,ij->i", v0, gs)
        off_t = np.einsum("ij,ij->i", v0, ns)

        ambiguous = []
        step = max(1, chunk_pairs // len(v0))
        for start in range(0, len(pending), step):
            idx = pending[start:start + step]
            p = points[idx]
            u = p @ hs.T - off_u
            w = p @ gs.T - off_v
            t = p @ ns.T - off_t
            r = 1.0 - u - w
            inside_tri = (u >= -tol) & (w >= -tol) & (r >= -tol)
            inside_tri &= usable
            on_surface = (inside_tri & (np.abs(t) <= tol)).any(axis=1)
            edge = np.minimum(np.minimum(u, w), r)
            grazing = (inside_tri & (t > tol) & (edge <= tol)).any(axis=1) & ~on_surface
            hits = (inside_tri & (t > tol)).sum(axis=1)
            out[idx] = np.where(on_surface, 0, hits % 2).astype(np.uint8)
            ambiguous.append(idx[grazing])
        pending = np.concatenate(ambiguous) if ambiguous else pending[:0]
        if not len(pending):
            break
    if len(pending):
        log.warning("%d points still grazing after %d retries", len(pending), max_retries)
    return out


def point_occupancy(mesh: TriangleMesh, point, seed=0) -> int:
    return int(points_inside(mesh, np.asarray(point, dtype=np.float64)[None], seed)[0])


def voxelize(mesh: TriangleMesh, k: int, seed=0) -> OccupancyGrid:
    lo, hi = mesh.bounds() if len(mesh.vertices) else (np.zeros(3), np.zeros(3))
    if lo.min() < -QUERY_HALF_SIDE or hi.max() > QUERY_HALF_SIDE:
        raise MeshError("mesh must lie inside [-0.55, 0.55]^3 to be voxelized")
    grid = OccupancyGrid.cube(k)
    occ = points_inside(mesh, grid.centers(), seed=seed)
    grid.values = occ.astype(np.float64).reshape((k,) * 3, order="F")
    return grid


def surface_sample(mesh: TriangleMesh, count: int, seed: int, return_faces=False):
    """Area-uniform surface samples with the owning triangle's normal."""
    if count <= 0:
        raise ValueError("count must be positive")
    if mesh.is_empty:
        raise MeshError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas
    faces = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = mesh.vertices[mesh.triangles[faces]]
    pts = (
        (1.0 - r1)[:, None] * tri[:, 0]
        + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
        + (r1 * r2)[:, None] * tri[:, 2]
    )
    normals = mesh.face_normals[faces]
    if return_faces:
        return pts, normals, faces
    return pts, normals


# --------------------------------------------------------------------------
# analytic test shapes


def box_mesh(lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5)) -> TriangleMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=float)
    verts = lo + corners * (hi - lo)
    # outward-facing, two triangles per side
    quads = [
        (0, 2, 3, 1), (4, 5, 7, 6),  # z-, z+
        (0, 1, 5, 4), (2, 6, 7, 3),  # y-, y+
        (0, 4, 6, 2), (1, 3, 7, 5),  # x-, x+
    ]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(verts, np.array(tris))


def icosphere(subdivisions=3, radius=1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Subdivided icosahedron; 20 * 4**subdivisions faces."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, float)
    return TriangleMesh(v, np.array(faces))


def cylinder_mesh(radius=0.3, half_height=0.4, segments=64) -> TriangleMesh:
    """Closed prism around the y axis with a regular polygon cross-section."""
    a = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(a), np.zeros(segments), radius * np.sin(a)], axis=1)
    bottom, top = ring - [0, half_height, 0], ring + [0, half_height, 0]
    verts = np.concatenate([bottom, top, [[0, -half_height, 0], [0, half_height, 0]]])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [(i, segments + i, segments + j), (i, segments + j, j)]
        tris += [(cb, i, j), (ct, segments + j, segments + i)]
    return TriangleMesh(verts, np.array(tris))


# --------------------------------------------------------------------------
# file I/O


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if data.startswith(b"OFF"):
        return _parse_off(data)
    if data.startswith(b"ply"):
        return _parse_ply(data)
    raise ParseError("unrecognized mesh header", 0)


def save_mesh(mesh: TriangleMesh, path):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".off":
        path.write_bytes(_format_off(mesh))
    elif suffix == ".ply":
        path.write_bytes(_format_ply(mesh))
    else:
        raise ValueError(f"unsupported mesh extension {suffix!r}")


def _parse_off(data: bytes) -> TriangleMesh:
    # token stream with byte offsets, comments stripped
    tokens = []
    pos = 0
    for line in data.splitlines(keepends=True):
        body = line.split(b"#", 1)[0]
        col = 0
        for tok in body.split():
            col = body.index(tok, col)
            tokens.append((tok, pos + col))
            col += len(tok)
        pos += len(line)
    if not tokens or tokens[0][0] != b"OFF":
        raise ParseError("missing OFF header", 0)
    try:
        nv, nf = int(tokens[1][0]), int(tokens[2][0])
    except (IndexError, ValueError):
        raise ParseError("malformed OFF counts line", tokens[1][1] if len(tokens) > 1 else len(data))
    i = 4
    if len(tokens) < i + 3 * nv:
        raise ParseError("truncated OFF vertex block", len(data))
    try:
        verts = np.array([float(t) for t, _ in tokens[i:i + 3 * nv]], dtype=np.float32)
    except ValueError:
        raise ParseError("non-numeric OFF vertex coordinate", tokens[i][1])
    i += 3 * nv
    faces = []
    for f in range(nf):
        if i >= len(tokens):
            raise ParseError(f"truncated OFF face {f}", len(data))
        tok, off = tokens[i]
        if tok != b"3":
            raise ParseError(f"face {f} is not a triangle", off)
        try:
            idx = [int(t) for t, _ in tokens[i + 1:i + 4]]
        except ValueError:
            raise ParseError(f"non-integer index in face {f}", off)
        if len(idx) != 3:
            raise ParseError(f"truncated OFF face {f}", off)
        if min(idx) < 0 or max(idx) >= nv:
            raise ParseError(f"face {f} index out of range for {nv} vertices", off)
        faces.append(idx)
        i += 4
    return TriangleMesh(verts.astype(np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _format_off(mesh: TriangleMesh) -> bytes:
    lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.triangles)} 0"]
    for x, y, z in mesh.vertices.astype(np.float32):
        lines.append("%.9g %.9g %.9g" % (x, y, z))
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}")
    return ("\n".join(lines) + "\n").encode()


_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "uchar": "u1", "uint8": "u1",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}


def _parse_ply(data: bytes) -> TriangleMesh:
    end = data.find(b"end_header\n")
    if end < 0:
        raise ParseError("PLY header has no end_header", 0)
    body_start = end + len(b"end_header\n")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    if header[0].strip() != "ply":
        raise ParseError("missing ply magic", 0)
    elements = []
    fmt = None
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = (parts[1], parts[2])
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before element", 0)
            elements[-1][2].append(parts[1:])
        else:
            raise ParseError(f"unexpected header line {line!r}", data.find(line.encode()))
    if fmt != ("binary_little_endian", "1.0"):
        raise ParseError(f"unsupported PLY format {fmt}; need binary_little_endian 1.0", 0)
    names = [e[0] for e in elements]
    if names != ["vertex", "face"]:
        raise ParseError(f"unsupported PLY element layout {names}", 0)

    _, nv, vprops = elements[0]
    vnames = [p[-1] for p in vprops]
    allowed = [["x", "y", "z"], ["x", "y", "z", "nx", "ny", "nz"],
               ["x", "y", "z", "red", "green", "blue"],
               ["x", "y", "z", "nx", "ny", "nz", "red", "green", "blue"]]
    if vnames not in allowed:
        raise ParseError(f"unsupported vertex properties {vnames}", 0)
    for p in vprops:
        expect = "uchar" if p[-1] in ("red", "green", "blue") else "float"
        if p[0] == "list" or _PLY_TYPES.get(p[0]) != _PLY_TYPES[expect]:
            raise ParseError(f"unsupported type for vertex property {p[-1]}", 0)
    vdtype = np.dtype([(p[-1], _PLY_TYPES[p[0]]) for p in vprops])

    _, nf, fprops = elements[1]
    if not fprops or fprops[0][0] != "list" or fprops[0][-1] not in ("vertex_indices", "vertex_index"):
        raise ParseError("face element must start with a vertex index list", 0)
    if _PLY_TYPES.get(fprops[0][1]) != "u1" or _PLY_TYPES.get(fprops[0][2]) != "<i4":
        raise ParseError("face list must be uchar count + int32 indices", 0)
    extra = [p for p in fprops[1:]]
    if extra and not (len(extra) == 1 and extra[0] == ["uchar", "label"]):
        raise ParseError(f"unsupported face properties {extra}", 0)
    has_label = bool(extra)

    vbytes = vdtype.itemsize * nv
    if len(data) < body_start + vbytes:
        raise ParseError("truncated vertex block", len(data))
    vrec = np.frombuffer(data, dtype=vdtype, count=nv, offset=body_start)
    fdtype = [("n", "u1"), ("idx", "<i4", (3,))] + ([("label", "u1")] if has_label else [])
    fdtype = np.dtype(fdtype)
    fstart = body_start + vbytes
    if len(data) < fstart + fdtype.itemsize * nf:
        raise ParseError("truncated face block", len(data))
    frec = np.frombuffer(data, dtype=fdtype, count=nf, offset=fstart)
    bad = np.flatnonzero(frec["n"] != 3)
    if len(bad):
        raise ParseError(f"face {bad[0]} is not a triangle", fstart + bad[0] * fdtype.itemsize)
    idx = frec["idx"].astype(np.int64)
    bad = np.flatnonzero((idx < 0).any(axis=1) | (idx >= nv).any(axis=1))
    if len(bad):
        raise ParseError(
            f"face {bad[0]} index out of range for {nv} vertices",
            fstart + bad[0] * fdtype.itemsize,
        )
    trailing = len(data) - fstart - fdtype.itemsize * nf
    if trailing:
        raise ParseError(f"{trailing} trailing bytes after face block", fstart + fdtype.itemsize * nf)

    verts = np.stack([vrec["x"], vrec["y"], vrec["z"]], axis=1).astype(np.float64)
    normals = colors = None
    if "nx" in vnames:
        normals = np.stack([vrec["nx"], vrec["ny"], vrec["nz"]], axis=1).astype(np.float64)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            # float32 payloads carry ~1e-7 error; renormalize anything slightly off
            normals = normals / np.where(norms > 0, norms, 1.0)
    if "red" in vnames:
        colors = np.stack([vrec["red"], vrec["green"], vrec["blue"]], axis=1) / 255.0
    labels = frec["label"].copy() if has_label else None
    return TriangleMesh(verts, idx, normals, colors, labels)


def _format_ply(mesh: TriangleMesh) -> bytes:
    nv, nf = len(mesh.vertices), len(mesh.triangles)
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {nv}",
            "property float x", "property float y", "property float z"]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if mesh.vertex_normals is not None:
        head += ["property float nx", "property float ny", "property float nz"]
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if mesh.vertex_colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    head += [f"element face {nf}", "property list uchar int vertex_indices"]
    if mesh.face_labels is not None:
        head.append("property uchar label")
    head.append("end_header")

    vrec = np.zeros(nv, dtype=np.dtype(fields))
    for axis, name in enumerate("xyz"):
        vrec[name] = mesh.vertices[:, axis]
    if mesh.vertex_normals is not None:
        for axis, name in enumerate(("nx", "ny", "nz")):
            vrec[name] = mesh.vertex_normals[:, axis]
    if mesh.vertex_colors is not None:
        rgb = np.rint(mesh.vertex_colors * 255.0).astype(np.uint8)
        for axis, name in enumerate(("red", "green", "blue")):
            vrec[name] = rgb[:, axis]
    fdtype = [("n", "u1"), ("idx", "<i4", (3,))]
    if mesh.face_labels is not None:
        fdtype.append(("label", "u1"))
    frec = np.zeros(nf, dtype=np.dtype(fdtype))
    frec["n"] = 3
    frec["idx"] = mesh.triangles
    if mesh.face_labels is not None:
        frec["label"] = mesh.face_labels
    return ("\n".join(head) + "\n").encode("ascii") + vrec.tobytes() + frec.tobytes()
