"""Synthetic fractures: subtract a perturbed primitive from a complete shape.

Everything happens in field space. The break shape is the interior of the
primitive, so the restoration is C * B and the fractured remainder is
C * (1 - B); meshes are extracted from the fields afterwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .algebra import (
    BreakSurfaceField,
    OccupancyField,
    box_signed,
    complement_field,
    compose_restoration_field,
    mesh_field,
    save_grid,
)
from .geometry import (
    EXTERIOR,
    FRACTURE,
    OccupancyGrid,
    RigidTransform,
    TriangleMesh,
    load_mesh,
    normalize_to_unit_cube,
    rotation_about_axis,
    save_mesh,
    surface_sample,
)
from .isosurface import extract_signed, marching_cubes, query_grid

log = logging.getLogger(__name__)

PRIMITIVE_KINDS = ("sphere", "box", "ellipsoid")
MIN_RESTORATION_FRACTION = 0.01
MAX_RESTORATION_FRACTION = 0.50
LABEL_BAND_CELLS = 1.5


class FractureRejected(ValueError):
    pass


# --------------------------------------------------------------------------
# smooth value noise


class ValueNoise:
    """Trilinear interpolation of a random lattice in [-1, 1], summed over octaves."""

    def __init__(self, seed, octaves=3, lattice=32):
        rng = np.random.default_rng(seed)
        self.tables = [rng.uniform(-1.0, 1.0, size=(lattice,) * 3) for _ in range(octaves)]
        self.weights = np.array([0.5 ** o for o in range(octaves)])
        self.weights /= self.weights.sum()
        self.lattice = lattice

    def __call__(self, p):
        p = np.asarray(p, dtype=np.float64)
        out = np.zeros(len(p))
        for octave, (table, w) in enumerate(zip(self.tables, self.weights)):
            out += w * _trilinear_periodic(table, p * 2.0 ** octave)
        return out


def _trilinear_periodic(table, p):
    n = table.shape[0]
    i0 = np.floor(p).astype(np.int64)
    f = p - i0
    out = np.zeros(len(p))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                v = table[(i0[:, 0] + dx) % n, (i0[:, 1] + dy) % n, (i0[:, 2] + dz) % n]
                out += wx * wy * wz * v
    return out


# --------------------------------------------------------------------------
# primitives and complete shapes


@dataclass
class Primitive:
    """Primitive in local coordinates, placed in the world by ``pose``.

    ``size`` is a radius (sphere), half extents (box) or semi-axes (ellipsoid).
    The perturbed signed function is s(x) + amplitude * noise(frequency * x).
    """

    kind: str
    pose: RigidTransform
    size: np.ndarray
    amplitude: float = 0.0
    frequency: float = 8.0
    noise_seed: int = 0

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.size = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,)).copy()
        if (self.size <= 0).any():
            raise ValueError("primitive size must be positive")
        if self.amplitude < 0:
            raise ValueError("perturbation amplitude must be non-negative")
        if not self.frequency > 0:
            raise ValueError("perturbation frequency must be positive")
        self._inverse = self.pose.inverse()
        self._noise = ValueNoise(self.noise_seed)

    def base_signed(self, p):
        q = self._inverse.apply(p)
        if self.kind == "sphere":
            d = np.linalg.norm(q, axis=1) - self.size[0]
        elif self.kind == "box":
            d = box_signed(self.size)(q)
        else:
            # scaled-radius bound; exact sign, approximate distance
            d = (np.linalg.norm(q / self.size, axis=1) - 1.0) * self.size.min()
        return d * self.pose.uniform_scale

    def signed(self, p):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        d = self.base_signed(p)
        if self.amplitude == 0.0:
            return d
        return d + self.amplitude * self._noise(self.frequency * p)

    def break_surface(self) -> BreakSurfaceField:
        # restoration side is the primitive interior
        return BreakSurfaceField(lambda p: -self.signed(p))

    def describe(self):
        return {
            "primitive.kind": self.kind,
            "primitive.pose": " ".join(repr(float(v)) for v in self.pose.matrix().ravel()),
            "primitive.size": " ".join(repr(float(v)) for v in self.size),
            "primitive.amplitude": repr(float(self.amplitude)),
            "primitive.frequency": repr(float(self.frequency)),
            "primitive.noise_seed": str(int(self.noise_seed)),
        }

    @classmethod
    def from_meta(cls, meta):
        pose = np.array([float(v) for v in meta["primitive.pose"].split()]).reshape(4, 4)
        return cls(
            meta["primitive.kind"],
            RigidTransform.from_matrix(pose),
            np.array([float(v) for v in meta["primitive.size"].split()]),
            float(meta["primitive.amplitude"]),
            float(meta["primitive.frequency"]),
            int(meta["primitive.noise_seed"]),
        )


def _analytic_signed(kind, params):
    c = np.asarray(params.get("center", (0.0, 0.0, 0.0)), dtype=np.float64)
    if kind == "sphere":
        r = params["radius"]
        return lambda p: np.linalg.norm(p - c, axis=1) - r
    if kind == "box":
        return box_signed(params["half_extents"], c)
    if kind == "ellipsoid":
        axes = np.asarray(params["axes"], dtype=np.float64)
        return lambda p: (np.linalg.norm((p - c) / axes, axis=1) - 1.0) * axes.min()
    if kind == "cylinder":
        r, h = params["radius"], params["half_height"]

        def cylinder(p):
            q = p - c
            d = np.stack([np.hypot(q[:, 0], q[:, 2]) - r, np.abs(q[:, 1]) - h], axis=1)
            return np.minimum(d.max(axis=1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=1)

        return cylinder
    if kind == "torus":
        big, small = params["major"], params["minor"]

        def torus(p):
            q = p - c
            return np.hypot(np.hypot(q[:, 0], q[:, 2]) - big, q[:, 1]) - small

        return torus
    raise ValueError(f"unknown complete shape kind {kind!r}")


@dataclass
class CompleteShape:
    field: OccupancyField
    mesh: Optional[TriangleMesh]
    description: dict

    @classmethod
    def analytic(cls, kind, **params):
        signed = _analytic_signed(kind, params)
        desc = {"complete.kind": kind}
        for key, value in params.items():
            desc[f"complete.{key}"] = " ".join(repr(float(v)) for v in np.ravel(value))
        return cls(OccupancyField.from_signed(signed), None, desc)

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh, normalize=True):
        if normalize:
            mesh, _ = normalize_to_unit_cube(mesh)
        return cls(mesh_field(mesh), mesh, {"complete.kind": "mesh"})

    @classmethod
    def from_meta(cls, meta, bundle_dir=None):
        kind = meta["complete.kind"]
        if kind == "mesh":
            return cls.from_mesh(load_mesh(Path(bundle_dir) / "complete.ply"), normalize=False)
        params = {}
        for key, value in meta.items():
            if key.startswith("complete.") and key != "complete.kind":
                nums = [float(v) for v in value.split()]
                params[key[len("complete."):]] = nums[0] if len(nums) == 1 else nums
        return cls.analytic(kind, **params)


DESK_SHAPES = (
    ("sphere", {"radius": 0.4}),
    ("box", {"half_extents": (0.35, 0.25, 0.3)}),
    ("ellipsoid", {"axes": (0.45, 0.3, 0.35)}),
    ("cylinder", {"radius": 0.3, "half_height": 0.4}),
    ("torus", {"major": 0.3, "minor": 0.15}),
)


def desk_shapes():
    return [CompleteShape.analytic(kind, **params) for kind, params in DESK_SHAPES]


# --------------------------------------------------------------------------
# tuples


@dataclass
class ShapeTuple:
    complete: OccupancyField
    fractured: OccupancyField
    restoration: OccupancyField
    break_surface: BreakSurfaceField
    complete_mesh: TriangleMesh
    fractured_mesh: TriangleMesh
    restoration_mesh: TriangleMesh
    break_mesh: Optional[TriangleMesh]
    primitive: Primitive
    grid_k: int
    seed: int = 0
    restoration_fraction: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def break_shape(self) -> OccupancyField:
        return self.break_surface.as_field()


def surface_distance(surface: BreakSurfaceField, p, h):
    """First-order distance to the zero set: |s| / |grad s|."""
    s = surface(p)
    grad = np.empty((len(p), 3))
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        grad[:, axis] = (surface(p + e) - surface(p - e)) / (2.0 * h)
    norm = np.linalg.norm(grad, axis=1)
    return np.abs(s) / np.maximum(norm, 1e-12)


def _mesh_from(field_: OccupancyField, k, grid=None):
    if field_.signed is not None:
        return extract_signed(field_.signed, k)
    return marching_cubes(grid if grid is not None else query_grid(field_, k))


def generate_fracture(complete: CompleteShape, primitive: Primitive, grid_k: int = 128, seed=0) -> ShapeTuple:
    fc = complete.field
    surface = primitive.break_surface()
    fb = surface.as_field()
    fr = compose_restoration_field(fc, fb)
    ff = compose_restoration_field(fc, complement_field(fb))

    grid_c = query_grid(fc, grid_k)
    grid_b = query_grid(fb, grid_k)
    n_complete = int((grid_c.values >= 0.5).sum())
    if n_complete == 0:
        raise FractureRejected("complete shape is empty at this resolution")
    n_restoration = int(((grid_c.values >= 0.5) & (grid_b.values >= 0.5)).sum())
    if n_restoration == 0:
        raise FractureRejected("primitive does not intersect the complete shape")
    fraction = n_restoration / n_complete
    if not MIN_RESTORATION_FRACTION <= fraction <= MAX_RESTORATION_FRACTION:
        raise FractureRejected(
            f"restoration fraction {fraction:.4f} outside "
            f"[{MIN_RESTORATION_FRACTION}, {MAX_RESTORATION_FRACTION}]"
        )

    complete_mesh = complete.mesh if complete.mesh is not None else _mesh_from(fc, grid_k, grid_c)
    restoration_mesh = _mesh_from(fr, grid_k)
    fractured_mesh = _mesh_from(ff, grid_k)
    if restoration_mesh is None or fractured_mesh is None:
        raise FractureRejected("fracture too thin to mesh at this resolution")

    cell = grid_c.cell_size
    centroids = fractured_mesh.vertices[fractured_mesh.triangles].mean(axis=1)
    near = surface_distance(surface, centroids, 0.25 * cell) <= LABEL_BAND_CELLS * cell
    fractured_mesh.face_labels = np.where(near, FRACTURE, EXTERIOR).astype(np.uint8)

    break_mesh = extract_signed(lambda p: -surface(p), grid_k, half_side=0.5, closed=False)

    meta = {"seed": str(seed), "k": str(grid_k), "restoration_fraction": repr(fraction)}
    meta.update(complete.description)
    meta.update(primitive.describe())
    return ShapeTuple(
        fc, ff, fr, surface, complete_mesh, fractured_mesh, restoration_mesh, break_mesh,
        primitive, grid_k, seed, fraction, meta,
    )


def random_primitive(complete: CompleteShape, rng, grid_k=64, max_amplitude=0.02) -> Primitive:
    """Primitive centered on a random point of the complete surface."""
    mesh = complete.mesh if complete.mesh is not None else _mesh_from(complete.field, grid_k)
    point, _ = surface_sample(mesh, 1, seed=int(rng.integers(2**31)))
    kind = PRIMITIVE_KINDS[int(rng.integers(len(PRIMITIVE_KINDS)))]
    axis = rng.normal(size=3)
    rotation = rotation_about_axis(axis, rng.uniform(0.0, 2.0 * np.pi))
    if kind == "sphere":
        size = np.full(3, rng.uniform(0.15, 0.3))
    else:
        size = rng.uniform(0.1, 0.3, size=3)
    return Primitive(
        kind,
        RigidTransform(rotation, point[0]),
        size,
        amplitude=float(rng.uniform(0.0, max_amplitude)),
        frequency=float(rng.uniform(4.0, 10.0)),
        noise_seed=int(rng.integers(2**31)),
    )


def random_fracture(complete: CompleteShape, seed: int, grid_k=64, max_attempts=32) -> ShapeTuple:
    rng = np.random.default_rng(seed)
    last = None
    for _ in range(max_attempts):
        primitive = random_primitive(complete, rng, grid_k)
        try:
            return generate_fracture(complete, primitive, grid_k, seed)
        except FractureRejected as exc:
            last = exc
    raise FractureRejected(f"no acceptable fracture after {max_attempts} attempts: {last}")


@dataclass
class TupleReport:
    npoints: int = 0
    restoration_violations: int = 0
    fractured_violations: int = 0
    partition_violations: int = 0
    restoration_fraction: float = float("nan")

    @property
    def total_violations(self):
        return self.restoration_violations + self.fractured_violations + self.partition_violations


def validate_tuple(tup: ShapeTuple, npoints: int, seed: int = 0) -> TupleReport:
    """Count violations of R = C and B, F = C and not B, F + R = C at random points."""
    if npoints <= 0:
        return TupleReport()
    rng = np.random.default_rng(seed)
    p = rng.uniform(-0.55, 0.55, size=(npoints, 3))
    c = tup.complete(p) >= 0.5
    b = tup.break_shape(p) >= 0.5
    r = tup.restoration(p) >= 0.5
    f = tup.fractured(p) >= 0.5
    n_c = int(c.sum())
    return TupleReport(
        npoints,
        int((r != (c & b)).sum()),
        int((f != (c & ~b)).sum()),
        int(((f & r) | ((f | r) != c)).sum()),
        float(r.sum() / n_c) if n_c else float("nan"),
    )


# --------------------------------------------------------------------------
# bundles on disk


def write_meta(meta: dict, path):
    lines = [f"{key}={value}" for key, value in meta.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_meta(path) -> dict:
    meta = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed meta line {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def save_tuple(tup: ShapeTuple, directory):
    d = Path(directory)
    (d / "grids").mkdir(parents=True, exist_ok=True)
    save_mesh(tup.complete_mesh, d / "complete.ply")
    save_mesh(tup.fractured_mesh, d / "fractured.ply")
    save_mesh(tup.restoration_mesh, d / "restoration.ply")
    for name, fld in (("complete", tup.complete), ("break", tup.break_shape),
                      ("restoration", tup.restoration), ("fractured", tup.fractured)):
        save_grid(query_grid(fld, tup.grid_k), d / "grids" / f"{name}.fxog")
    write_meta(tup.meta, d / "meta")


def load_tuple(directory) -> ShapeTuple:
    """Rebuild a tuple from its meta; fields are exact, meshes come from disk."""
    d = Path(directory)
    meta = read_meta(d / "meta")
    complete = CompleteShape.from_meta(meta, d)
    primitive = Primitive.from_meta(meta)
    surface = primitive.break_surface()
    fb = surface.as_field()
    fractured_mesh = load_mesh(d / "fractured.ply")
    return ShapeTuple(
        complete.field,
        compose_restoration_field(complete.field, complement_field(fb)),
        compose_restoration_field(complete.field, fb),
        surface,
        load_mesh(d / "complete.ply"),
        fractured_mesh,
        load_mesh(d / "restoration.ply"),
        None,
        primitive,
        int(meta["k"]),
        int(meta["seed"]),
        float(meta["restoration_fraction"]),
        meta,
    )
