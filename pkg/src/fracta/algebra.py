"""Occupancy fields and the restoration composition law.

A restoration is the part of the complete shape that lies on the restoration
side of the break surface. With continuous occupancies the logical AND is
relaxed to a product, which keeps the composition differentiable.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .geometry import OccupancyGrid, TriangleMesh, points_inside

PROVENANCES = ("analytic", "grid-interpolated", "neural")

# Break shapes are clipped to the open cube (-CLIP, CLIP)^3.
CLIP_HALF_SIDE = 0.5

OCCUPIED = 0.5


def _as_points(points):
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[None]
    return p.reshape(-1, 3)


class OccupancyField:
    """Evaluatable map from 3D points to occupancy in [0, 1].

    ``signed`` is an optional companion function that is negative exactly
    where the occupancy is 1. Fields that carry one can be meshed from a
    smooth level set instead of a staircase.
    """

    def __init__(self, fn: Callable, provenance="analytic", signed: Optional[Callable] = None):
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        self._fn = fn
        self.provenance = provenance
        self.signed = signed

    def __call__(self, points):
        p = _as_points(points)
        out = np.asarray(self._fn(p), dtype=np.float64).reshape(len(p))
        if out.size and (np.isnan(out).any() or out.min() < 0.0 or out.max() > 1.0):
            raise ValueError("occupancy field produced values outside [0, 1]")
        return out

    @classmethod
    def from_signed(cls, signed: Callable, provenance="analytic"):
        return cls(lambda p: (signed(p) < 0).astype(np.float64), provenance, signed)


def sphere_field(radius, center=(0.0, 0.0, 0.0)):
    c = np.asarray(center, dtype=np.float64)
    return OccupancyField.from_signed(lambda p: np.linalg.norm(p - c, axis=1) - radius)


def box_signed(half_extents, center=(0.0, 0.0, 0.0)):
    h = np.asarray(half_extents, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)

    def signed(p):
        q = np.abs(p - c) - h
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    return signed


def box_field(half_extents, center=(0.0, 0.0, 0.0)):
    return OccupancyField.from_signed(box_signed(half_extents, center))


def constant_field(value):
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError("constant occupancy must lie in [0, 1]")
    return OccupancyField(lambda p: np.full(len(p), value))


def halfspace_field(normal, offset=0.0):
    """Occupied where normal . x > offset."""
    n = np.asarray(normal, dtype=np.float64)
    return OccupancyField.from_signed(lambda p: offset - p @ n)


def mesh_field(mesh: TriangleMesh, seed=0):
    """Exact ray-parity occupancy of a watertight mesh."""
    return OccupancyField(lambda p: points_inside(mesh, p, seed=seed).astype(np.float64))


def grid_field(grid: OccupancyGrid):
    """Trilinear interpolation of cell-centered grid values, 0 outside the grid."""
    k, lo, h = grid.k, grid.origin, grid.cell_size
    vals = grid.values

    def fn(p):
        u = (p - lo) / h - 0.5
        i0 = np.floor(u).astype(np.int64)
        f = u - i0
        out = np.zeros(len(p))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    ix, iy, iz = i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                    ok = (ix >= 0) & (ix < k) & (iy >= 0) & (iy < k) & (iz >= 0) & (iz < k)
                    w = (
                        (f[:, 0] if dx else 1 - f[:, 0])
                        * (f[:, 1] if dy else 1 - f[:, 1])
                        * (f[:, 2] if dz else 1 - f[:, 2])
                    )
                    out[ok] += w[ok] * vals[ix[ok], iy[ok], iz[ok]]
        return np.clip(out, 0.0, 1.0)

    return OccupancyField(fn, "grid-interpolated")


def cube_signed(p, half_side=CLIP_HALF_SIDE):
    return np.abs(p).max(axis=1) - half_side


class BreakSurfaceField:
    """Oriented break surface s(x); s > 0 on the restoration side.

    The break shape is the restoration side clipped to the unit cube.
    """

    def __init__(self, surface: Callable, clip_half_side=CLIP_HALF_SIDE):
        self.surface = surface
        self.clip_half_side = clip_half_side

    def __call__(self, points):
        return np.asarray(self.surface(_as_points(points)), dtype=np.float64)

    def occupancy(self, points):
        p = _as_points(points)
        inside_clip = np.abs(p).max(axis=1) < self.clip_half_side
        return ((self(p) > 0) & inside_clip).astype(np.float64)

    def signed(self, points):
        p = _as_points(points)
        return np.maximum(-self(p), cube_signed(p, self.clip_half_side))

    def as_field(self) -> OccupancyField:
        return OccupancyField(self.occupancy, "analytic", self.signed)


def break_occupancy(surface: BreakSurfaceField, point) -> float:
    return float(surface.occupancy(point)[0])


def _check_unit(name, v):
    if np.isnan(v).any() or (v.size and (v.min() < 0.0 or v.max() > 1.0)):
        raise ValueError(f"{name} must lie in [0, 1]")


def tnorm_restoration(occ_complete, occ_break):
    """Product T-norm: restoration occupancy from complete and break occupancies."""
    c = np.asarray(occ_complete, dtype=np.float64)
    b = np.asarray(occ_break, dtype=np.float64)
    _check_unit("complete occupancy", c)
    _check_unit("break occupancy", b)
    out = c * b
    return float(out) if out.ndim == 0 else out


def compose_restoration_field(field_complete: OccupancyField, field_break: OccupancyField):
    def fn(p):
        return tnorm_restoration(field_complete(p), field_break(p))

    signed = None
    if field_complete.signed is not None and field_break.signed is not None:
        def signed(p):
            return np.maximum(field_complete.signed(p), field_break.signed(p))

    provenance = "neural" if "neural" in (field_complete.provenance, field_break.provenance) else (
        "analytic" if field_complete.provenance == field_break.provenance == "analytic"
        else "grid-interpolated"
    )
    return OccupancyField(fn, provenance, signed)


def complement_field(field: OccupancyField):
    signed = None
    if field.signed is not None:
        def signed(p):
            # occupied where the original is not; the zero set itself stays empty
            s = field.signed(p)
            return np.where(s == 0, 0.0, -s)
    return OccupancyField(lambda p: 1.0 - field(p), field.provenance, signed)


def hard_intersection(grid_complete: OccupancyGrid, grid_break: OccupancyGrid) -> OccupancyGrid:
    if not grid_complete.same_layout(grid_break):
        raise ValueError("grids differ in resolution, origin or cell size")
    vals = (grid_complete.values >= OCCUPIED) & (grid_break.values >= OCCUPIED)
    return OccupancyGrid(grid_complete.k, grid_complete.origin, grid_complete.cell_size,
                         vals.astype(np.float64))


# --------------------------------------------------------------------------
# FXOG grid files

_FXOG_MAGIC = b"FXOG"
_FXOG_VERSION = 1
_FXOG_HEADER = struct.Struct("<4sII3ff")


class GridFormatError(ValueError):
    pass


def grid_to_bytes(grid: OccupancyGrid) -> bytes:
    head = _FXOG_HEADER.pack(_FXOG_MAGIC, _FXOG_VERSION, grid.k, *grid.origin, grid.cell_size)
    return head + grid.flat_values().astype("<f4").tobytes()


def grid_from_bytes(data: bytes) -> OccupancyGrid:
    if len(data) < _FXOG_HEADER.size:
        raise GridFormatError("truncated FXOG header")
    magic, version, k, ox, oy, oz, cell = _FXOG_HEADER.unpack_from(data)
    if magic != _FXOG_MAGIC:
        raise GridFormatError("bad FXOG magic")
    if version != _FXOG_VERSION:
        raise GridFormatError(f"unsupported FXOG version {version}")
    expected = _FXOG_HEADER.size + 4 * k ** 3
    if len(data) != expected:
        raise GridFormatError(f"FXOG payload is {len(data)} bytes, expected {expected}")
    vals = np.frombuffer(data, dtype="<f4", offset=_FXOG_HEADER.size).astype(np.float64)
    # the header stores f32; snap back to the standard query cube when it matches
    cube = OccupancyGrid.cube(k)
    if np.array_equal(cube.origin.astype(np.float32), np.float32([ox, oy, oz])) and \
            np.float32(cube.cell_size) == np.float32(cell):
        return OccupancyGrid(k, cube.origin, cube.cell_size, vals)
    return OccupancyGrid(k, (ox, oy, oz), float(np.float32(cell)), vals)


def save_grid(grid: OccupancyGrid, path):
    Path(path).write_bytes(grid_to_bytes(grid))


def load_grid(path) -> OccupancyGrid:
    return grid_from_bytes(Path(path).read_bytes())
