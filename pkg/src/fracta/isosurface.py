"""Dense field queries and 0.5-level surface extraction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from skimage.measure import marching_cubes as _skimage_mc

from .algebra import OCCUPIED, OccupancyField
from .geometry import QUERY_HALF_SIDE, OccupancyGrid, TriangleMesh, grid_centers

DEFAULT_K = 128
VISUALIZATION_K = 256


@dataclass
class ExtractionResult:
    mesh: Optional[TriangleMesh]
    nonzero: bool
    grid: OccupancyGrid


def query_grid(field: OccupancyField, k: int = DEFAULT_K, chunk=262_144) -> OccupancyGrid:
    """Evaluate ``field`` at the k^3 cell centers of the 1.1-side cube."""
    if k < 2:
        raise ValueError("k must be at least 2")
    grid = OccupancyGrid.cube(k)
    pts = grid.centers()
    vals = np.empty(len(pts))
    for start in range(0, len(pts), chunk):
        vals[start:start + chunk] = field(pts[start:start + chunk])
    grid.values = vals.reshape((k,) * 3, order="F")
    return grid


def _extract(values, origin, cell_size, level, pad_value=None):
    """Marching cubes on cell-centered ``values[ix, iy, iz]``; high values are inside.

    With ``pad_value`` set, a one-cell border of that value closes surfaces
    that reach the grid boundary.
    """
    values = np.asarray(values, dtype=np.float64)
    first_center = np.asarray(origin, dtype=np.float64) + 0.5 * cell_size
    if pad_value is not None:
        values = np.pad(values, 1, constant_values=pad_value)
        first_center = first_center - cell_size
    lo, hi = values.min(), values.max()
    if not (lo < level < hi):
        return None
    verts, faces, _, _ = _skimage_mc(
        values, level, spacing=(cell_size,) * 3,
        gradient_direction="ascent", allow_degenerate=False,
    )
    if not len(faces):
        return None
    return TriangleMesh(verts + first_center, faces)


def marching_cubes(grid: OccupancyGrid, level: float = OCCUPIED) -> Optional[TriangleMesh]:
    """Closed surface around the cells with value >= ``level``, or None if there are none.

    Triangles face outward. The grid is padded with empty cells so the
    output stays closed even where the shape reaches the grid boundary.
    """
    if not 0.0 < level <= 1.0:
        raise ValueError("level must lie in (0, 1]")
    # marching cubes runs in float32 and its face-saddle test is ambiguous when a
    # saddle lands exactly on the level (binary grids), which yields non-manifold
    # edges; cut one float32 step below the level with outside values kept below it
    lvl = np.float32(level)
    cut = np.nextafter(lvl, np.float32(0))
    inside = grid.values >= level  # ties count as occupied
    vals = np.where(inside, np.maximum(grid.values, lvl), np.minimum(grid.values, np.nextafter(cut, np.float32(0))))
    return _extract(vals, grid.origin, grid.cell_size, float(cut), pad_value=0.0)


def extract_signed(signed, k=DEFAULT_K, half_side=QUERY_HALF_SIDE, closed=True):
    """Mesh the zero set of a signed function (negative inside) over a cube."""
    cell = 2.0 * half_side / k
    origin = np.full(3, -half_side)
    pts = grid_centers(k, origin, cell)
    vals = -np.asarray(signed(pts), dtype=np.float64).reshape((k,) * 3, order="F")
    pad = -np.abs(vals).max() - cell if closed else None
    if not closed:
        return _extract(vals, origin, cell, 0.0)
    return _extract(vals, origin, cell, 0.0, pad_value=pad)


def extract(field: OccupancyField, k: int = DEFAULT_K) -> ExtractionResult:
    grid = query_grid(field, k)
    nonzero = bool((grid.values >= OCCUPIED).any())
    mesh = marching_cubes(grid) if nonzero else None
    return ExtractionResult(mesh, nonzero and mesh is not None, grid)
