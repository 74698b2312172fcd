"""Repair metrics (chamfer distance, normal consistency, NZ%, rotation search) and mask ops."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import TriangleMesh, rotation_about_axis, surface_sample

METRIC_POINTS = 30_000
ROTATIONS = 36
UP = (0.0, 1.0, 0.0)


def _check_points(a, name):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if not len(a):
        raise ValueError(f"point set {name} is empty")
    return a


def chamfer_distance(a, b) -> float:
    """Mean squared nearest-neighbor distance from a to b plus the same from b to a."""
    a, b = _check_points(a, "A"), _check_points(b, "B")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(np.mean(da * da) + np.mean(db * db))


def chamfer_distance_brute(a, b) -> float:
    a, b = _check_points(a, "A"), _check_points(b, "B")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def sample_surface(mesh: TriangleMesh, npoints=METRIC_POINTS, seed=0):
    """Area-uniform points and unit face normals on a mesh."""
    if mesh is None or mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    return surface_sample(mesh, npoints, seed=seed)


def normal_consistency_points(pa, na, pb, nb) -> float:
    pa, pb = _check_points(pa, "A"), _check_points(pb, "B")
    _, ia = cKDTree(pb).query(pa)
    _, ib = cKDTree(pa).query(pb)
    ab = np.abs(np.einsum("ij,ij->i", na, nb[ia]))
    ba = np.abs(np.einsum("ij,ij->i", nb, na[ib]))
    return float(np.clip((ab.mean() + ba.mean()) / 2, 0.0, 1.0))


def normal_consistency(a: TriangleMesh, b: TriangleMesh, npoints=METRIC_POINTS, seed=0) -> float:
    """Symmetrized mean |cos| between normals at nearest-neighbor samples.

    Both meshes are sampled with the same seed, so identical meshes score exactly 1.
    """
    pa, na = sample_surface(a, npoints, seed)
    pb, nb = sample_surface(b, npoints, seed)
    return normal_consistency_points(pa, na, pb, nb)


@dataclass
class RotationSearch:
    angle: float  # degrees
    cd: float
    cds: np.ndarray  # CD for every candidate angle

    @property
    def rotation(self):
        return rotation_about_axis(UP, np.radians(self.angle))


def rotation_search_points(pred, gt, x=ROTATIONS, up=UP, tie_rtol=1e-9) -> RotationSearch:
    """Best of x rotations of pred about ``up``; near-ties go to the smallest angle."""
    if x < 1:
        raise ValueError("x must be at least 1")
    pred, gt = _check_points(pred, "pred"), _check_points(gt, "gt")
    tree_pred, tree_gt = cKDTree(pred), cKDTree(gt)
    angles = 360.0 * np.arange(x) / x
    cds = np.empty(x)
    for i, deg in enumerate(angles):
        rot = rotation_about_axis(up, np.radians(deg))
        # CD(R p, g) == CD(p, R^T g), so both trees are built once
        d_pred, _ = tree_gt.query(pred @ rot.T)
        d_gt, _ = tree_pred.query(gt @ rot)
        cds[i] = np.mean(d_pred * d_pred) + np.mean(d_gt * d_gt)
    best = cds.min()
    i = int(np.flatnonzero(cds <= best * (1 + tie_rtol))[0])
    return RotationSearch(float(angles[i]), float(cds[i]), cds)


def rotation_search_cd(pred: TriangleMesh, gt: TriangleMesh, x=ROTATIONS, npoints=METRIC_POINTS,
                       seed=0, up=UP):
    """(best angle in degrees, best CD) over rotations of pred by 360*i/x about the up axis."""
    pp, _ = sample_surface(pred, npoints, seed)
    pg, _ = sample_surface(gt, npoints, seed)
    res = rotation_search_points(pp, pg, x, up)
    return res.angle, res.cd


def nz_percent(results) -> float:
    """Percentage of results with a generated (nonzero) restoration."""
    flags = [bool(getattr(r, "nonzero", r)) for r in results]
    if not flags:
        raise ValueError("nz_percent of an empty list")
    return 100.0 * sum(flags) / len(flags)


# --------------------------------------------------------------------------
# masks


def dice(a, b) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def largest_component(mask, connectivity=4):
    """Keep the largest connected true region; ties go to the region seen first in scanline order."""
    mask = np.asarray(mask, dtype=bool)
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, count = ndimage.label(mask, structure=structure)
    if count == 0:
        return np.zeros_like(mask)
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=count + 1)[1:]
    first = np.full(count + 1, flat.size)
    np.minimum.at(first, flat, np.arange(flat.size))
    first = first[1:]
    winner = np.lexsort((first, -sizes))[0] + 1
    return labels == winner


# --------------------------------------------------------------------------
# reports


@dataclass
class ObjectMetrics:
    object_id: str
    cd: float = math.nan
    nc: float = math.nan
    angle: float = math.nan
    nonzero: bool = False


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    @property
    def generated(self):
        return [r for r in self.rows if r.nonzero]

    @property
    def total(self):
        return len(self.rows)

    @property
    def nz_percent(self):
        return nz_percent([r.nonzero for r in self.rows])

    @property
    def mean_cd(self):
        gen = self.generated
        return math.fsum(r.cd for r in gen) / len(gen) if gen else math.nan

    @property
    def mean_nc(self):
        gen = self.generated
        return math.fsum(r.nc for r in gen) / len(gen) if gen else math.nan

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("object_id,cd,nc,angle,nonzero\n")
        for r in sorted(self.rows, key=lambda r: r.object_id):
            out.write(f"{r.object_id},{r.cd:.9g},{r.nc:.9g},{r.angle:.9g},{int(r.nonzero)}\n")
        out.write(
            f"# summary mean_cd={self.mean_cd:.9g} mean_nc={self.mean_nc:.9g} "
            f"nz_percent={self.nz_percent:.6g} generated={len(self.generated)} total={self.total}\n"
        )
        return out.getvalue()


def evaluate_object(object_id, pred: TriangleMesh, gt: TriangleMesh, npoints=METRIC_POINTS,
                    x=ROTATIONS, seed=0) -> ObjectMetrics:
    """CD after the rotation search, and NC at the chosen rotation. Empty pred is a non-generated row."""
    if pred is None or pred.is_empty:
        return ObjectMetrics(object_id)
    pp, pn = sample_surface(pred, npoints, seed)
    pg, gn = sample_surface(gt, npoints, seed)
    res = rotation_search_points(pp, pg, x)
    rot = res.rotation
    nc = normal_consistency_points(pp @ rot.T, pn @ rot.T, pg, gn)
    return ObjectMetrics(object_id, res.cd, nc, res.angle, True)
