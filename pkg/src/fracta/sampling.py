"""Labeled training points and quota-balanced minibatches."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fracture import LABEL_BAND_CELLS, ShapeTuple, surface_distance
from .geometry import QUERY_HALF_SIDE, surface_sample
from .isosurface import extract_signed

DEFAULT_N = 50_000
DEFAULT_SIGMA = 0.01
DEFAULT_M = 2048

UNIFORM, SURFACE_C, SURFACE_B, SURFACE_R = range(4)
SOURCE_NAMES = ("uniform", "surface-C", "surface-B", "surface-R")
SHAPES = ("C", "B", "R")


class SamplingError(ValueError):
    pass


@dataclass(eq=False)
class SampleSet:
    points: np.ndarray  # (N, 3), float32-representable
    labels: np.ndarray  # (N, 3) uint8 columns oC, oB, oR
    source: np.ndarray  # (N,) uint8
    seed: int = 0

    def __len__(self):
        return len(self.points)

    def strata(self):
        """Boolean masks keyed 'inside-C', 'outside-C', ... in a fixed order."""
        masks = {}
        for col, name in enumerate(SHAPES):
            inside = self.labels[:, col].astype(bool)
            masks[f"inside-{name}"] = inside
            masks[f"outside-{name}"] = ~inside
        return masks

    def label_violations(self):
        c, b, r = (self.labels[:, i].astype(bool) for i in range(3))
        return int((r != (c & b)).sum())


@dataclass(eq=False)
class Minibatch:
    indices: np.ndarray
    inside_counts: dict
    outside_counts: dict

    def __len__(self):
        return len(self.indices)


def label_points(tup: ShapeTuple, points):
    c = tup.complete(points) >= 0.5
    b = tup.break_shape(points) >= 0.5
    r = tup.restoration(points) >= 0.5
    return np.stack([c, b, r], axis=1).astype(np.uint8)


def _break_patch(tup: ShapeTuple):
    if tup.break_mesh is not None:
        return tup.break_mesh
    mesh = extract_signed(lambda p: -tup.break_surface(p), tup.grid_k, half_side=0.5, closed=False)
    if mesh is None:
        # zero set misses the unit cube; fall back to the clipped break shape boundary
        mesh = extract_signed(tup.break_surface.signed, tup.grid_k)
    return mesh


def precompute_samples(tup: ShapeTuple, n: int = DEFAULT_N, sigma: float = DEFAULT_SIGMA,
                       seed: int = 0) -> SampleSet:
    """n uniform points in the 1.1 cube plus n jittered surface points for each of C, B, R."""
    if n <= 0:
        raise SamplingError("n must be positive")
    if sigma < 0:
        raise SamplingError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    chunks = [rng.uniform(-QUERY_HALF_SIDE, QUERY_HALF_SIDE, size=(n, 3))]
    sources = [np.full(n, UNIFORM, dtype=np.uint8)]
    meshes = (tup.complete_mesh, _break_patch(tup), tup.restoration_mesh)
    for tag, mesh in zip((SURFACE_C, SURFACE_B, SURFACE_R), meshes):
        if mesh is None or mesh.is_empty:
            raise SamplingError(f"tuple has no {SOURCE_NAMES[tag]} mesh to sample")
        pts, _ = surface_sample(mesh, n, seed=int(rng.integers(2**63)))
        if sigma > 0:
            pts = pts + rng.normal(scale=sigma, size=pts.shape)
        chunks.append(pts)
        sources.append(np.full(n, tag, dtype=np.uint8))
    # labels are taken at the stored (float32) positions
    points = np.concatenate(chunks).astype(np.float32).astype(np.float64)
    source = np.concatenate(sources)
    labels = label_points(tup, points)
    if sigma == 0:
        _clear_boundary_labels(tup, points, labels, source)
    return SampleSet(points, labels, source, seed)


def _clear_boundary_labels(tup: ShapeTuple, points, labels, source):
    """Open-set rule for unjittered points: a point on a shape's surface is outside it.

    Meshes only approximate the zero sets, so field evaluation alone can put
    these points on either side. A point on the restoration surface lies on the
    break surface or on the complete surface; the break distance decides which.
    """
    labels[source == SURFACE_C, 0] = 0
    labels[source == SURFACE_B, 1] = 0
    on_r = np.flatnonzero(source == SURFACE_R)
    if len(on_r):
        cell = 2.0 * QUERY_HALF_SIDE / tup.grid_k
        dist = surface_distance(tup.break_surface, points[on_r], 0.25 * cell)
        on_break = dist <= LABEL_BAND_CELLS * cell
        labels[on_r[on_break], 1] = 0
        labels[on_r[~on_break], 0] = 0
    labels[:, 2] = labels[:, 0] & labels[:, 1]


def quota(m: int) -> int:
    return math.ceil(m / 6)


def draw_minibatch(samples: SampleSet, m: int = DEFAULT_M, seed: int = 0) -> Minibatch:
    """m points with at least ceil(m/6) inside and outside each of C, B, R."""
    if m <= 0:
        raise SamplingError("m must be positive")
    if m > len(samples):
        raise SamplingError(f"cannot draw {m} points from a set of {len(samples)}")
    q = quota(m)
    strata = samples.strata()
    deficient = [name for name, mask in strata.items() if mask.sum() < q]
    if deficient:
        raise SamplingError(f"infeasible quotas (need {q} each): {', '.join(deficient)}")

    rng = np.random.default_rng(seed)
    chosen = np.zeros(len(samples), dtype=bool)
    # rarest strata first so later quotas are partly pre-filled
    for name in sorted(strata, key=lambda s: (strata[s].sum(), s)):
        mask = strata[name]
        need = q - int((chosen & mask).sum())
        if need > 0:
            pool = np.flatnonzero(mask & ~chosen)
            chosen[rng.choice(pool, size=need, replace=False)] = True
    taken = int(chosen.sum())
    if taken > m:
        raise SamplingError(f"quotas need {taken} distinct points, more than m={m}")
    if taken < m:
        chosen[rng.choice(np.flatnonzero(~chosen), size=m - taken, replace=False)] = True
    idx = np.flatnonzero(chosen)
    idx = idx[rng.permutation(len(idx))]
    inside = {s: int(samples.labels[idx, i].sum()) for i, s in enumerate(SHAPES)}
    outside = {s: m - inside[s] for s in SHAPES}
    return Minibatch(idx, inside, outside)


# --------------------------------------------------------------------------
# FXSS files

_FXSS_HEADER = struct.Struct("<4sIQ")
_FXSS_RECORD = np.dtype([("p", "<f4", (3,)), ("labels", "u1"), ("source", "u1")])


class SampleFormatError(ValueError):
    pass


def samples_to_bytes(samples: SampleSet) -> bytes:
    rec = np.zeros(len(samples), dtype=_FXSS_RECORD)
    rec["p"] = samples.points
    lab = samples.labels.astype(np.uint8)
    rec["labels"] = lab[:, 0] | (lab[:, 1] << 1) | (lab[:, 2] << 2)
    rec["source"] = samples.source
    return _FXSS_HEADER.pack(b"FXSS", 1, len(samples)) + rec.tobytes()


def samples_from_bytes(data: bytes, seed=0) -> SampleSet:
    if len(data) < _FXSS_HEADER.size:
        raise SampleFormatError("truncated FXSS header")
    magic, version, count = _FXSS_HEADER.unpack_from(data)
    if magic != b"FXSS":
        raise SampleFormatError("bad FXSS magic")
    if version != 1:
        raise SampleFormatError(f"unsupported FXSS version {version}")
    if len(data) != _FXSS_HEADER.size + count * _FXSS_RECORD.itemsize:
        raise SampleFormatError("FXSS payload length does not match count")
    rec = np.frombuffer(data, dtype=_FXSS_RECORD, offset=_FXSS_HEADER.size)
    packed = rec["labels"]
    labels = np.stack([packed & 1, (packed >> 1) & 1, (packed >> 2) & 1], axis=1).astype(np.uint8)
    return SampleSet(rec["p"].astype(np.float64), labels, rec["source"].copy(), seed)


def save_samples(samples: SampleSet, path):
    Path(path).write_bytes(samples_to_bytes(samples))


def load_samples(path) -> SampleSet:
    return samples_from_bytes(Path(path).read_bytes())
