"""Pinhole projection and triangle rasterization shared by mask projection and rendering.

Pixel (row v, column u) has its center at image coordinates (u + 0.5, v + 0.5).
Coverage uses edge functions with a top-left fill rule, so pixels on an edge
shared by two triangles are drawn exactly once.
"""

from __future__ import annotations

import numpy as np

_BATCH_WINDOW = 8


def intrinsics(fx, fy, cx, cy):
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def project(points_cam, K):
    """Camera-frame points (X right, Y down, Z forward) to pixel coordinates."""
    p = np.asarray(points_cam, dtype=np.float64)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K[0, 0] * p[:, 0] / z + K[0, 2]
        v = K[1, 1] * p[:, 1] / z + K[1, 2]
    return np.stack([u, v], axis=1), z


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _top_left(ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    return (dy > 0) | ((dy == 0) & (dx < 0))


def _fragments(tri_uv, tri_invz, ids, width, height, window=None):
    """Covered pixels of a batch of triangles; returns (pixel, triangle id, depth)."""
    a, b, c = tri_uv[:, 0], tri_uv[:, 1], tri_uv[:, 2]
    area = _edge(a[:, 0], a[:, 1], b[:, 0], b[:, 1], c[:, 0], c[:, 1])
    flip = area < 0
    b2 = np.where(flip[:, None], c, b)
    c2 = np.where(flip[:, None], b, c)
    iz = tri_invz.copy()
    iz[flip, 1], iz[flip, 2] = tri_invz[flip, 2], tri_invz[flip, 1]
    b, c = b2, c2
    area = np.abs(area)

    lo = np.floor(np.minimum(np.minimum(a, b), c) - 0.5).astype(np.int64)
    hi = np.ceil(np.maximum(np.maximum(a, b), c) - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], width - 1)
    hi[:, 1] = np.minimum(hi[:, 1], height - 1)

    if window is None:
        # single triangle, arbitrary bounding box
        (u0, v0), (u1, v1) = lo[0], hi[0]
        if u1 < u0 or v1 < v0:
            return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
        uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
        px = (uu.ravel() + 0.5)[None]
        py = (vv.ravel() + 0.5)[None]
        pix_u, pix_v = uu.ravel()[None], vv.ravel()[None]
    else:
        offs = np.arange(window)
        du, dv = np.meshgrid(offs, offs)
        pix_u = lo[:, 0:1] + du.ravel()[None]
        pix_v = lo[:, 1:2] + dv.ravel()[None]
        px, py = pix_u + 0.5, pix_v + 0.5

    def col(arr, i):
        return arr[:, i:i + 1]

    w0 = _edge(col(b, 0), col(b, 1), col(c, 0), col(c, 1), px, py)
    w1 = _edge(col(c, 0), col(c, 1), col(a, 0), col(a, 1), px, py)
    w2 = _edge(col(a, 0), col(a, 1), col(b, 0), col(b, 1), px, py)
    tl0 = _top_left(col(b, 0), col(b, 1), col(c, 0), col(c, 1))
    tl1 = _top_left(col(c, 0), col(c, 1), col(a, 0), col(a, 1))
    tl2 = _top_left(col(a, 0), col(a, 1), col(b, 0), col(b, 1))
    inside = ((w0 > 0) | ((w0 == 0) & tl0)) & ((w1 > 0) | ((w1 == 0) & tl1)) & ((w2 > 0) | ((w2 == 0) & tl2))
    inside &= (pix_u <= hi[:, 0:1]) & (pix_v <= hi[:, 1:2]) & (area[:, None] > 0)
    rows, cols = np.nonzero(inside)
    if not len(rows):
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    ar = area[rows]
    invz = (w0[rows, cols] * iz[rows, 0] + w1[rows, cols] * iz[rows, 1] + w2[rows, cols] * iz[rows, 2]) / ar
    pixel = pix_v[rows, cols] * width + pix_u[rows, cols]
    return pixel, ids[rows], 1.0 / invz


def rasterize(vertices_cam, triangles, K, width, height):
    """Z-buffered rasterization of a camera-frame mesh.

    Returns (depth, face_index): depth is camera Z per pixel (0 where empty),
    face_index is the visible triangle (-1 where empty). Nearer fragments win;
    equal depths go to the lower triangle index, so the result does not depend
    on submission order. Triangles with any vertex at Z <= 0 are culled.
    """
    depth = np.zeros(height * width)
    face = np.full(height * width, -1, dtype=np.int64)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if not len(triangles):
        return depth.reshape(height, width), face.reshape(height, width)
    uv, z = project(vertices_cam, K)
    tz = z[triangles]
    keep = (tz > 0).all(axis=1)
    ids = np.flatnonzero(keep)
    if not len(ids):
        return depth.reshape(height, width), face.reshape(height, width)
    tri_uv = uv[triangles[ids]]
    tri_invz = 1.0 / tz[ids]

    span = np.ceil(tri_uv.max(axis=1) - 0.5) - np.floor(tri_uv.min(axis=1) - 0.5) + 1
    small = (span <= _BATCH_WINDOW).all(axis=1)
    pieces = []
    if small.any():
        pieces.append(_fragments(tri_uv[small], tri_invz[small], ids[small], width, height, _BATCH_WINDOW))
    for j in np.flatnonzero(~small):
        pieces.append(_fragments(tri_uv[j:j + 1], tri_invz[j:j + 1], ids[j:j + 1], width, height))
    pixel = np.concatenate([p[0] for p in pieces])
    tri = np.concatenate([p[1] for p in pieces])
    zz = np.concatenate([p[2] for p in pieces])
    if not len(pixel):
        return depth.reshape(height, width), face.reshape(height, width)
    order = np.lexsort((tri, zz, pixel))
    pixel, tri, zz = pixel[order], tri[order], zz[order]
    first = np.ones(len(pixel), dtype=bool)
    first[1:] = pixel[1:] != pixel[:-1]
    depth[pixel[first]] = zz[first]
    face[pixel[first]] = tri[first]
    return depth.reshape(height, width), face.reshape(height, width)


def silhouette(vertices_cam, triangles, K, width, height):
    _, face = rasterize(vertices_cam, triangles, K, width, height)
    return face >= 0
