"""Geometric primitives over unordered 3D point sets.

Farthest point sampling and radius-bounded neighbor queries. Every routine has
a single-query form matching the contract and a batched form used by the tube
builder; both produce identical results in deterministic mode.

Passing ``rng=None`` selects deterministic mode. Passing a
``numpy.random.Generator`` selects seeded mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class NeighborList:
    """K neighbors of one anchor: indices, displacements (neighbor minus anchor), fallback flag."""

    indices: np.ndarray
    displacements: np.ndarray
    clamped: bool = False

    def __len__(self) -> int:
        return len(self.indices)


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an N x 3 point array, got shape {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("point set is empty")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    return pts


def norm3(v: np.ndarray) -> np.ndarray:
    """Euclidean norm over the last axis. Used everywhere a radius test is made."""
    return np.sqrt(np.sum(v * v, axis=-1))


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances between every row of ``a`` (..., A, 3) and ``b`` (..., B, 3)."""
    return norm3(b[..., None, :, :] - a[..., :, None, :])


def farthest_point_sample(points, n_out: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Greedy max-min subset of ``n_out`` point indices.

    Deterministic mode starts from the lexicographically smallest point; seeded
    mode starts from a uniformly drawn one. Ties go to the smallest index.
    """
    pts = _as_points(points)
    return farthest_point_sample_batch(pts[None], n_out, rng)[0]


def farthest_point_sample_batch(points: np.ndarray, n_out: int,
                                rng: np.random.Generator | None = None) -> np.ndarray:
    """FPS over a stack of point sets, ``points`` shaped (F, N, 3). Returns (F, n_out)."""
    points = np.asarray(points, dtype=np.float64)
    n_sets, n, _ = points.shape
    if n_out < 1 or n_out > n:
        raise ValueError(f"n_out must lie in [1, {n}], got {n_out}")
    out = np.empty((n_sets, n_out), dtype=np.int64)
    rows = np.arange(n_sets)
    if rng is None:
        # np.lexsort uses the last key as primary and is stable, so ties keep index order
        first = np.array([np.lexsort(p[:, ::-1].T)[0] for p in points], dtype=np.int64)
    else:
        first = rng.integers(0, n, size=n_sets)
    out[:, 0] = first
    min_dist = np.full((n_sets, n), np.inf)
    current = first
    for i in range(1, n_out):
        d = norm3(points - points[rows, current][:, None, :])
        np.minimum(min_dist, d, out=min_dist)
        # selected points have min_dist 0 and are never re-picked unless all remaining are duplicates
        min_dist[rows, current] = -1.0
        current = np.argmax(min_dist, axis=1)
        out[:, i] = current
    return out


def radius_neighbors(anchor, points, r: float, K: int,
                     rng: np.random.Generator | None = None) -> NeighborList:
    """Fixed-size radius neighborhood of a single anchor.

    If more than K points lie within ``r`` the K nearest are kept (deterministic)
    or K are drawn without replacement (seeded). If fewer, the in-radius set is
    repeated: cycled nearest-first, or topped up with uniform draws. If none,
    the globally nearest point is repeated K times and ``clamped`` is set.
    """
    pts = _as_points(points)
    a = np.asarray(anchor, dtype=np.float64).reshape(1, 3)
    idx, disp, clamped = radius_neighbors_batch(a[None], pts[None], r, K, rng)
    return NeighborList(idx[0, 0], disp[0, 0], bool(clamped[0, 0]))


def radius_neighbors_batch(anchors: np.ndarray, points: np.ndarray, r: float, K: int,
                           rng: np.random.Generator | None = None):
    """Batched radius query.

    Args:
        anchors: (F, A, 3) anchor coordinates.
        points: (F, N, 3) candidate points, one set per anchor group.
        r: search radius (inclusive).
        K: neighbors returned per anchor.
        rng: None for deterministic mode.

    Returns:
        indices (F, A, K), displacements (F, A, K, 3), clamped (F, A).
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    if points.shape[-2] < 1:
        raise ValueError("point set is empty")
    n_sets, n_anchor, _ = anchors.shape
    n = points.shape[1]
    dist = pairwise_distances(anchors, points)  # (F, A, N)
    inside = dist <= r
    count = inside.sum(axis=-1)  # (F, A)
    clamped = count == 0

    if rng is None:
        # stable sort keeps index order among equal distances
        order = np.argsort(dist, axis=-1, kind="stable")
        pos = np.arange(K)[None, None, :] % np.maximum(count, 1)[..., None]
    else:
        keys = rng.random(dist.shape)
        keys[~inside] = np.inf
        order = np.argsort(keys, axis=-1, kind="stable")
        nearest = np.argmin(dist, axis=-1)
        order[clamped, 0] = nearest[clamped]
        base = np.broadcast_to(np.arange(K), (n_sets, n_anchor, K))
        top_up = np.floor(rng.random((n_sets, n_anchor, K)) * np.maximum(count, 1)[..., None]).astype(np.int64)
        pos = np.where(base < count[..., None], base, top_up)
    pos = np.minimum(pos, n - 1)
    idx = np.take_along_axis(order, pos, axis=-1)
    disp = _gather_points(points, idx) - anchors[:, :, None, :]
    return idx, disp, clamped


def _gather_points(points: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """points (F, N, 3), idx (F, A, K) -> (F, A, K, 3)."""
    f = np.arange(points.shape[0])[:, None, None]
    return points[f, idx]
