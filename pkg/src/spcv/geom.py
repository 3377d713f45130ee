"""Point cloud containers, unit-box normalization, exact k-NN and farthest point sampling.

Point clouds are plain ``(N, 3)`` float64 arrays. Order is significant: point ids
are row indices.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class InvalidInputError(ValueError):
    pass


def as_points(points, name: str = "point cloud") -> np.ndarray:
    """Validate and return an ``(N, 3)`` float64 array (N >= 1, finite)."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise InvalidInputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite coordinates")
    return arr


@dataclass(frozen=True)
class NormalizationTransform:
    center: tuple[float, float, float]
    scale: float

    def apply(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.center)) / self.scale

    def invert(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + np.asarray(self.center)


def unit_box_transform(points) -> NormalizationTransform:
    pts = as_points(points)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float(np.max(hi - lo))
    center = (lo + hi) / 2.0
    return NormalizationTransform(tuple(float(c) for c in center), extent if extent > 0 else 1.0)


def normalize_unit_box(points) -> tuple[np.ndarray, NormalizationTransform]:
    """Center on the bounding box and scale the longest axis to length 1."""
    tf = unit_box_transform(points)
    out = tf.apply(as_points(points))
    if tf.scale == 1.0 and np.ptp(out, axis=0).max() == 0:
        out = np.zeros_like(out)
    return out, tf


def _sq_dists(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = points - q
    return np.einsum("ij,ij->i", d, d)


class SpatialIndex:
    """Immutable exact k-NN / radius index; ties are broken by lower point id."""

    def __init__(self, points):
        self._points = as_points(points).copy()
        self._points.setflags(write=False)
        self._tree = cKDTree(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def __len__(self) -> int:
        return len(self._points)

    def knn(self, q, k: int) -> list[tuple[int, float]]:
        ids, dists = self.knn_arrays(q, k)
        return [(int(i), float(d)) for i, d in zip(ids, dists)]

    def knn_arrays(self, q, k: int) -> tuple[np.ndarray, np.ndarray]:
        if k < 1:
            raise InvalidInputError("k must be >= 1")
        q = np.asarray(q, dtype=np.float64).reshape(3)
        n = len(self._points)
        k = min(k, n)
        if k == n:
            cand = np.arange(n)
        else:
            _, cand = self._tree.query(q, k=k)
            cand = np.atleast_1d(cand)
            # pull in every point tied with (or within rounding of) the k-th distance
            kth = np.sqrt(_sq_dists(self._points[cand], q).max())
            cand = np.asarray(self._tree.query_ball_point(q, kth * (1 + 1e-9) + 1e-300), dtype=np.intp)
        d2 = _sq_dists(self._points[cand], q)
        order = np.lexsort((cand, d2))[:k]
        return cand[order], np.sqrt(d2[order])

    def knn_batch(self, queries, k: int, exclude_self: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized k-NN for many queries; returns ``(ids, dists)`` of shape (Q, k).

        With ``exclude_self`` the queries must be the indexed points themselves and
        each query's own id is removed from its neighbor list.
        """
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self._points)
        if exclude_self and len(queries) != n:
            raise InvalidInputError("exclude_self requires querying the indexed points")
        want = min(k + (1 if exclude_self else 0), n)
        if exclude_self and want - 1 < 1:
            raise InvalidInputError("need at least two points to exclude self")
        extra = min(want + 1, n)
        _, cand = self._tree.query(queries, k=extra)
        cand = cand.reshape(len(queries), extra)
        diff = self._points[cand] - queries[:, None, :]
        d2 = np.einsum("qkj,qkj->qk", diff, diff)
        # sort each row by (distance, id)
        key_order = np.argsort(cand, axis=1, kind="stable")
        cand = np.take_along_axis(cand, key_order, 1)
        d2 = np.take_along_axis(d2, key_order, 1)
        order = np.argsort(d2, axis=1, kind="stable")
        cand = np.take_along_axis(cand, order, 1)
        d2 = np.take_along_axis(d2, order, 1)
        ids = np.empty((len(queries), want), dtype=np.intp)
        dd = np.empty((len(queries), want))
        ids[:] = cand[:, :want]
        dd[:] = d2[:, :want]
        if extra > want:
            # rows where the cut falls inside a tie need the exact slow path
            tied = d2[:, want] <= d2[:, want - 1] * (1 + 1e-9)
            for r in np.flatnonzero(tied):
                i, d = self.knn_arrays(queries[r], want)
                ids[r], dd[r] = i, d * d
        if exclude_self:
            own = np.arange(n)[:, None]
            is_self = ids == own
            has_self = is_self.any(axis=1)
            # drop own id where present, otherwise the farthest candidate
            drop = np.where(has_self, is_self.argmax(axis=1), want - 1)
            keep = np.ones_like(ids, dtype=bool)
            keep[np.arange(n), drop] = False
            ids = ids[keep].reshape(n, want - 1)
            dd = dd[keep].reshape(n, want - 1)
        return ids, np.sqrt(dd)

    def radius(self, q, r: float) -> np.ndarray:
        """Ids within Euclidean distance ``r`` of ``q``, ascending id order."""
        return np.asarray(sorted(self._tree.query_ball_point(np.asarray(q, dtype=np.float64), r)),
                          dtype=np.intp)


def build_index(points) -> SpatialIndex:
    return SpatialIndex(points)


def knn(index: SpatialIndex, q, k: int) -> list[tuple[int, float]]:
    return index.knn(q, k)


def brute_force_knn(points, q, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Reference scan used as a test oracle."""
    pts = as_points(points)
    d2 = _sq_dists(pts, np.asarray(q, dtype=np.float64).reshape(3))
    order = np.lexsort((np.arange(len(pts)), d2))[:min(k, len(pts))]
    return order, np.sqrt(d2[order])


def farthest_point_sample(points, m: int, seed_id: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lower id."""
    pts = as_points(points)
    n = len(pts)
    if not 1 <= m <= n:
        raise InvalidInputError(f"cannot sample m={m} from {n} points")
    if not 0 <= seed_id < n:
        raise InvalidInputError(f"seed id {seed_id} out of range [0, {n})")
    chosen = np.empty(m, dtype=np.intp)
    chosen[0] = seed_id
    mind = _sq_dists(pts, pts[seed_id])
    mind[seed_id] = -1.0
    for s in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[s] = nxt
        mind = np.minimum(mind, _sq_dists(pts, pts[nxt]))
        mind[chosen[:s + 1]] = -1.0
    return chosen
