"""Point-cloud primitives: spatial search, sampling, rigid transforms, chamfer distance.

Clouds are plain ``(N, 3)`` float64 arrays throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "as_cloud",
    "normalize_to_unit_sphere",
    "RigidTransform",
    "NeighborSet",
    "SpatialIndex",
    "build_spatial_index",
    "farthest_point_sample",
    "apply_transform",
    "chamfer_distance",
    "rotation_angle_deg",
    "axis_angle_matrix",
    "random_rigid_transform",
]


def as_cloud(points) -> np.ndarray:
    """Validate and return ``points`` as a contiguous ``(N, 3)`` float64 array."""
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point array, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("point cloud is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point cloud contains non-finite coordinates")
    return arr


def normalize_to_unit_sphere(points) -> np.ndarray:
    """Center at the centroid and scale so the farthest point has norm 1."""
    pts = as_cloud(points)
    centered = pts - pts.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius > 0:
        centered = centered / radius
    # second centering pass removes the rounding left by the division
    return centered - centered.mean(axis=0)


@dataclass(frozen=True)
class RigidTransform:
    """x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )


class NeighborSet(NamedTuple):
    center: int
    indices: np.ndarray
    distances: np.ndarray


def _tie_sorted(dist: np.ndarray, idx: np.ndarray, k: int):
    # rows sorted by (distance, index); cKDTree does not promise an order among ties
    order = np.lexsort((idx, dist), axis=-1)
    idx = np.take_along_axis(idx, order, axis=-1)[..., :k]
    dist = np.take_along_axis(dist, order, axis=-1)[..., :k]
    return dist, idx


class SpatialIndex:
    """Exact k-NN and radius queries over a fixed cloud.

    Ties in distance are broken by the smaller point index.
    """

    _TIE_MARGIN = 4

    def __init__(self, points):
        self.points = as_cloud(points)
        self.points.flags.writeable = False
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, queries, k: int):
        """k nearest cloud points for each query row; returns ``(distances, indices)``.

        Both outputs have shape ``(M, k')`` with ``k' = min(k, N)``.
        """
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self)
        k = min(int(k), n)
        if k < 1:
            raise ValueError("k must be at least 1")
        kk = min(n, k + self._TIE_MARGIN)
        dist, idx = self._tree.query(q, k=kk)
        dist = np.asarray(dist).reshape(q.shape[0], kk)
        idx = np.asarray(idx).reshape(q.shape[0], kk)
        return _tie_sorted(dist, idx, k)

    def neighbors(self, center: int, k: int, include_self: bool = False) -> NeighborSet:
        """Neighbors of cloud point ``center``."""
        extra = 0 if include_self else 1
        dist, idx = self.query(self.points[center], k + extra)
        dist, idx = dist[0], idx[0]
        if not include_self:
            keep = idx != center
            dist, idx = dist[keep][:k], idx[keep][:k]
        return NeighborSet(int(center), idx, dist)

    def knn_all(self, k: int, include_self: bool = False):
        """Neighbor table for every cloud point: ``(distances, indices)`` of shape ``(N, k')``."""
        n = len(self)
        extra = 0 if include_self else 1
        dist, idx = self.query(self.points, k + extra)
        if include_self:
            return dist, idx
        # drop the self entry; it may not sit in column 0 when duplicates exist
        k_out = min(k, n - 1)
        is_self = idx == np.arange(n)[:, None]
        has_self = is_self.any(axis=1)
        # rows without a self hit (duplicate-point ties) drop their last column instead
        is_self[~has_self, -1] = True
        keep = ~is_self
        dist = dist[keep].reshape(n, -1)[:, :k_out]
        idx = idx[keep].reshape(n, -1)[:, :k_out]
        return dist, idx

    def radius(self, query, r: float) -> np.ndarray:
        """Indices within distance ``r`` of ``query``, sorted by (distance, index)."""
        q = np.asarray(query, dtype=np.float64).reshape(3)
        idx = np.asarray(self._tree.query_ball_point(q, r), dtype=np.int64)
        if idx.size == 0:
            return idx
        dist = np.linalg.norm(self.points[idx] - q, axis=1)
        return idx[np.lexsort((idx, dist))]


def build_spatial_index(points) -> SpatialIndex:
    return SpatialIndex(points)


def farthest_point_sample(points, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min subsampling starting from ``seed_index``.

    Each new index maximizes the distance to the already-selected set; ties go
    to the smaller index, so the result is fully deterministic.
    """
    pts = as_cloud(points)
    n = pts.shape[0]
    m = int(m)
    if m < 1 or m > n:
        raise ValueError(f"cannot sample {m} points from a cloud of {n}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = seed_index
    min_d2 = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    min_d2[seed_index] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        d2 = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[selected[: i + 1]] = -1.0
    return selected


def apply_transform(points, transform: RigidTransform) -> np.ndarray:
    return transform.apply(as_cloud(points))


def chamfer_distance(a, b) -> float:
    """Symmetric chamfer distance with per-direction size normalization.

    ``mean_a min_b |a - b| + mean_b min_a |b - a|`` (Euclidean, not squared).
    """
    a = as_cloud(a)
    b = as_cloud(b)
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return float(np.mean(d_ab) + np.mean(d_ba))


def rotation_angle_deg(rotation) -> float:
    """Geodesic angle of a rotation matrix, in degrees.

    Equals arccos((trace - 1) / 2) but evaluated as atan2(sin, cos): the bare
    arccos cannot resolve angles below ~1e-6 degrees in double precision.
    """
    r = np.asarray(rotation, dtype=np.float64)
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = min(np.linalg.norm(skew) / 2.0, 1.0)
    return float(np.degrees(np.arctan2(s, c)))


def axis_angle_matrix(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` (normalized internally)."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def random_rigid_transform(rng_seed, max_rotation_deg: float = 180.0,
                           max_translation: float = 0.5) -> RigidTransform:
    """Rotation by an angle uniform in ``[0, max_rotation_deg]`` about a uniform
    random axis, translation uniform per component in ``±max_translation``.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    if not 0.0 < max_rotation_deg <= 180.0:
        raise ValueError("max_rotation_deg must lie in (0, 180]")
    if max_translation < 0:
        raise ValueError("max_translation must be non-negative")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(0.0, max_rotation_deg))
    translation = rng.uniform(-max_translation, max_translation, size=3)
    rot = axis_angle_matrix(axis, angle)
    # re-orthonormalize so RᵀR = I holds to machine precision
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    return RigidTransform(rot, translation)
