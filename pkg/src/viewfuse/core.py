"""Geometric primitives: point clouds, pinhole cameras, k-NN, FPS, ball query.

Pixel convention: ``(u, v)`` are integer column / row indices with no
half-pixel offset, so ``project(unproject(u, v, d)) == (u, v, d)`` exactly up
to floating point rounding. Camera frame is x right, y down, z forward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeError, SizeError, ValidationError

__all__ = [
    "PointCloud",
    "CameraIntrinsics",
    "Pose",
    "RgbdFrame",
    "unproject",
    "project",
    "project_points",
    "SpatialIndex",
    "knn",
    "knn_bruteforce",
    "farthest_point_sampling",
    "ball_query",
]

_PIXEL_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points in world coordinates with optional per-point features and labels."""

    positions: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.size == 0:
            pos = pos.reshape(0, 3)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ShapeError(f"positions must be N x 3, got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("positions contain NaN or Inf")
        object.__setattr__(self, "positions", pos)
        n = pos.shape[0]
        if self.features is not None:
            feats = np.asarray(self.features)
            if feats.ndim != 2 or feats.shape[0] != n:
                raise ShapeError(f"features must be {n} x C, got {feats.shape}")
            object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.ndim != 1 or labels.shape[0] != n:
                raise ShapeError(f"labels must have length {n}, got {labels.shape}")
            object.__setattr__(self, "labels", labels.astype(np.int64, copy=False))

    def __len__(self):
        return self.positions.shape[0]

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(
            self.positions[idx],
            None if self.features is None else self.features[idx],
            None if self.labels is None else self.labels[idx],
        )

    @staticmethod
    def concat(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pos = np.concatenate([c.positions for c in clouds])
        feats = labels = None
        if all(c.features is not None for c in clouds):
            feats = np.concatenate([c.features for c in clouds])
        if all(c.labels is not None for c in clouds):
            labels = np.concatenate([c.labels for c in clouds])
        return PointCloud(pos, feats, labels)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(np.deg2rad(hfov_deg) / 2)
        return cls(float(f), float(f), (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping camera coordinates to world coordinates."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1) > 1e-6:
            raise ValidationError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``eye`` looking at ``target`` (z forward, y down)."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            raise ValidationError("viewing direction is parallel to up")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls(np.stack([x, y, z], axis=1), eye)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


@dataclass(frozen=True, eq=False)
class RgbdFrame:
    rgb: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    pose: Pose
    frame_id: int = 0

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.depth.shape != (h, w):
            raise ShapeError(f"depth must be {h} x {w}, got {self.depth.shape}")
        if self.rgb.shape != (h, w, 3):
            raise ShapeError(f"rgb must be {h} x {w} x 3, got {self.rgb.shape}")
        if np.any(self.depth < 0):
            raise ValidationError("depth must be non-negative")
        if np.any(self.rgb < 0) or np.any(self.rgb > 1):
            raise ValidationError("rgb must lie in [0, 1]")

    @property
    def shape(self):
        return self.depth.shape

    def with_pose(self, pose: Pose) -> "RgbdFrame":
        return RgbdFrame(self.rgb, self.depth, self.intrinsics, pose, self.frame_id)


def valid_pixels(depth: np.ndarray, max_points: int | None = None, rng=None) -> np.ndarray:
    """Flat (row-major) indices of valid-depth pixels, optionally subsampled.

    Subsampling is uniform without replacement; the kept indices are returned
    in ascending order.
    """
    flat = np.flatnonzero(depth.ravel() > 0)
    if max_points is not None and flat.size > max_points:
        if rng is None:
            raise ValidationError("subsampling valid pixels requires an rng")
        keep = rng.choice(flat.size, size=max_points, replace=False)
        flat = flat[np.sort(keep)]
    return flat


def unproject(frame: RgbdFrame, max_points: int | None = None, rng=None,
              per_pixel_features: np.ndarray | None = None) -> PointCloud:
    """Lift valid-depth pixels of ``frame`` to world-space points.

    Parameters
    ----------
    frame : RgbdFrame
    max_points : int, optional
        Per-frame budget. When more valid pixels exist, a uniform random subset
        of exactly ``max_points`` is kept. ``None`` keeps every valid pixel.
    rng : numpy.random.Generator, optional
        Required only when subsampling happens.
    per_pixel_features : ndarray, shape (H, W, C), optional
        Carried along to the surviving points as ``features``.

    Returns
    -------
    PointCloud
    """
    if max_points is not None and max_points < 1:
        raise ValidationError("max_points must be >= 1")
    h, w = frame.shape
    if per_pixel_features is not None:
        if per_pixel_features.ndim != 3 or per_pixel_features.shape[:2] != (h, w):
            raise ShapeError(
                f"per_pixel_features must be {h} x {w} x C, got {per_pixel_features.shape}")
    flat = valid_pixels(frame.depth, max_points, rng)
    v, u = np.divmod(flat, w)
    d = frame.depth.ravel()[flat].astype(np.float64)
    intr = frame.intrinsics
    cam = np.stack([(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d], axis=1)
    world = frame.pose.apply(cam)
    feats = None
    if per_pixel_features is not None:
        feats = per_pixel_features.reshape(h * w, -1)[flat]
    return PointCloud(world, feats)


def project_points(points: np.ndarray, intrinsics: CameraIntrinsics, pose: Pose):
    """Vectorized projection. Returns ``(u, v, depth, in_view)`` arrays."""
    cam = (np.asarray(points, dtype=np.float64) - pose.translation) @ pose.rotation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    # pixel 0 may come back as -1e-16 after a rotation round trip
    lo = -_PIXEL_SLACK
    in_view = (z > 0) & (u >= lo) & (u < intrinsics.width) & (v >= lo) & (v < intrinsics.height)
    return u, v, z, in_view


def project(point, frame: RgbdFrame):
    """Project a world point into ``frame``; ``None`` when out of view."""
    u, v, z, ok = project_points(np.asarray(point, dtype=np.float64).reshape(1, 3),
                                 frame.intrinsics, frame.pose)
    if not ok[0]:
        return None
    return float(u[0]), float(v[0]), float(z[0])


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def knn_bruteforce(queries: np.ndarray, reference: np.ndarray, k: int):
    """Exhaustive k-NN, ties by lowest reference index. Reference oracle."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if ref.shape[0] < k:
        raise SizeError(f"need at least k={k} reference points, got {ref.shape[0]}")
    d2 = _sq_dists(q, ref)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(d2, order, axis=1)


class SpatialIndex:
    """Immutable kd-tree over a fixed set of positions.

    Results are contractually identical to :func:`knn_bruteforce`: candidate
    neighbours come from the tree, their squared distances are recomputed
    exactly and sorted by ``(distance, index)``; rows whose candidate list
    might be truncated inside a tie fall back to exhaustive search.
    """

    _PAD = 4

    def __init__(self, positions):
        self.positions = np.array(positions, dtype=np.float64).reshape(-1, 3)
        self.positions.setflags(write=False)
        self._tree = cKDTree(self.positions) if len(self.positions) else None

    def __len__(self):
        return self.positions.shape[0]

    def query(self, queries, k: int):
        n = len(self)
        if k < 1:
            raise ValidationError("k must be >= 1")
        if n < k:
            raise SizeError(f"need at least k={k} reference points, got {n}")
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if q.shape[0] == 0:
            return np.zeros((0, k), np.int64), np.zeros((0, k))
        kk = min(n, k + self._PAD)
        tree_d, cand = self._tree.query(q, kk)
        tree_d = tree_d.reshape(len(q), kk)
        cand = cand.reshape(len(q), kk)
        diff = q[:, None, :] - self.positions[cand]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        order = np.lexsort((cand, d2), axis=1)[:, :k]
        idx = np.take_along_axis(cand, order, axis=1)
        sq = np.take_along_axis(d2, order, axis=1)
        if kk < n:
            # candidates beyond the k-th must be strictly farther, with slack for
            # the tree's own rounding, or the row may be missing a tied point
            kth = np.sqrt(sq[:, -1])
            unsafe = tree_d[:, -1] <= kth * (1 + 1e-9) + 1e-12
            if np.any(unsafe):
                bi, bs = knn_bruteforce(q[unsafe], self.positions, k)
                idx[unsafe] = bi
                sq[unsafe] = bs
        return idx.astype(np.int64), sq

    def nearest_distance(self, queries) -> np.ndarray:
        """Euclidean distance from each query to its nearest indexed point."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(self) == 0:
            return np.full(q.shape[0], np.inf)
        d, _ = self._tree.query(q, 1)
        return d


def _positions(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.positions
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def knn(queries, reference, k: int):
    """k nearest reference points per query.

    Returns
    -------
    indices : ndarray, shape (M, k), int64
    sq_distances : ndarray, shape (M, k)
        Sorted ascending; ties broken by lowest reference index.
    """
    index = reference if isinstance(reference, SpatialIndex) else SpatialIndex(_positions(reference))
    return index.query(queries, k)


def farthest_point_sampling(cloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Each step picks the not-yet-selected point maximizing the squared distance
    to the selected set; ties go to the lowest index. Indices are distinct even
    when the cloud contains duplicate positions.
    """
    pos = _positions(cloud)
    n = pos.shape[0]
    if m < 1:
        raise ValidationError("m must be >= 1")
    if m > n:
        raise SizeError(f"cannot sample {m} points from {n}")
    if not 0 <= start < n:
        raise ValidationError(f"start index {start} out of range")
    out = np.empty(m, dtype=np.int64)
    out[0] = start
    diff = pos - pos[start]
    mind = np.einsum("ij,ij->i", diff, diff)
    mind[start] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        out[i] = nxt
        diff = pos - pos[nxt]
        np.minimum(mind, np.einsum("ij,ij->i", diff, diff), out=mind)
        mind[out[: i + 1]] = -1.0
    return out


def ball_query(centroids, cloud, radius: float, max_samples: int,
               block: int = 1024) -> np.ndarray:
    """Group up to ``max_samples`` cloud points within ``radius`` of each centroid.

    Indices come lowest-first. Short groups are padded with their first index;
    a centroid with no point in range gets its nearest point repeated.
    """
    pos = _positions(cloud)
    c = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    n = pos.shape[0]
    if n == 0:
        raise SizeError("ball_query on an empty cloud")
    if radius <= 0:
        raise ValidationError("radius must be positive")
    if max_samples < 1:
        raise ValidationError("max_samples must be >= 1")
    r2 = radius * radius
    ar = np.arange(n)
    out = np.empty((c.shape[0], max_samples), dtype=np.int64)
    s = min(max_samples, n)
    for lo in range(0, c.shape[0], block):
        d2 = _sq_dists(c[lo: lo + block], pos)
        cand = np.where(d2 <= r2, ar, n)
        if s < n:
            cand = np.partition(cand, s - 1, axis=1)[:, :s]
        cand = np.sort(cand, axis=1)
        first = cand[:, :1]
        empty = first[:, 0] == n
        if np.any(empty):
            first = first.copy()
            first[empty, 0] = np.argmin(d2[empty], axis=1)
        cand = np.where(cand == n, first, cand)
        if s < max_samples:
            cand = np.concatenate([cand, np.repeat(cand[:, :1], max_samples - s, axis=1)], axis=1)
        out[lo: lo + block] = cand
    return out
