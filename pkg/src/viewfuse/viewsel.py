"""Frame/point overlap precomputation and greedy view selection."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import PointCloud, SpatialIndex, unproject
from .errors import SizeError, ValidationError


@dataclass(frozen=True, eq=False)
class CoverageIndex:
    """Which coarse scene points each frame sees.

    Attributes
    ----------
    coarse_ids : ndarray
        Indices (into the scene cloud) of one representative per occupied voxel.
    coarse_positions : ndarray, shape (n_coarse, 3)
    frame_ids : list of int
        Frame ids in stream order; ``covered[i]`` belongs to ``frame_ids[i]``.
    covered : list of ndarray
        Sorted, deduplicated coarse-point indices (positions in ``coarse_ids``).
    """

    coarse_ids: np.ndarray
    coarse_positions: np.ndarray
    frame_ids: list
    covered: list
    cover_threshold: float
    coarse_voxel: float

    @property
    def num_coarse(self) -> int:
        return len(self.coarse_ids)

    def mask_matrix(self) -> np.ndarray:
        m = np.zeros((len(self.frame_ids), self.num_coarse), dtype=bool)
        for i, c in enumerate(self.covered):
            m[i, c] = True
        return m

    def in_xy_box(self, lo, hi) -> np.ndarray:
        """Coarse indices whose xy lies in the square ``[lo, hi]``."""
        p = self.coarse_positions
        ok = (p[:, 0] >= lo[0]) & (p[:, 0] <= hi[0]) & (p[:, 1] >= lo[1]) & (p[:, 1] <= hi[1])
        return np.flatnonzero(ok)


def voxel_downsample(positions: np.ndarray, voxel: float) -> np.ndarray:
    """Indices of the lowest-index point in every occupied voxel, ascending."""
    if len(positions) == 0:
        return np.zeros(0, dtype=np.int64)
    keys = np.floor(np.asarray(positions) / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return np.sort(first)


def build_coverage_index(scene_points: PointCloud, frames, cover_threshold: float = 0.1,
                         coarse_voxel: float = 0.2) -> CoverageIndex:
    """Precompute frame coverage of the voxel-downsampled scene cloud.

    A coarse point is covered by a frame when its nearest unprojected point of
    that frame (all valid pixels) is strictly closer than ``cover_threshold``.
    """
    if not frames:
        raise SizeError("need at least one frame")
    if cover_threshold <= 0 or coarse_voxel <= 0:
        raise ValidationError("thresholds must be positive")
    coarse_ids = voxel_downsample(scene_points.positions, coarse_voxel)
    coarse = scene_points.positions[coarse_ids]
    covered = []
    for frame in frames:
        pts = unproject(frame).positions
        if len(pts) == 0 or len(coarse) == 0:
            covered.append(np.zeros(0, dtype=np.int64))
            continue
        d = SpatialIndex(pts).nearest_distance(coarse)
        covered.append(np.flatnonzero(d < cover_threshold))
    return CoverageIndex(coarse_ids, coarse, [int(f.frame_id) for f in frames], covered,
                         float(cover_threshold), float(coarse_voxel))


def greedy_select(index: CoverageIndex, target, m: int) -> list:
    """Pick ``m`` frames, each maximizing newly covered target points.

    Ties go to the lowest frame id. Frames are never repeated, and frames with
    zero gain are still emitted so the output always has length ``m``.
    """
    n_frames = len(index.frame_ids)
    if n_frames == 0:
        raise SizeError("no frames to select from")
    if m < 1:
        raise ValidationError("m must be >= 1")
    if m > n_frames:
        raise SizeError(f"cannot select {m} distinct frames out of {n_frames}")
    cov = index.mask_matrix()
    uncovered = np.zeros(index.num_coarse, dtype=bool)
    uncovered[np.asarray(sorted(target), dtype=np.int64)] = True
    order = np.argsort(index.frame_ids, kind="stable")
    cov = cov[order]
    available = np.ones(n_frames, dtype=bool)
    chosen = []
    for _ in range(m):
        gains = (cov & uncovered).sum(axis=1)
        gains[~available] = -1
        best = int(np.argmax(gains))
        available[best] = False
        uncovered &= ~cov[best]
        chosen.append(int(index.frame_ids[order[best]]))
    return chosen


def coverage(sparse: PointCloud, dense: PointCloud, threshold: float = 0.1) -> float:
    """Fraction of ``sparse`` points with a ``dense`` neighbour strictly closer than ``threshold``."""
    if len(sparse) < 1:
        raise SizeError("coverage of an empty sparse cloud")
    if len(dense) == 0:
        return 0.0
    d = SpatialIndex(dense.positions).nearest_distance(sparse.positions)
    return float(np.mean(d < threshold))


def save_coverage_index(index: CoverageIndex, path):
    doc = {
        "coarse_voxel": index.coarse_voxel,
        "cover_threshold": index.cover_threshold,
        "num_coarse": index.num_coarse,
        "coarse_ids": [int(i) for i in index.coarse_ids],
        "coarse_positions": [float(x) for x in index.coarse_positions.ravel()],
        "frames": {str(fid): [int(i) for i in c] for fid, c in zip(index.frame_ids, index.covered)},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_coverage_index(path) -> CoverageIndex:
    with open(path) as fh:
        doc = json.load(fh)
    fids = sorted(int(k) for k in doc["frames"])
    n = int(doc["num_coarse"])
    return CoverageIndex(np.array(doc["coarse_ids"], dtype=np.int64),
                         np.array(doc["coarse_positions"], dtype=np.float64).reshape(n, 3),
                         fids, [np.array(doc["frames"][str(f)], dtype=np.int64) for f in fids],
                         float(doc["cover_threshold"]), float(doc["coarse_voxel"]))
