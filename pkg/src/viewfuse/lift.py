"""Lifting image features onto scene points.

Feature maps of a few RGB-D frames are unprojected into a dense cloud; every
sparse scene point then gathers its k nearest dense points, runs each
(feature, distance feature) pair through a small per-neighbour MLP and pools
the results into one feature vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PointCloud, knn, unproject
from .errors import ShapeError, SizeError, ValidationError
from .nn import Linear, Module, Tensor, no_grad, ops

POOLINGS = ("sum", "max", "mean")


@dataclass(frozen=True)
class AggregatorConfig:
    k: int = 3
    mlp_channels: tuple = (128, 64)
    pooling: str = "sum"
    use_mlp: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.pooling not in POOLINGS:
            raise ValidationError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.use_mlp and (len(self.mlp_channels) == 0 or min(self.mlp_channels) < 1):
            raise ValidationError("mlp_channels must be a non-empty list of positive ints")

    def out_channels(self, in_channels: int) -> int:
        return self.mlp_channels[-1] if self.use_mlp else in_channels + 4


@dataclass(frozen=True, eq=False)
class AugmentedPointCloud:
    """Scene points plus the per-point features distilled from the images."""

    base: PointCloud
    lifted: np.ndarray

    def __post_init__(self):
        if self.lifted.ndim != 2 or self.lifted.shape[0] != self.base.n:
            raise ShapeError(f"lifted features {self.lifted.shape} do not match {self.base.n} points")


def distance_feature(xi, xj) -> np.ndarray:
    """``concat(xi - xj, |xi - xj|^2)``; broadcasts over leading axes."""
    d = np.asarray(xi, dtype=np.float64) - np.asarray(xj, dtype=np.float64)
    return np.concatenate([d, np.sum(d * d, axis=-1, keepdims=True)], axis=-1)


class Aggregator(Module):
    """Per-neighbour MLP (linear + ReLU, last layer linear) followed by pooling."""

    def __init__(self, in_channels: int, config: AggregatorConfig = AggregatorConfig(), rng=None,
                 dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.in_channels = in_channels
        self.layers = []
        if config.use_mlp:
            chans = (in_channels + 4,) + tuple(config.mlp_channels)
            self.layers = [Linear(a, b, rng, dtype=dtype) for a, b in zip(chans[:-1], chans[1:])]
        self.out_channels = config.out_channels(in_channels)

    def neighbours(self, sparse_pos: np.ndarray, dense_pos: np.ndarray):
        """k-NN indices (N, k) and distance features (N, k, 4) of sparse points in the dense cloud."""
        return self.neighbours_for(sparse_pos, dense_pos, self.config.k)

    @staticmethod
    def neighbours_for(sparse_pos: np.ndarray, dense_pos: np.ndarray, k: int):
        if len(dense_pos) < k:
            raise SizeError(f"dense cloud has {len(dense_pos)} points, need at least k={k}")
        idx, _ = knn(sparse_pos, dense_pos, k)
        return idx, distance_feature(sparse_pos[:, None, :], dense_pos[idx])

    def __call__(self, dense_features, idx: np.ndarray, dist: np.ndarray) -> Tensor:
        """Pool gathered neighbour features: (M, C) dense features -> (N, C_out)."""
        dense_features = dense_features if isinstance(dense_features, Tensor) else Tensor(
            np.asarray(dense_features))
        if dense_features.shape[-1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} dense feature channels, "
                             f"got {dense_features.shape[-1]}")
        dist_t = Tensor(dist.astype(dense_features.dtype))
        if self.layers:
            # the first layer is affine in concat(f_j, d_ij): apply its feature
            # block once per dense point, then gather, instead of once per pair
            first = self.layers[0]
            c = self.in_channels
            w_f = ops.reshape(ops.gather_rows(first.weight, np.arange(c)), (c, -1))
            w_d = ops.gather_rows(first.weight, np.arange(c, c + 4))
            x = ops.add(ops.gather_rows(ops.linear(dense_features, w_f), idx),
                        ops.linear(dist_t, w_d, first.bias))
            rest = self.layers[1:]
            if rest:
                x = ops.relu(x)
        else:
            x = ops.concat([ops.gather_rows(dense_features, idx), dist_t], axis=-1)
            rest = []
        for i, layer in enumerate(rest):
            x = layer(x)
            if i < len(rest) - 1:
                x = ops.relu(x)
        if self.config.pooling == "sum":
            return ops.reduce_sum(x, axis=1)
        if self.config.pooling == "max":
            return ops.reduce_max(x, axis=1)
        return ops.reduce_mean(x, axis=1)


def aggregate(sparse: PointCloud, dense: PointCloud, config: AggregatorConfig = AggregatorConfig(),
              weights: Aggregator | None = None) -> AugmentedPointCloud:
    """Distill one feature per sparse point from its k nearest dense points.

    ``weights`` defaults to a freshly initialised :class:`Aggregator` (or none
    at all when ``config.use_mlp`` is off).
    """
    if dense.features is None:
        raise ValidationError("dense cloud carries no features")
    if weights is None:
        weights = Aggregator(dense.features.shape[1], config, dtype=np.float64)
    idx, dist = weights.neighbours(sparse.positions, dense.positions)
    with no_grad():
        h = weights(Tensor(np.asarray(dense.features, dtype=np.float64)), idx, dist)
    return AugmentedPointCloud(sparse, h.data)


def build_dense(frames, feature_maps, n_rgb: int | None, rng=None) -> PointCloud:
    """Concatenate the feature-carrying unprojections of the given frames."""
    if len(frames) != len(feature_maps):
        raise ShapeError("need exactly one feature map per frame")
    parts = [unproject(f, n_rgb, rng, fm) for f, fm in zip(frames, feature_maps)]
    dense = PointCloud.concat(parts) if parts else None
    if dense is None or dense.n == 0:
        raise ValidationError("no valid depth in any selected frame")
    return dense
