"""Single-scale-grouping point set backbone with image-feature fusion variants.

All geometry (centroid sampling, ball grouping, interpolation neighbours)
depends only on point positions, so it is computed once per chunk with
:func:`build_geometry` and shared by every branch and by backprop. Several
chunks of equal size are processed together by flattening them into one
row array and offsetting the indices.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import ball_query, farthest_point_sampling, knn
from .errors import ShapeError, SizeError, ValidationError
from .nn import BatchNorm, Linear, Module, SharedMLP, Tensor, no_grad, ops


class Fusion(str, Enum):
    EARLY = "early"
    INTERMEDIATE = "intermediate"
    LATE = "late"
    XYZ_ONLY = "xyz"
    XYZ_RGB = "xyzrgb"

    @property
    def needs_lifted(self) -> bool:
        return self in (Fusion.EARLY, Fusion.INTERMEDIATE, Fusion.LATE)


@dataclass(frozen=True)
class BackboneConfig:
    centroid_counts: tuple = (256, 64, 16, 8)
    radii: tuple = (0.1, 0.2, 0.4, 0.8)
    group_sizes: tuple = (32, 32, 16, 8)
    sa_mlps: tuple = ((32, 32, 64), (64, 64, 128), (128, 128, 128), (128, 128, 128))
    # ordered from the coarsest level back to full resolution
    fp_mlps: tuple = ((128, 128), (128, 128), (128, 64), (64, 64))
    head_channels: int = 64
    num_classes: int = 6
    use_xyz: bool = True

    def __post_init__(self):
        n = len(self.centroid_counts)
        if n < 1:
            raise ValidationError("need at least one set abstraction layer")
        if not (len(self.radii) == len(self.group_sizes) == len(self.sa_mlps) == len(self.fp_mlps) == n):
            raise ValidationError("radii, group_sizes, sa_mlps and fp_mlps need one entry per level")
        if any(a <= b for a, b in zip(self.centroid_counts[:-1], self.centroid_counts[1:])):
            raise ValidationError("centroid_counts must be strictly decreasing")
        if min(self.radii) <= 0 or min(self.group_sizes) < 1 or min(self.centroid_counts) < 1:
            raise ValidationError("radii, group sizes and centroid counts must be positive")
        for mlp in tuple(self.sa_mlps) + tuple(self.fp_mlps):
            if len(mlp) == 0 or min(mlp) < 1:
                raise ValidationError("MLP channel lists must be non-empty and positive")
        if self.num_classes < 1 or self.head_channels < 1:
            raise ValidationError("num_classes and head_channels must be positive")


FULL_SCALE = BackboneConfig(
    centroid_counts=(1024, 256, 64, 16),
    sa_mlps=((32, 32, 64), (64, 64, 128), (128, 128, 256), (256, 256, 512)),
    fp_mlps=((256, 256), (256, 256), (256, 128), (128, 128, 128)),
    group_sizes=(32, 32, 32, 32),
    head_channels=128,
)


@dataclass(eq=False)
class ChunkGeometry:
    """Flattened per-level geometry for ``batch`` chunks of ``n`` points each.

    ``positions[l]`` holds level-l points (level 0 is the input). For SA layer
    l, ``groups[l]`` indexes rows of level l and ``rel[l]`` holds the grouped
    offsets from each centroid divided by the layer radius. For the FP step
    from level l+1 to level l, ``interp_idx[l]`` indexes level l+1 rows and
    ``interp_w[l]`` holds the normalised inverse-square-distance weights.
    """

    batch: int
    positions: list = field(default_factory=list)
    groups: list = field(default_factory=list)
    rel: list = field(default_factory=list)
    interp_idx: list = field(default_factory=list)
    interp_w: list = field(default_factory=list)


def interpolation_weights(fine: np.ndarray, coarse: np.ndarray, k: int = 3):
    """3-NN inverse squared distance weights; an exact match takes all the weight."""
    if len(coarse) < k:
        raise SizeError(f"interpolation needs at least {k} coarse points, got {len(coarse)}")
    idx, d2 = knn(fine, coarse, k)
    exact = d2[:, 0] <= 1e-20
    w = 1.0 / np.maximum(d2, 1e-20)
    w /= w.sum(axis=1, keepdims=True)
    w[exact] = 0.0
    w[exact, 0] = 1.0
    return idx, w


def build_geometry(positions, config: BackboneConfig) -> ChunkGeometry:
    """Sampling, grouping and interpolation structure for (B, N, 3) or (N, 3) positions."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim == 2:
        pos = pos[None]
    if pos.ndim != 3 or pos.shape[2] != 3:
        raise ShapeError(f"positions must be (B, N, 3), got {pos.shape}")
    b, n, _ = pos.shape
    if n < config.centroid_counts[0]:
        raise SizeError(f"chunk has {n} points, first layer samples {config.centroid_counts[0]}")
    geom = ChunkGeometry(b)
    levels = [pos]
    groups = [[] for _ in config.centroid_counts]
    rel = [[] for _ in config.centroid_counts]
    for l, (m, r, s) in enumerate(zip(config.centroid_counts, config.radii, config.group_sizes)):
        nxt = []
        for i in range(b):
            p = levels[l][i]
            cidx = farthest_point_sampling(p, m)
            c = p[cidx]
            g = ball_query(c, p, r, s)
            nxt.append(c)
            groups[l].append(g + i * p.shape[0])
            rel[l].append((p[g] - c[:, None, :]) / r)
        levels.append(np.stack(nxt))
    for l in range(len(config.centroid_counts)):
        iw = [interpolation_weights(levels[l][i], levels[l + 1][i]) for i in range(b)]
        nc = levels[l + 1].shape[1]
        geom.interp_idx.append(np.concatenate([ix + i * nc for i, (ix, _) in enumerate(iw)]))
        geom.interp_w.append(np.concatenate([w for _, w in iw]))
        geom.groups.append(np.concatenate(groups[l]))
        geom.rel.append(np.concatenate(rel[l]))
    geom.positions = [lv.reshape(-1, 3) for lv in levels]
    return geom


class SetAbstraction(Module):
    """Group around sampled centroids, shared MLP on (offset, feature), max over the group."""

    def __init__(self, in_channels: int, mlp, rng, use_xyz: bool = True, dtype=np.float32):
        super().__init__()
        cin = in_channels + (3 if use_xyz else 0)
        if cin < 1:
            raise ValidationError("set abstraction layer has no input channels")
        self.mlp = SharedMLP((cin,) + tuple(mlp), rng, dtype=dtype)
        self.use_xyz = use_xyz
        self.out_channels = mlp[-1]

    def __call__(self, features, groups: np.ndarray, rel: np.ndarray) -> Tensor:
        parts = []
        dtype = self.mlp.layers[0].weight.dtype
        if self.use_xyz:
            parts.append(Tensor(rel.astype(dtype)))
        if features is not None:
            parts.append(ops.gather_rows(features, groups))
        x = parts[0] if len(parts) == 1 else ops.concat(parts, axis=-1)
        return ops.reduce_max(self.mlp(x), axis=1)


class FeaturePropagation(Module):
    """Interpolate coarse features onto fine points, append skip features, shared MLP."""

    def __init__(self, in_channels: int, mlp, rng, dtype=np.float32):
        super().__init__()
        self.mlp = SharedMLP((in_channels,) + tuple(mlp), rng, dtype=dtype)
        self.out_channels = mlp[-1]

    def __call__(self, coarse, skip, idx: np.ndarray, w: np.ndarray) -> Tensor:
        g = ops.gather_rows(coarse, idx)
        x = ops.reduce_sum(ops.mul(g, w[:, :, None].astype(g.dtype)), axis=1)
        if skip is not None:
            x = ops.concat([x, skip], axis=-1)
        return self.mlp(x)


def interpolate(coarse, idx, w):
    """Inverse-distance interpolation alone, as plain arrays."""
    return np.einsum("nkc,nk->nc", np.asarray(coarse)[idx], w)


class Encoder(Module):
    def __init__(self, in_channels: int, config: BackboneConfig, rng, use_xyz: bool, dtype):
        super().__init__()
        self.layers = []
        c = in_channels
        self.channels = [in_channels]
        for mlp in config.sa_mlps:
            layer = SetAbstraction(c, mlp, rng, use_xyz, dtype)
            self.layers.append(layer)
            c = layer.out_channels
            self.channels.append(c)

    def __call__(self, x0, geom: ChunkGeometry) -> list:
        outs = [x0]
        x = x0
        for l, layer in enumerate(self.layers):
            x = layer(x, geom.groups[l], geom.rel[l])
            outs.append(x)
        return outs


class Decoder(Module):
    def __init__(self, skip_channels, config: BackboneConfig, rng, dtype):
        super().__init__()
        # skip_channels[l] is the width of level-l encoder output (0 = input level)
        n = len(config.sa_mlps)
        c = skip_channels[n]
        self.layers = []
        for j, mlp in enumerate(config.fp_mlps):
            l = n - 1 - j
            layer = FeaturePropagation(c + skip_channels[l], mlp, rng, dtype)
            self.layers.append(layer)
            c = layer.out_channels
        self.out_channels = c

    def __call__(self, levels, geom: ChunkGeometry):
        n = len(self.layers)
        x = levels[n]
        for j, layer in enumerate(self.layers):
            l = n - 1 - j
            x = layer(x, levels[l], geom.interp_idx[l], geom.interp_w[l])
        return x


def _cat(parts):
    parts = [p for p in parts if p is not None]
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else ops.concat(parts, axis=-1)


class FusionModel(Module):
    """Per-point segmentation network with one of the fusion wirings.

    * early: image features join the coordinates as input of the first layer.
    * intermediate: a geometry encoder and an image-feature encoder run over
      the same points; one decoder reads both through its skip connections.
    * late: geometry-only encoder-decoder, image features appended right
      before the classification head.
    * xyz / xyzrgb: no image features; coordinates alone or with point color.

    With ``use_xyz`` off, neither absolute nor relative coordinates are fed
    as features; only the grouping structure carries geometry.
    """

    def __init__(self, fusion, config: BackboneConfig = BackboneConfig(), lifted_channels: int = 64,
                 rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fusion = Fusion(fusion)
        self.fusion = fusion
        self.config = config
        self.lifted_channels = lifted_channels if fusion.needs_lifted else 0
        xyz = 3 if config.use_xyz else 0
        if fusion == Fusion.XYZ_ONLY and not config.use_xyz:
            raise ValidationError("xyz-only model without coordinates has no input")
        self.geo = None
        self.img = None
        if fusion == Fusion.EARLY:
            self.geo = Encoder(xyz + lifted_channels, config, rng, config.use_xyz, dtype)
        elif fusion == Fusion.XYZ_RGB:
            self.geo = Encoder(xyz + 3, config, rng, config.use_xyz, dtype)
        elif fusion == Fusion.INTERMEDIATE:
            self.geo = Encoder(xyz, config, rng, config.use_xyz, dtype)
            self.img = Encoder(lifted_channels, config, rng, config.use_xyz, dtype)
        else:
            self.geo = Encoder(xyz, config, rng, config.use_xyz, dtype)
        skip = list(self.geo.channels)
        if self.img is not None:
            skip = [a + b for a, b in zip(skip, self.img.channels)]
        self.dec = Decoder(skip, config, rng, dtype)
        c = self.dec.out_channels + (lifted_channels if fusion == Fusion.LATE else 0)
        self.head1 = Linear(c, config.head_channels, rng, bias=False, dtype=dtype)
        self.head_bn = BatchNorm(config.head_channels, dtype=dtype)
        self.head2 = Linear(config.head_channels, config.num_classes, rng, dtype=dtype)

    @property
    def dtype(self):
        return self.head2.weight.dtype

    def __call__(self, geom: ChunkGeometry, xyz=None, lifted=None, rgb=None) -> Tensor:
        """Logits for all level-0 rows of ``geom``.

        ``xyz`` are the normalised chunk coordinates (rows, 3); ``lifted`` the
        distilled image features (rows, C) as array or Tensor; ``rgb`` the point
        colors for the xyzrgb variant.
        """
        f = self.fusion
        rows = geom.positions[0].shape[0]
        if f.needs_lifted:
            if lifted is None:
                raise ValidationError(f"{f.value} fusion needs lifted image features")
            if lifted.shape != (rows, self.lifted_channels):
                raise ShapeError(f"lifted features must be ({rows}, {self.lifted_channels}), "
                                 f"got {lifted.shape}")
            lifted = lifted if isinstance(lifted, Tensor) else Tensor(np.asarray(lifted, self.dtype))
        elif lifted is not None:
            raise ValidationError(f"{f.value} model takes no lifted features")
        if f == Fusion.XYZ_RGB and (rgb is None or np.shape(rgb) != (rows, 3)):
            raise ValidationError("xyzrgb model needs per-point rgb of shape (rows, 3)")
        if f != Fusion.XYZ_RGB and rgb is not None:
            raise ValidationError(f"{f.value} model takes no rgb input")
        x = None
        if self.config.use_xyz:
            if xyz is None or np.shape(xyz) != (rows, 3):
                raise ShapeError(f"xyz must be ({rows}, 3)")
            x = Tensor(np.asarray(xyz, dtype=self.dtype))

        if f == Fusion.EARLY:
            levels = self.geo(_cat([x, lifted]), geom)
        elif f == Fusion.XYZ_RGB:
            levels = self.geo(_cat([x, Tensor(np.asarray(rgb, dtype=self.dtype))]), geom)
        elif f == Fusion.INTERMEDIATE:
            a = self.geo(x, geom)
            b = self.img(lifted, geom)
            levels = [_cat([u, v]) for u, v in zip(a, b)]
        else:
            levels = self.geo(x, geom)
        h = self.dec(levels, geom)
        if f == Fusion.LATE:
            h = ops.concat([h, lifted], axis=-1)
        h = ops.relu(self.head_bn(self.head1(h)))
        return self.head2(h)


def model_forward(model: FusionModel, positions, xyz=None, lifted=None, rgb=None,
                  training: bool = False) -> np.ndarray:
    """Logits (N, num_classes) for one chunk given as plain arrays."""
    geom = build_geometry(positions, model.config)
    was = model.training
    model.train(training)
    with no_grad():
        out = model(geom, xyz, lifted, rgb)
    model.train(was)
    return out.data
