"""Chunk sampling, batch assembly, training loop and sliding-window inference."""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from .core import PointCloud, Pose, knn
from .errors import DependencyError, NumericError, SizeError, ValidationError
from .lift import Aggregator, AggregatorConfig, build_dense
from .net2d import Unet2d
from .nn import Module, Sgd, SgdConfig, Tensor, no_grad, ops
from .pointnet2 import BackboneConfig, Fusion, FusionModel, build_geometry
from .scene import IGNORE_LABEL
from .viewsel import build_coverage_index, coverage, greedy_select


@dataclass(frozen=True)
class ChunkSpec:
    """A square xy column of a scene and the fixed-size point sample drawn from it."""

    origin_xy: np.ndarray
    size: float
    point_indices: np.ndarray
    sampled: np.ndarray

    def __post_init__(self):
        if self.size <= 0:
            raise ValidationError("chunk size must be positive")
        if len(self.point_indices) == 0:
            raise SizeError("chunk contains no points")
        if not np.all(np.isin(self.sampled, self.point_indices)):
            raise ValidationError("sampled indices must come from the chunk")

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin_xy, dtype=np.float64) + self.size / 2


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    chunks_per_epoch: int = 16
    batch_size: int = 4
    sgd: SgdConfig = SgdConfig()
    views_m: int = 3
    n_rgb: int = 737
    seed: int = 0
    freeze_2d: bool = True
    class_weights: bool = True
    chunk_size: float = 1.5
    n_chunk: int = 2048
    min_annotated: float = 0.3
    max_tries: int = 100
    rotate: bool = True
    eval_every: int = 10
    eval_stride: float = 0.5

    def __post_init__(self):
        for name in ("epochs", "chunks_per_epoch", "batch_size", "views_m", "n_rgb", "n_chunk",
                     "max_tries", "eval_every"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.chunk_size <= 0 or self.eval_stride <= 0:
            raise ValidationError("chunk_size and eval_stride must be positive")
        if not 0 <= self.min_annotated <= 1:
            raise ValidationError("min_annotated must lie in [0, 1]")


# ---------------------------------------------------------------- chunks

def chunk_members(positions: np.ndarray, origin_xy, size: float) -> np.ndarray:
    """Indices of points whose xy lies in the closed square ``[origin, origin + size]``."""
    o = np.asarray(origin_xy, dtype=np.float64)
    xy = positions[:, :2]
    inside = np.all((xy >= o) & (xy <= o + size), axis=1)
    return np.flatnonzero(inside)


def sample_chunk_points(indices: np.ndarray, n: int, rng) -> np.ndarray:
    """Exactly ``n`` indices: a subset when there are enough, otherwise all of
    them plus random repeats."""
    if len(indices) == 0:
        raise SizeError("cannot sample from an empty chunk")
    if len(indices) >= n:
        return rng.choice(indices, n, replace=False)
    extra = rng.choice(indices, n - len(indices), replace=True)
    return np.concatenate([indices, extra])


def make_chunk(positions, origin_xy, size: float, n: int, rng) -> ChunkSpec | None:
    members = chunk_members(positions, origin_xy, size)
    if len(members) == 0:
        return None
    return ChunkSpec(np.asarray(origin_xy, dtype=np.float64), size, members,
                     sample_chunk_points(members, n, rng))


def z_rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_about(center_xy, theta: float) -> Pose:
    """Rigid rotation about the vertical line through ``center_xy``."""
    r = z_rotation(theta)
    c = np.array([center_xy[0], center_xy[1], 0.0])
    return Pose(r, c - r @ c)


def sample_train_chunk(scene, rng, size: float = 1.5, n: int = 2048, min_annotated: float = 0.3,
                       max_tries: int = 100, rotate: bool = True):
    """Random training chunk centred on a random scene point.

    Chunks with fewer than ``min_annotated`` labelled points are rejected; after
    ``max_tries`` the best candidate seen is taken. Returns the chunk and the
    rotation (a :class:`Pose`) to apply to its points and to the selected
    cameras.
    """
    pos = scene.points.positions
    labels = scene.points.labels
    if len(pos) == 0:
        raise SizeError("scene has no points")
    best, best_frac = None, -1.0
    for _ in range(max_tries):
        center = pos[rng.integers(len(pos)), :2]
        members = chunk_members(pos, center - size / 2, size)
        frac = float(np.mean(labels[members] != IGNORE_LABEL))
        if frac > best_frac:
            best, best_frac = (center, members), frac
        if frac >= min_annotated:
            break
    if best_frac <= 0:
        raise ValidationError(f"scene {scene.name}: no annotated chunk found in {max_tries} tries")
    center, members = best
    chunk = ChunkSpec(center - size / 2, size, members, sample_chunk_points(members, n, rng))
    theta = rng.uniform(0, 2 * np.pi) if rotate else 0.0
    return chunk, rotate_about(center, theta)


def inference_origins(lo: float, hi: float, size: float, stride: float) -> np.ndarray:
    """Window starts ``lo + i * stride`` below ``hi - size`` plus one window flush with ``hi``.

    Doubling the stride yields a subset of the origins.
    """
    if stride <= 0:
        raise ValidationError("stride must be positive")
    last = max(lo, hi - size)
    count = int(np.ceil((last - lo) / stride - 1e-9)) if last > lo else 0
    out = [lo + i * stride for i in range(count)]
    out.append(last)
    return np.array(out)


def _chunk_rng(seed: int, scene_lo, origin) -> np.random.Generator:
    # keyed by the window's offset in millimetres so the same window draws the
    # same sample regardless of which stride produced it
    off = np.round((np.asarray(origin) - np.asarray(scene_lo)) * 1000).astype(np.int64)
    return np.random.default_rng([int(seed), int(off[0]), int(off[1])])


def inference_chunks(positions: np.ndarray, stride: float = 0.5, size: float = 1.5, n: int = 2048,
                     seed: int = 0) -> list:
    """Non-empty chunks of the sliding-window grid over the cloud's xy extent."""
    if len(positions) == 0:
        raise SizeError("empty scene")
    lo = positions[:, :2].min(axis=0)
    hi = positions[:, :2].max(axis=0)
    chunks = []
    for ox in inference_origins(lo[0], hi[0], size, stride):
        for oy in inference_origins(lo[1], hi[1], size, stride):
            o = np.array([ox, oy])
            c = make_chunk(positions, o, size, n, _chunk_rng(seed, lo, o))
            if c is not None:
                chunks.append(c)
    return chunks


# ---------------------------------------------------------------- model bundle

class SegmentationModel(Module):
    """Image encoder-decoder, lifting module and point backbone under one roof."""

    def __init__(self, fusion, backbone: BackboneConfig = BackboneConfig(),
                 aggregator: AggregatorConfig = AggregatorConfig(), net2d: Unet2d | None = None,
                 rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fusion = Fusion(fusion)
        self.fusion = fusion
        self.net2d = net2d if fusion.needs_lifted else None
        self.aggregator = None
        lifted = 0
        if fusion.needs_lifted:
            if net2d is None:
                raise DependencyError(f"{fusion.value} fusion needs a 2D network")
            self.aggregator = Aggregator(net2d.feature_dim, aggregator, rng, dtype)
            lifted = self.aggregator.out_channels
        self.backbone = FusionModel(fusion, backbone, lifted, rng, dtype)

    def trainable_parameters(self, freeze_2d: bool) -> list:
        params = self.backbone.parameters()
        if self.aggregator is not None:
            params = self.aggregator.parameters() + params
        if self.net2d is not None and not freeze_2d:
            # the 2D class head plays no part in lifting
            head = {id(p) for p in self.net2d.head.parameters()}
            params = [p for p in self.net2d.parameters() if id(p) not in head] + params
        return params


@dataclass(eq=False)
class FeatureCache:
    """Eval-mode 2D feature maps per scene, computed once for a frozen encoder."""

    net2d: Unet2d
    maps: dict = field(default_factory=dict)

    def get(self, scene) -> np.ndarray:
        if scene.name not in self.maps:
            rgb = np.stack([f.rgb for f in scene.frames])
            self.maps[scene.name] = self.net2d.features(rgb)
        return self.maps[scene.name]


def _coverage_index(scene):
    if scene.coverage is None:
        scene.coverage = build_coverage_index(scene.points, scene.frames)
    return scene.coverage


def select_views(scene, chunk: ChunkSpec, m: int) -> list:
    """Greedy frame choice (positions in ``scene.frames``) for the chunk's xy box."""
    index = _coverage_index(scene)
    target = index.in_xy_box(chunk.origin_xy, chunk.origin_xy + chunk.size)
    fids = greedy_select(index, target, m)
    pos_of = {f.frame_id: i for i, f in enumerate(scene.frames)}
    return [pos_of[f] for f in fids]


@dataclass(eq=False)
class ChunkInput:
    """Everything one chunk contributes to a batch, in normalised coordinates."""

    xyz: np.ndarray
    labels: np.ndarray
    rgb: np.ndarray | None
    frames: list
    pixel_rows: np.ndarray | None
    neighbours: tuple | None
    dense_count: int


def prepare_chunk(scene, chunk: ChunkSpec, fusion: Fusion, views_m: int, n_rgb: int, k: int,
                  rng, rotation: Pose | None = None) -> ChunkInput:
    """Normalise a chunk and, for image fusion, build its dense cloud and k-NN.

    Coordinates are rotated by ``rotation`` (if any) and then shifted so the
    chunk centre sits at the xy origin and the scene floor at z = 0. The
    selected frames' poses get the same rotation, so unprojection lands on
    the rotated points.
    """
    pts = scene.points.positions[chunk.sampled]
    shift = np.array([chunk.center[0], chunk.center[1], scene.floor_z])
    rot = rotation if rotation is not None else Pose.identity()
    xyz = rot.apply(pts) - shift
    labels = scene.points.labels[chunk.sampled]
    rgb = None
    if fusion == Fusion.XYZ_RGB:
        if scene.colors is None:
            raise DependencyError(f"scene {scene.name} has no point colors")
        rgb = scene.colors[chunk.sampled]
    if not fusion.needs_lifted:
        return ChunkInput(xyz, labels, rgb, [], None, None, 0)
    views = select_views(scene, chunk, views_m)
    h, w = scene.frames[0].shape
    frames, id_maps = [], []
    for slot, fi in enumerate(views):
        f = scene.frames[fi]
        frames.append(f.with_pose(rot.compose(f.pose)))
        # carry (view slot, pixel) provenance through unprojection as a feature
        id_maps.append((np.arange(h * w) + slot * h * w).reshape(h, w, 1))
    dense = build_dense(frames, id_maps, n_rgb, rng)
    rows = dense.features[:, 0].astype(np.int64)
    slot = rows // (h * w)
    pixel_rows = np.asarray(views)[slot] * (h * w) + rows % (h * w)
    agg_idx, dist = Aggregator.neighbours_for(xyz, dense.positions - shift, k)
    return ChunkInput(xyz, labels, rgb, views, pixel_rows, (agg_idx, dist), dense.n)


def _lift_batch(model: SegmentationModel, scenes, inputs, feature_source):
    """Aggregated image features for a batch of chunks, stacked by rows."""
    feats, idx, dists = [], [], []
    offset = 0
    for scene, ci in zip(scenes, inputs):
        table = feature_source(scene)
        feats.append(ops.gather_rows(table, ci.pixel_rows))
        a, d = ci.neighbours
        idx.append(a + offset)
        dists.append(d)
        offset += ci.dense_count
    dense = feats[0] if len(feats) == 1 else ops.concat(feats, axis=0)
    return model.aggregator(dense, np.concatenate(idx), np.concatenate(dists))


def forward_batch(model: SegmentationModel, scenes, inputs, feature_source) -> Tensor:
    """Logits for stacked chunks (rows = chunks x n_chunk)."""
    xyz = np.stack([ci.xyz for ci in inputs])
    geom = build_geometry(xyz, model.backbone.config)
    lifted = None
    if model.fusion.needs_lifted:
        lifted = _lift_batch(model, scenes, inputs, feature_source)
    rgb = None
    if model.fusion == Fusion.XYZ_RGB:
        rgb = np.concatenate([ci.rgb for ci in inputs])
    return model.backbone(geom, xyz.reshape(-1, 3), lifted, rgb)


def class_weights_from(scenes, num_classes: int) -> np.ndarray:
    """Inverse log-frequency weights ``1 / log(1.2 + freq)`` over annotated points."""
    counts = np.zeros(num_classes)
    for s in scenes:
        lab = s.points.labels
        lab = lab[lab != IGNORE_LABEL]
        counts += np.bincount(lab, minlength=num_classes)[:num_classes]
    freq = counts / max(counts.sum(), 1)
    return 1.0 / np.log(1.2 + freq)


def _frozen_source(cache: FeatureCache):
    def source(scene):
        maps = cache.get(scene)
        return Tensor(maps.reshape(-1, maps.shape[-1]))
    return source


def _live_source(net2d: Unet2d, scenes, inputs):
    """Run the 2D network (with gradients) on just the frames the batch uses."""
    tables = {}
    for scene, ci in zip(scenes, inputs):
        key = id(scene)
        if key in tables:
            continue
        used = sorted({v for s2, c2 in zip(scenes, inputs) if s2 is scene for v in c2.frames})
        rgb = np.stack([scene.frames[v].rgb for v in used]).astype(np.float32)
        f, _ = net2d(rgb)
        c = f.shape[-1]
        h, w = scene.frames[0].shape
        # scatter the computed maps into a full-size table indexed like the cache
        table_rows = (np.asarray(used)[:, None] * (h * w) + np.arange(h * w)).ravel()
        tables[key] = (f, table_rows, c, len(scene.frames) * h * w)

    def source(scene):
        f, table_rows, c, n = tables[id(scene)]
        return ops.scatter_add_rows(ops.reshape(f, (-1, c)), table_rows, n)
    return source


# ---------------------------------------------------------------- training

def train(train_scenes, val_scenes, fusion, config: TrainConfig = TrainConfig(),
          net2d: Unet2d | None = None, backbone: BackboneConfig = BackboneConfig(),
          aggregator: AggregatorConfig = AggregatorConfig(), num_classes: int | None = None,
          class_names=None, log=None):
    """Train a segmentation model; returns ``(model, metrics_rows)``.

    ``metrics_rows`` holds one ``train`` row per epoch (mean step loss) and a
    ``val`` row with per-class IoU every ``eval_every`` epochs and after the
    last one.
    """
    from .eval import evaluate_scenes

    fusion = Fusion(fusion)
    if not train_scenes:
        raise ValidationError("no training scenes")
    if num_classes is None:
        num_classes = backbone.num_classes
    if backbone.num_classes != num_classes:
        raise ValidationError("backbone num_classes disagrees with the corpus")
    if fusion.needs_lifted and net2d is None:
        raise DependencyError("image fusion needs a pretrained 2D network (run pretrain2d)")
    if net2d is not None and fusion.needs_lifted and not config.freeze_2d:
        net2d = copy.deepcopy(net2d)
    rng = np.random.default_rng([config.seed, 7])
    model = SegmentationModel(fusion, backbone, aggregator, net2d,
                              rng=np.random.default_rng([config.seed, 11]))
    params = model.trainable_parameters(config.freeze_2d)
    opt = Sgd(params, config.sgd)
    weights = class_weights_from(train_scenes, num_classes) if config.class_weights else None
    cache = FeatureCache(model.net2d) if model.net2d is not None and config.freeze_2d else None
    if model.net2d is not None:
        model.net2d.train(not config.freeze_2d)
    rows = []
    k = aggregator.k
    for epoch in range(config.epochs):
        t0 = time.time()
        losses = []
        done = 0
        while done < config.chunks_per_epoch:
            nb = min(config.batch_size, config.chunks_per_epoch - done)
            scenes, inputs = [], []
            for _ in range(nb):
                scene = train_scenes[int(rng.integers(len(train_scenes)))]
                chunk, rot = sample_train_chunk(scene, rng, config.chunk_size, config.n_chunk,
                                                config.min_annotated, config.max_tries,
                                                config.rotate)
                inputs.append(prepare_chunk(scene, chunk, fusion, config.views_m, config.n_rgb, k,
                                            rng, rot))
                scenes.append(scene)
            done += nb
            if cache is not None:
                source = _frozen_source(cache)
            elif model.net2d is not None:
                source = _live_source(model.net2d, scenes, inputs)
            else:
                source = None
            model.backbone.train()
            logits = forward_batch(model, scenes, inputs, source)
            labels = np.concatenate([ci.labels for ci in inputs])
            loss = ops.softmax_cross_entropy(logits, labels, weights, IGNORE_LABEL)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step(epoch)
            losses.append(float(loss.data))
        row = {"epoch": epoch + 1, "split": "train", "loss": float(np.mean(losses)),
               "miou": None, "ious": None}
        rows.append(row)
        if log is not None:
            log(f"epoch {epoch + 1} loss {row['loss']:.4f} ({time.time() - t0:.1f}s)")
        last = epoch + 1 == config.epochs
        if val_scenes and ((epoch + 1) % config.eval_every == 0 or last):
            res = evaluate_scenes(model, val_scenes, num_classes, views_m=config.views_m,
                                  n_rgb=config.n_rgb, stride=config.eval_stride,
                                  size=config.chunk_size, n_chunk=config.n_chunk,
                                  seed=config.seed, cache=cache)
            rows.append({"epoch": epoch + 1, "split": "val", "loss": None, "miou": res.miou,
                         "ious": list(res.ious)})
            if log is not None:
                log(f"epoch {epoch + 1} val miou {res.miou:.4f}")
    model.eval()
    return model, rows


# ---------------------------------------------------------------- inference

@dataclass(eq=False)
class InferenceResult:
    labels: np.ndarray
    votes: np.ndarray
    chunks: list


def majority_vote(votes: np.ndarray) -> np.ndarray:
    """Row-wise argmax of a (N, K) vote-count table; ties go to the lowest class."""
    return np.argmax(votes, axis=1)


def infer_scene(scene, model: SegmentationModel, stride: float = 0.5, seed: int = 0,
                views_m: int = 3, n_rgb: int = 737, size: float = 1.5, n_chunk: int = 2048,
                batch: int = 8, cache: FeatureCache | None = None) -> InferenceResult:
    """Sliding-window labels for every scene point.

    Each window votes once for every distinct point it sampled. Points that
    received no vote take the label of the nearest point that did.
    """
    pos = scene.points.positions
    if len(pos) == 0:
        raise SizeError("empty scene")
    k_cls = model.backbone.config.num_classes
    chunks = inference_chunks(pos, stride, size, n_chunk, seed)
    votes = np.zeros((len(pos), k_cls), dtype=np.int64)
    if model.net2d is not None and cache is None:
        cache = FeatureCache(model.net2d)
    source = _frozen_source(cache) if cache is not None else None
    was = model.training
    model.eval()
    k = model.aggregator.config.k if model.aggregator is not None else 1
    with no_grad():
        for lo in range(0, len(chunks), batch):
            part = chunks[lo: lo + batch]
            inputs = []
            for c in part:
                rng = _chunk_rng(seed + 1, pos[:, :2].min(axis=0), c.origin_xy)
                inputs.append(prepare_chunk(scene, c, model.fusion, views_m, n_rgb, k, rng))
            logits = forward_batch(model, [scene] * len(part), inputs, source).data
            pred = np.argmax(logits.reshape(len(part), n_chunk, -1), axis=2)
            for c, p in zip(part, pred):
                uniq, first = np.unique(c.sampled, return_index=True)
                votes[uniq, p[first]] += 1
    model.train(was)
    labels = majority_vote(votes)
    voted = votes.sum(axis=1) > 0
    if not np.all(voted):
        src = np.flatnonzero(voted)
        if len(src) == 0:
            raise SizeError("no window produced a prediction")
        nn_idx, _ = knn(pos[~voted], pos[src], 1)
        labels[~voted] = labels[src[nn_idx[:, 0]]]
    return InferenceResult(labels, votes, chunks)


def chunk_view_report(scene, m: int, stride: float = 0.5, size: float = 1.5, n_chunk: int = 2048,
                      n_rgb: int = 737, seed: int = 0, threshold: float = 0.1) -> list:
    """Per inference window: selected frame ids and coverage of its points by
    the unprojection of those frames."""
    pos = scene.points.positions
    out = []
    for c in inference_chunks(pos, stride, size, n_chunk, seed):
        views = select_views(scene, c, m)
        rng = _chunk_rng(seed + 1, pos[:, :2].min(axis=0), c.origin_xy)
        h, w = scene.frames[0].shape
        dense = build_dense([scene.frames[v] for v in views],
                            [np.zeros((h, w, 1))] * len(views), n_rgb, rng)
        sparse = PointCloud(pos[c.point_indices])
        out.append({"origin": [float(c.origin_xy[0]), float(c.origin_xy[1])],
                    "frames": [scene.frames[v].frame_id for v in views],
                    "coverage": coverage(sparse, dense, threshold)})
    return out
