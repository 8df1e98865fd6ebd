import dataclasses

import numpy as np
import pytest

from viewfuse.core import PointCloud, Pose
from viewfuse.errors import DependencyError, SizeError, ValidationError
from viewfuse.lift import AggregatorConfig
from viewfuse.net2d import Unet2d, Unet2dConfig
from viewfuse.pipeline import (ChunkSpec, FeatureCache, SegmentationModel, TrainConfig,
                               _chunk_rng, _frozen_source, chunk_members, forward_batch,
                               inference_chunks, inference_origins, infer_scene, majority_vote,
                               prepare_chunk, rotate_about, sample_train_chunk, train,
                               z_rotation)
from viewfuse.pointnet2 import BackboneConfig, Fusion
from viewfuse.scene import IGNORE_LABEL, Scene

SMALL = BackboneConfig(centroid_counts=(64, 16, 8, 4), group_sizes=(16, 16, 8, 4),
                       sa_mlps=((8, 8), (8, 16), (16,), (16,)), fp_mlps=((16,), (16,), (8,), (8,)),
                       head_channels=8)
NET = Unet2dConfig(stage_channels=(4, 8, 8), feature_dim=8)
AGG = AggregatorConfig(mlp_channels=(8, 8))
FAST = TrainConfig(epochs=2, chunks_per_epoch=2, batch_size=2, n_chunk=256, eval_every=2,
                   eval_stride=1.0)


@pytest.fixture(scope="module")
def net2d():
    return Unet2d(NET, np.random.default_rng(0))


def model(fusion, net2d=None, seed=0):
    return SegmentationModel(fusion, SMALL, AGG, net2d, np.random.default_rng(seed)).eval()


def test_chunk_membership_bruteforce():
    rng = np.random.default_rng(0)
    pos = rng.uniform(0, 4, (2000, 3))
    pos[:10, :2] = [1.0, 1.0]  # on the boundary
    got = chunk_members(pos, (1.0, 0.5), 1.5)
    want = [i for i, p in enumerate(pos) if 1.0 <= p[0] <= 2.5 and 0.5 <= p[1] <= 2.0]
    assert got.tolist() == want


def test_chunk_spec_invariants(scene):
    rng = np.random.default_rng(1)
    chunk, _ = sample_train_chunk(scene, rng, n=512)
    xy = scene.points.positions[chunk.sampled, :2]
    assert len(chunk.sampled) == 512
    assert np.all(xy >= chunk.origin_xy) and np.all(xy <= chunk.origin_xy + 1.5)
    small = ChunkSpec(np.zeros(2), 1.5, np.arange(5), np.r_[np.arange(5), 0, 1])
    assert len(small.sampled) == 7
    with pytest.raises(ValidationError):
        ChunkSpec(np.zeros(2), 1.5, np.arange(5), np.array([9]))


def test_fully_annotated_first_chunk_accepted(scene):
    calls = []

    class Counting:
        def __init__(self, rng):
            self.rng = rng

        def integers(self, *a, **k):
            calls.append(1)
            return self.rng.integers(*a, **k)

        def __getattr__(self, name):
            return getattr(self.rng, name)

    sample_train_chunk(scene, Counting(np.random.default_rng(2)), n=64)
    assert len(calls) == 1


def test_unannotated_scene_rejected(scene):
    blank = dataclasses.replace(scene, points=PointCloud(
        scene.points.positions, scene.points.features,
        np.full(scene.points.n, IGNORE_LABEL)))
    with pytest.raises(ValidationError):
        sample_train_chunk(blank, np.random.default_rng(0), n=64, max_tries=5)


def test_zero_rotation_is_identity(scene):
    rng = np.random.default_rng(3)
    chunk, rot = sample_train_chunk(scene, rng, n=128, rotate=False)
    pts = np.random.default_rng(4).normal(size=(10, 3))
    np.testing.assert_array_equal(rot.apply(pts), pts)
    a = prepare_chunk(scene, chunk, Fusion.XYZ_ONLY, 3, 100, 3, rng)
    b = prepare_chunk(scene, chunk, Fusion.XYZ_ONLY, 3, 100, 3, rng, rot)
    np.testing.assert_array_equal(a.xyz, b.xyz)


def test_rotated_views_stay_aligned(scene):
    chunk, _ = sample_train_chunk(scene, np.random.default_rng(5), n=256, rotate=False)
    rot = rotate_about(chunk.center, 1.3)
    a = prepare_chunk(scene, chunk, Fusion.EARLY, 3, 300, 2, np.random.default_rng(6))
    b = prepare_chunk(scene, chunk, Fusion.EARLY, 3, 300, 2, np.random.default_rng(6), rot)
    # same pixels lifted, same neighbour distances; only the frame of reference turned
    assert np.array_equal(a.pixel_rows, b.pixel_rows)
    np.testing.assert_allclose(a.neighbours[1][..., 3], b.neighbours[1][..., 3], atol=1e-9)
    np.testing.assert_allclose(b.xyz[:, :2], a.xyz[:, :2] @ z_rotation(1.3)[:2, :2].T, atol=1e-9)


def test_inference_origins_and_stride_doubling():
    o1 = inference_origins(0.0, 4.2, 1.5, 0.5)
    o2 = inference_origins(0.0, 4.2, 1.5, 1.0)
    assert o1[-1] == pytest.approx(2.7) and o1[0] == 0.0
    assert set(np.round(o2, 9)) <= set(np.round(o1, 9))
    assert inference_origins(0.0, 1.0, 1.5, 0.5).tolist() == [0.0]


def test_stride_doubling_never_increases_counts(scene):
    pos = scene.points.positions

    def counts(stride):
        c = np.zeros(len(pos), dtype=int)
        for ch in inference_chunks(pos, stride, 1.5, 256, 0):
            c[np.unique(ch.sampled)] += 1
        return c

    a, b = counts(0.5), counts(1.0)
    assert np.all(b <= a)


def test_majority_vote_examples():
    assert majority_vote(np.array([[2, 1, 0], [0, 1, 1], [0, 0, 3]])).tolist() == [0, 1, 2]


def brute_force_votes(scene, m, stride, seed, n_chunk, views_m=3, n_rgb=737):
    pos = scene.points.positions
    cache = FeatureCache(m.net2d) if m.net2d is not None else None
    source = _frozen_source(cache) if cache is not None else None
    tally = [dict() for _ in range(len(pos))]
    k = m.aggregator.config.k if m.aggregator is not None else 1
    for c in inference_chunks(pos, stride, 1.5, n_chunk, seed):
        ci = prepare_chunk(scene, c, m.fusion, views_m, n_rgb, k,
                           _chunk_rng(seed + 1, pos[:, :2].min(0), c.origin_xy))
        pred = np.argmax(forward_batch(m, [scene], [ci], source).data, axis=1)
        seen = set()
        for idx, p in zip(c.sampled.tolist(), pred.tolist()):
            if idx in seen:
                continue
            seen.add(idx)
            tally[idx][p] = tally[idx].get(p, 0) + 1
    return tally


@pytest.mark.parametrize("fusion", [Fusion.XYZ_ONLY, Fusion.EARLY])
def test_vote_equals_bruteforce_tally(scene, net2d, fusion):
    m = model(fusion, net2d)
    res = infer_scene(scene, m, stride=1.0, n_chunk=256, batch=3)
    tally = brute_force_votes(scene, m, 1.0, 0, 256)
    for i in range(0, len(tally), 7):
        row = np.zeros(6, dtype=int)
        for c, v in tally[i].items():
            row[c] = v
        assert np.array_equal(res.votes[i], row)
        if row.sum():
            best = max(tally[i].items(), key=lambda cv: (cv[1], -cv[0]))[0]
            assert res.labels[i] == best
    assert res.labels.shape == (scene.points.n,)


def test_every_point_labeled_and_deterministic(scene):
    m = model(Fusion.XYZ_ONLY)
    a = infer_scene(scene, m, stride=1.0, n_chunk=256)
    b = infer_scene(scene, m, stride=1.0, n_chunk=256)
    assert a.labels.shape == (scene.points.n,) and np.all((a.labels >= 0) & (a.labels < 6))
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.votes, b.votes)
    unvoted = a.votes.sum(1) == 0
    if np.any(unvoted):
        pos = scene.points.positions
        voted = np.flatnonzero(~unvoted)
        i = np.flatnonzero(unvoted)[0]
        j = voted[np.argmin(((pos[voted] - pos[i]) ** 2).sum(1))]
        assert a.labels[i] == a.labels[j]


def test_single_chunk_scene_vote_is_identity(scene):
    small = scene.with_points(chunk_members(scene.points.positions, scene.points.positions[0, :2]
                                            - 0.3, 0.6))
    m = model(Fusion.XYZ_ONLY)
    res = infer_scene(small, m, stride=0.5, n_chunk=256)
    assert len(res.chunks) == 1
    c = res.chunks[0]
    pos = small.points.positions
    ci = prepare_chunk(small, c, m.fusion, 3, 737, 1, _chunk_rng(1, pos[:, :2].min(0), c.origin_xy))
    pred = np.argmax(forward_batch(m, [small], [ci], None).data, axis=1)
    first = {}
    for idx, p in zip(c.sampled.tolist(), pred.tolist()):
        first.setdefault(idx, p)
    for idx, p in first.items():
        assert res.labels[idx] == p


def test_empty_scene_rejected(scene):
    with pytest.raises(SizeError):
        infer_scene(scene.with_points(np.array([], dtype=np.int64)), model(Fusion.XYZ_ONLY))


def test_translation_invariance(scene, net2d):
    m = model(Fusion.EARLY, net2d)
    t = np.array([2.0, -4.0, 1.0])
    shift = Pose(np.eye(3), t)
    moved = Scene(scene.name, PointCloud(scene.points.positions + t, scene.points.features,
                                         scene.points.labels),
                  [f.with_pose(shift.compose(f.pose)) for f in scene.frames], scene.labels2d,
                  dataclasses.replace(scene.coverage,
                                      coarse_positions=scene.coverage.coarse_positions + t))
    chunk, _ = sample_train_chunk(scene, np.random.default_rng(7), n=256, rotate=False)
    moved_chunk = ChunkSpec(chunk.origin_xy + t[:2], chunk.size, chunk.point_indices, chunk.sampled)
    a = prepare_chunk(scene, chunk, m.fusion, 3, 300, 3, np.random.default_rng(8))
    b = prepare_chunk(moved, moved_chunk, m.fusion, 3, 300, 3, np.random.default_rng(8))
    np.testing.assert_allclose(a.xyz, b.xyz, atol=1e-9)
    src = _frozen_source(FeatureCache(net2d))
    la = forward_batch(m, [scene], [a], src).data
    lb = forward_batch(m, [moved], [b], src).data
    np.testing.assert_allclose(la, lb, rtol=1e-4, atol=1e-4)


def fixed_batch_loss(m, scenes, seed=9):
    from viewfuse.nn import no_grad, ops
    rng = np.random.default_rng(seed)
    k = m.aggregator.config.k if m.aggregator is not None else 1
    inputs = [prepare_chunk(s, sample_train_chunk(s, rng, n=256)[0], m.fusion, 3, 737, k, rng)
              for s in scenes]
    cache = FeatureCache(m.net2d) if m.net2d is not None else None
    with no_grad():
        m.backbone.train()
        logits = forward_batch(m, scenes, inputs, _frozen_source(cache) if cache else None)
        m.backbone.eval()
    labels = np.concatenate([ci.labels for ci in inputs])
    return float(ops.softmax_cross_entropy(logits, labels, None, IGNORE_LABEL).data)


def test_training_mechanics(tiny_corpus, net2d):
    tr, va = tiny_corpus["train"], tiny_corpus["val"]
    before = {k: v.copy() for k, v in net2d.state_dict().items()}
    cfg = dataclasses.replace(FAST, epochs=8, chunks_per_epoch=4, eval_every=8)
    m, rows = train(tr, va, "early", cfg, net2d, SMALL, AGG)
    after = m.net2d.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    init = SegmentationModel("early", SMALL, AGG, net2d, np.random.default_rng([cfg.seed, 11]))
    assert fixed_batch_loss(m, tr * 2) < fixed_batch_loss(init, tr * 2)
    val = [r for r in rows if r["split"] == "val"]
    assert len(val) == 1 and 0 <= val[0]["miou"] <= 1
    _, rows2 = train(tr, va, "early", cfg, net2d, SMALL, AGG)
    assert rows == rows2


def test_unfrozen_training_updates_a_copy(tiny_corpus, net2d):
    before = {k: v.copy() for k, v in net2d.state_dict().items()}
    cfg = dataclasses.replace(FAST, epochs=1, freeze_2d=False)
    m, _ = train(tiny_corpus["train"], [], "early", cfg, net2d, SMALL, AGG)
    assert all(np.array_equal(before[k], v) for k, v in net2d.state_dict().items())
    assert not all(np.array_equal(before[k], v) for k, v in m.net2d.state_dict().items())


def test_training_errors(tiny_corpus):
    with pytest.raises(DependencyError):
        train(tiny_corpus["train"], [], "early", FAST, None, SMALL, AGG)
    with pytest.raises(ValidationError):
        train([], [], "xyz", FAST, None, SMALL, AGG)
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0)
