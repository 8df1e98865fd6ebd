import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_frame
from oracles import greedy_oracle
from viewfuse.core import PointCloud, unproject
from viewfuse.errors import SizeError
from viewfuse.viewsel import (CoverageIndex, build_coverage_index, coverage, greedy_select,
                              load_coverage_index, save_coverage_index)


def index_from_sets(sets, n_coarse, frame_ids=None):
    frame_ids = list(range(len(sets))) if frame_ids is None else frame_ids
    return CoverageIndex(np.arange(n_coarse), np.zeros((n_coarse, 3)), frame_ids,
                         [np.array(sorted(s), dtype=np.int64) for s in sets], 0.1, 0.2)


def test_greedy_spec_example():
    idx = index_from_sets([{0, 1, 2}, {2, 3}, {3, 4}], 5)
    assert greedy_select(idx, range(5), 2) == [0, 2]


def test_greedy_dominating_and_identical():
    assert greedy_select(index_from_sets([{1}, {0, 1, 2}, {2}], 3), range(3), 1) == [1]
    assert greedy_select(index_from_sets([{0, 1}] * 4, 2), range(2), 3) == [0, 1, 2]


def test_greedy_zero_gain_still_emitted():
    idx = index_from_sets([set(), set(), {0}], 1)
    assert greedy_select(idx, [0], 3) == [2, 0, 1]
    with pytest.raises(SizeError):
        greedy_select(idx, [0], 4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_greedy_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    n_frames, n_coarse = int(rng.integers(1, 13)), int(rng.integers(1, 301))
    # few distinct sets so equal gains are common
    base = [set(np.flatnonzero(rng.random(n_coarse) < rng.random()).tolist()) for _ in range(3)]
    sets = [base[int(rng.integers(0, 3))] if rng.random() < 0.5 else
            set(np.flatnonzero(rng.random(n_coarse) < 0.3).tolist()) for _ in range(n_frames)]
    ids = rng.permutation(n_frames * 2)[:n_frames].tolist()
    target = np.flatnonzero(rng.random(n_coarse) < 0.7).tolist()
    m = int(rng.integers(1, n_frames + 1))
    out = greedy_select(index_from_sets(sets, n_coarse, ids), target, m)
    assert out == greedy_oracle(sets, ids, target, m)
    assert len(set(out)) == m
    cov = [len(set().union(*[sets[ids.index(f)] for f in out[:j]]) & set(target))
           for j in range(m + 1)]
    assert all(a <= b for a, b in zip(cov, cov[1:]))


def test_coverage_examples():
    rng = np.random.default_rng(0)
    pts = PointCloud(rng.random((20, 3)))
    assert coverage(pts, pts) == 1.0
    assert coverage(pts, PointCloud(np.zeros((0, 3)))) == 0.0
    half = PointCloud(np.concatenate([pts.positions[:10], pts.positions[:10]]))
    far = PointCloud(np.concatenate([pts.positions[:10], pts.positions[10:] + 5.0]))
    assert coverage(pts, half) >= 0.5
    assert coverage(pts, far) == 0.5


def test_coverage_threshold_is_strict():
    a = PointCloud(np.zeros((1, 3)))
    assert coverage(a, PointCloud(np.array([[0.1, 0, 0]]))) == 0.0
    assert coverage(a, PointCloud(np.array([[0.0999, 0, 0]]))) == 1.0


def test_coverage_index_toy_scene():
    # floor plane seen by a camera looking straight down from three heights
    xs = np.linspace(-1, 1, 21)
    floor = np.stack(np.meshgrid(xs, xs), -1).reshape(-1, 2)
    scene = PointCloud(np.c_[floor, np.zeros(len(floor))])
    flip = np.diag([1.0, -1.0, -1.0])
    from viewfuse.core import Pose
    frames = []
    for i, (x, h) in enumerate(((0.0, 1.0), (0.6, 0.5), (-0.5, 2.0))):
        pose = Pose(flip, [x, 0, h])
        frames.append(make_frame(np.full((12, 16), h), pose, fx=10, fy=10, cx=7.5, cy=5.5,
                                 frame_id=i))
    frames.append(make_frame(np.zeros((12, 16)), frame_id=3))
    index = build_coverage_index(scene, frames)
    coarse = index.coarse_positions
    for f, got in zip(frames, index.covered):
        pts = unproject(f).positions
        if len(pts) == 0:
            assert len(got) == 0
            continue
        d = np.sqrt(((coarse[:, None] - pts[None]) ** 2).sum(-1)).min(1)
        assert got.tolist() == np.flatnonzero(d < 0.1).tolist()


def test_coverage_index_self_frame(tmp_path):
    depth = np.full((6, 6), 2.0)
    f = make_frame(depth, fx=3, fy=3, cx=2.5, cy=2.5)
    pts = unproject(f)
    index = build_coverage_index(pts, [f], coarse_voxel=1e-3)
    assert index.covered[0].tolist() == list(range(index.num_coarse))
    save_coverage_index(index, tmp_path / "cov.json")
    back = load_coverage_index(tmp_path / "cov.json")
    assert back.frame_ids == index.frame_ids
    assert all(np.array_equal(a, b) for a, b in zip(back.covered, index.covered))
