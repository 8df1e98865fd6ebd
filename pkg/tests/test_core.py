import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_frame, random_pose
from viewfuse.core import (PointCloud, SpatialIndex, ball_query, farthest_point_sampling, knn,
                           knn_bruteforce, project, unproject)
from viewfuse.errors import ShapeError, SizeError, ValidationError


def fps_oracle(pos, m, start=0):
    chosen = [start]
    for _ in range(m - 1):
        best, best_d = None, -1.0
        for i in range(len(pos)):
            if i in chosen:
                continue
            d = min(float(np.sum((pos[i] - pos[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def test_unproject_principal_point():
    depth = np.zeros((5, 7))
    depth[2, 3] = 2.0
    cloud = unproject(make_frame(depth, cx=3.0, cy=2.0, fx=4.0, fy=4.0))
    np.testing.assert_allclose(cloud.positions, [[0.0, 0.0, 2.0]])


def test_unproject_pinhole_arithmetic():
    depth = np.zeros((3, 4))
    depth[1, 2] = 2.0
    cloud = unproject(make_frame(depth))
    np.testing.assert_allclose(cloud.positions, [[4.0, 2.0, 2.0]])


def test_unproject_no_valid_depth():
    cloud = unproject(make_frame(np.zeros((4, 4))))
    assert cloud.n == 0 and cloud.positions.shape == (0, 3)


def test_unproject_budget_and_features():
    rng = np.random.default_rng(0)
    depth = rng.random((6, 8)) + 0.5
    feats = np.arange(48, dtype=float).reshape(6, 8, 1)
    cloud = unproject(make_frame(depth), 10, rng, feats)
    assert cloud.n == 10
    assert len(np.unique(cloud.features)) == 10
    with pytest.raises(ShapeError):
        unproject(make_frame(depth), per_pixel_features=np.zeros((5, 8, 1)))


def test_project_examples():
    depth = np.ones((5, 7))
    frame = make_frame(depth, cx=3.0, cy=2.0, fx=4.0, fy=4.0)
    assert project((0, 0, 2.0), frame) == (3.0, 2.0, 2.0)
    assert project((0, 0, -1.0), frame) is None
    assert project((100.0, 0, 1.0), frame) is None
    u, v, d = project(unproject(frame).positions[9], frame)
    assert abs(u - 2) < 1e-9 and abs(v - 1) < 1e-9 and abs(d - 1) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_random_pose(seed):
    rng = np.random.default_rng(seed)
    depth = rng.uniform(0.1, 8.0, (9, 11)) * (rng.random((9, 11)) > 0.2)
    frame = make_frame(depth, random_pose(rng), fx=7.0, fy=6.0, cx=5.0, cy=4.0)
    pts = unproject(frame).positions
    v, u = np.divmod(np.flatnonzero(depth > 0), 11)
    for p, uu, vv, dd in zip(pts, u, v, depth[depth > 0]):
        pu, pv, pd = project(p, frame)
        assert abs(pu - uu) <= 1e-6 * max(1, uu) and abs(pv - vv) <= 1e-6 * max(1, vv)
        assert abs(pd - dd) <= 1e-6 * dd


def test_knn_examples():
    ref = np.array([[0.0, 0, 0], [1, 0, 0], [5, 0, 0]])
    idx, d2 = knn(np.array([[0.9, 0, 0]]), ref, 2)
    assert idx.tolist() == [[1, 0]]
    idx, d2 = knn(ref[2:], ref, 1)
    assert idx[0, 0] == 2 and d2[0, 0] == 0.0
    with pytest.raises(SizeError):
        knn(ref, ref, 4)


def test_knn_matches_bruteforce_random():
    rng = np.random.default_rng(1)
    ref = rng.random((200, 3))
    q = rng.random((50, 3))
    i1, d1 = knn(q, ref, 5)
    i2, d2 = knn_bruteforce(q, ref, 5)
    assert np.array_equal(i1, i2) and np.array_equal(d1, d2)


def test_knn_ties_lowest_index():
    # a lattice gives many equal distances
    g = np.stack(np.meshgrid(np.arange(4), np.arange(4), np.arange(2)), -1).reshape(-1, 3) * 1.0
    q = g[[5, 10]] + 0.5
    i1, _ = knn(q, g, 8)
    i2, _ = knn_bruteforce(q, g, 8)
    assert np.array_equal(i1, i2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 16), st.booleans())
def test_knn_property(seed, k, grid):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(k, 512))
    ref = rng.integers(0, 3, (n, 3)).astype(float) if grid else rng.normal(size=(n, 3))
    q = ref[rng.integers(0, n, 20)] + (0 if grid else rng.normal(0, 0.1, (20, 3)))
    i1, d1 = knn(q, ref, k)
    i2, d2 = knn_bruteforce(q, ref, k)
    assert np.array_equal(i1, i2)
    np.testing.assert_array_equal(d1, d2)


def test_spatial_index_nearest_distance():
    rng = np.random.default_rng(2)
    ref, q = rng.random((40, 3)), rng.random((10, 3))
    d = SpatialIndex(ref).nearest_distance(q)
    np.testing.assert_allclose(d, np.sqrt(((q[:, None] - ref[None]) ** 2).sum(-1)).min(1))


def test_fps_examples():
    line = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    assert farthest_point_sampling(line, 2).tolist() == [0, 2]
    assert sorted(farthest_point_sampling(line, 3).tolist()) == [0, 1, 2]
    with pytest.raises(SizeError):
        farthest_point_sampling(line, 4)


def test_fps_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(5):
        pos = rng.random((50, 3))
        assert farthest_point_sampling(pos, 8).tolist() == fps_oracle(pos, 8)
    dup = np.repeat(rng.random((4, 3)), 3, axis=0)
    out = farthest_point_sampling(dup, 12)
    assert len(set(out.tolist())) == 12
    assert out.tolist() == fps_oracle(dup, 12)


def test_fps_spread_beats_random():
    rng = np.random.default_rng(4)
    pos = rng.random((300, 3))

    def min_pair(ix):
        p = pos[ix]
        d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))
        return d[np.triu_indices(len(ix), 1)].min()

    best = min_pair(farthest_point_sampling(pos, 16))
    rand = [min_pair(rng.choice(300, 16, replace=False)) for _ in range(100)]
    assert best >= max(rand)


def test_ball_query_examples():
    pts = np.array([[0.1, 0, 0], [0, 0.2, 0], [5.0, 0, 0]])
    assert ball_query(np.zeros((1, 3)), pts, 0.5, 4).tolist() == [[0, 1, 0, 0]]
    assert ball_query(np.array([[4.0, 0, 0]]), pts, 0.5, 3).tolist() == [[2, 2, 2]]
    with pytest.raises(ValidationError):
        ball_query(np.zeros((1, 3)), pts, 0.0, 2)


def test_ball_query_membership_oracle():
    rng = np.random.default_rng(5)
    pos = rng.random((120, 3))
    cen = rng.random((15, 3))
    out = ball_query(cen, pos, 0.3, 200)
    for c, row in zip(cen, out):
        inside = np.flatnonzero(((pos - c) ** 2).sum(1) <= 0.09)
        assert row[: len(inside)].tolist() == inside.tolist()
        assert np.all(row[len(inside):] == inside[0])


def test_pointcloud_validation():
    with pytest.raises(ShapeError):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(ValidationError):
        PointCloud(np.array([[0.0, np.nan, 0]]))
    a = PointCloud(np.zeros((2, 3)), np.ones((2, 1)))
    b = PointCloud.concat([a, a])
    assert b.n == 4 and b.features.shape == (4, 1)
