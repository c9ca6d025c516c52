import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from gpsformer.errors import ArgumentError, ShapeError
from gpsformer.geometry import (PointSet, ball_query, canonical_order, farthest_point_sample, knn,
                                relation_encode, sq_dist3)


def random_cloud(rng, n, grid=False):
    if grid:
        # coarse lattice values force many exact distance ties
        return rng.integers(-2, 3, size=(n, 3)).astype(np.float64) * 0.25
    return rng.uniform(-1, 1, size=(n, 3))


# ----------------------------------------------------------------------- FPS

def test_fps_unit_square_example():
    sq = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    assert list(farthest_point_sample(sq, 2)) == [0, 3]


def test_fps_m_equals_n_is_permutation():
    pts = random_cloud(np.random.default_rng(0), 17)
    assert sorted(farthest_point_sample(pts, 17)) == list(range(17))


def test_fps_single_pick_is_centroid_farthest():
    pts = random_cloud(np.random.default_rng(1), 30)
    far = np.argmax(((pts - pts.mean(0)) ** 2).sum(1))
    assert farthest_point_sample(pts, 1)[0] == far


def test_fps_too_many():
    with pytest.raises(ArgumentError):
        farthest_point_sample(np.zeros((3, 3)), 4)


def test_fps_batched_matches_single():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, size=(3, 20, 3))
    batch = farthest_point_sample(pts, 7)
    for b in range(3):
        np.testing.assert_array_equal(batch[b], farthest_point_sample(pts[b], 7))


def test_fps_spreads_better_than_random_subsets():
    rng = np.random.default_rng(3)
    wins = 0
    for _ in range(100):
        pts = random_cloud(rng, 40)
        ids = farthest_point_sample(pts, 8)
        rand = rng.choice(40, 8, replace=False)

        def spread(sel):
            p = pts[sel]
            d = sq_dist3(p, p) + np.eye(len(sel)) * 1e9
            return d.min()
        wins += spread(ids) >= spread(rand)
    assert wins == 100


# ------------------------------------------------------------------------ KNN

def test_knn_1d_example():
    src = np.array([[0.0], [1.0], [4.0]])
    assert list(knn(np.array([[0.9]]), src, 2).indices[0]) == [1, 0]


def test_knn_self_first_and_full_sort():
    pts = random_cloud(np.random.default_rng(4), 12)
    tab = knn(pts, pts, 12)
    np.testing.assert_array_equal(tab.indices[:, 0], np.arange(12))
    d = sq_dist3(pts, pts)
    np.testing.assert_array_equal(tab.indices, np.argsort(d, axis=1, kind="stable"))


def test_knn_ties_prefer_lower_index():
    src = np.array([[1.0], [-1.0], [1.0], [0.0]])
    assert list(knn(np.array([[0.0]]), src, 3).indices[0]) == [3, 0, 1]


def test_knn_k_too_large():
    with pytest.raises(ArgumentError):
        knn(np.zeros((1, 3)), np.zeros((2, 3)), 3)


def test_knn_gram_path_matches_direct():
    rng = np.random.default_rng(5)
    q, s = rng.normal(size=(300, 64)), rng.normal(size=(300, 64))
    ref = np.argsort(((q[:, None] - s[None]) ** 2).sum(-1), axis=1, kind="stable")[:, :10]
    np.testing.assert_array_equal(knn(q, s, 10).indices, ref)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2 ** 31))
def test_knn_distances_non_decreasing(n, seed):
    rng = np.random.default_rng(seed)
    pts = random_cloud(rng, n, grid=seed % 2 == 0)
    k = int(rng.integers(1, n + 1))
    tab = knn(pts[:5], pts, k)
    d = np.take_along_axis(sq_dist3(pts[:5], pts), tab.indices, axis=1)
    assert np.all(np.diff(d, axis=1) >= 0)


# ----------------------------------------------------------------- ball query

def test_ball_query_example():
    src = np.array([[0, 0, 0], [0.05, 0, 0], [5, 0, 0]], dtype=float)
    tab = ball_query(src[:1], src, 0.1, 4)
    assert list(tab.indices[0]) == [0, 1, 0, 0]
    assert tab.valid_count[0] == 2


def test_ball_query_large_radius_all_valid():
    pts = random_cloud(np.random.default_rng(6), 10)
    tab = ball_query(pts, pts, 10.0, 10)
    assert np.all(tab.valid_count == 10)
    np.testing.assert_array_equal(tab.indices, np.tile(np.arange(10), (10, 1)))


def test_ball_query_isolated_self_only():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    tab = ball_query(pts, pts, 1e-9, 3)
    np.testing.assert_array_equal(tab.indices, [[0, 0, 0], [1, 1, 1], [2, 2, 2]])
    assert np.all(tab.valid_count == 1)


def test_ball_query_bad_args():
    with pytest.raises(ArgumentError):
        ball_query(np.zeros((1, 3)), np.zeros((1, 3)), 0.0, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.floats(0.05, 1.5), st.integers(1, 12), st.integers(0, 2 ** 31))
def test_ball_query_valid_inside_radius_and_padding(n, r, k, seed):
    rng = np.random.default_rng(seed)
    pts = random_cloud(rng, n)
    tab = ball_query(pts, pts, r, k)
    d = np.take_along_axis(sq_dist3(pts, pts), tab.indices, axis=1)
    valid = tab.valid
    assert np.all(d[valid] <= r * r)
    np.testing.assert_array_equal(np.where(valid, tab.indices, tab.indices[:, :1]), tab.indices)


# -------------------------------------------------------- oracle equivalence

@pytest.mark.parametrize("grid", [False, True])
def test_kernels_match_brute_force_oracles(grid):
    rng = np.random.default_rng(100 + grid)
    for _ in range(100):
        n = int(rng.integers(1, 65))
        pts = random_cloud(rng, n, grid=grid)
        m = int(rng.integers(1, n + 1))
        assert list(farthest_point_sample(pts, m)) == oracles.fps(pts, m)
        k = int(rng.integers(1, n + 1))
        q = pts[: min(n, 8)]
        assert knn(q, pts, k).indices.tolist() == oracles.knn(q, pts, k)
        r = float(rng.uniform(0.05, 1.0))
        kb = int(rng.integers(1, 33))
        tab = ball_query(q, pts, r, kb)
        idx, counts = oracles.ball_query(q, pts, r, kb)
        assert tab.indices.tolist() == idx
        assert tab.valid_count.tolist() == counts


# --------------------------------------------------------- permutation rules

@settings(max_examples=25, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2 ** 31))
def test_fps_and_knn_relabel_under_permutation(n, seed):
    rng = np.random.default_rng(seed)
    pts = random_cloud(rng, n, grid=seed % 3 == 0)
    perm = rng.permutation(n)
    m = int(rng.integers(1, n + 1))
    a = farthest_point_sample(pts, m)
    b = farthest_point_sample(pts[perm], m)
    # with duplicated points the chosen *positions* must agree
    np.testing.assert_array_equal(pts[a], pts[perm][b])
    np.testing.assert_array_equal(pts[canonical_order(pts)], pts[perm][canonical_order(pts[perm])])


# ---------------------------------------------------------- relation encoding

def test_relation_unit_offset():
    h = relation_encode(np.zeros((1, 3)), np.array([[[1.0, 0, 0]]]))
    np.testing.assert_array_equal(h[0, 0], [0, 0, 0, 1, 0, 0, 1, 0, 0, 1])


def test_relation_coincident_tail_zero():
    p = np.array([[0.3, -0.2, 0.9]])
    h = relation_encode(p, p[:, None, :])
    np.testing.assert_array_equal(h[0, 0, 6:], 0)


def test_relation_distance_value():
    h = relation_encode(np.array([[1.0, 1, 1]]), np.array([[[1.0, 2, 3]]]))
    assert abs(h[0, 0, 9] - np.sqrt(5)) < 1e-12


def test_relation_translation():
    rng = np.random.default_rng(7)
    pi, pj = rng.normal(size=(4, 3)), rng.normal(size=(4, 5, 3))
    t = np.array([0.5, -2.0, 1.0])
    a, b = relation_encode(pi, pj), relation_encode(pi + t, pj + t)
    np.testing.assert_allclose(a[..., 6:], b[..., 6:], atol=1e-12)
    assert not np.allclose(a[..., :6], b[..., :6])


# -------------------------------------------------------------------- types

def test_pointset_validation():
    with pytest.raises(ShapeError):
        PointSet(np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        PointSet(np.array([[0, 0, np.nan]]))
    with pytest.raises(ShapeError):
        PointSet(np.zeros((4, 3)), features=np.zeros((3, 2)))
    assert PointSet(np.zeros((4, 3)), features=np.zeros((4, 2))).n == 4
