import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcforest.data import DataError, FeatureMeta, Sample
from mcforest.matching import design_matrix, feature_scales, match_outcomes

from oracles import brute_match


def _sample(x, y, d, feats=None, M=2):
    x = np.asarray(x, dtype=float).reshape(len(y), -1)
    feats = feats or [FeatureMeta(f"f{u}") for u in range(x.shape[1])]
    return Sample(np.asarray(y, float), np.asarray(d), x, feats, M)


def test_scales_population_variance():
    s = _sample(np.column_stack([[0, 2, 0, 2], [5, 5, 5, 5]]), [0, 0, 0, 0], [0, 1, 0, 1])
    np.testing.assert_array_equal(feature_scales(s).inv_var, [1.0, 0.0])


def test_constant_feature_is_ignored():
    s = _sample(np.column_stack([[0, 1, 3, 10], [100, -50, 7, 0]]), [1, 2, 3, 4], [0, 0, 1, 1])
    only = _sample(np.array([[0], [1], [3], [10]]), [1, 2, 3, 4], [0, 0, 1, 1])
    s2 = _sample(np.column_stack([[0, 1, 3, 10], [9, 9, 9, 9]]), [1, 2, 3, 4], [0, 0, 1, 1])
    yt = match_outcomes(s2, feature_scales(s2)).ytilde
    np.testing.assert_array_equal(yt, match_outcomes(only, feature_scales(only)).ytilde)
    assert s.n == 4


def test_identical_point_and_own_arm():
    s = _sample([[0.0], [1.0], [5.0], [1.0]], [10.0, 20.0, 30.0, 40.0], [0, 0, 1, 1])
    yt = match_outcomes(s, feature_scales(s)).ytilde
    assert yt[3, 0] == 20.0  # same x as row 1
    np.testing.assert_array_equal(yt[np.arange(4), s.d], s.y)


def test_five_point_instance():
    # 1-D: controls at 0, 4; treated at 1, 2.5, 9
    s = _sample([[0.0], [1.0], [2.5], [4.0], [9.0]], [1.0, 2.0, 3.0, 4.0, 5.0], [0, 1, 1, 0, 1])
    yt = match_outcomes(s, feature_scales(s)).ytilde
    np.testing.assert_array_equal(yt[:, 0], [1.0, 1.0, 4.0, 4.0, 4.0])
    np.testing.assert_array_equal(yt[:, 1], [2.0, 2.0, 3.0, 3.0, 5.0])


def test_ties_go_to_lowest_row_id():
    s = _sample([[0.0], [-1.0], [1.0]], [0.0, 7.0, 9.0], [1, 0, 0])
    assert match_outcomes(s, feature_scales(s)).ytilde[0, 0] == 7.0


def test_unordered_one_hot_and_empty_arm():
    feats = [FeatureMeta("c", "unordered", ["a", "b", "c"])]
    s = _sample([[0], [1], [2], [0]], [1.0, 2.0, 3.0, 4.0], [0, 0, 1, 1], feats)
    assert design_matrix(s).shape == (4, 3)
    one_arm = _sample([[0], [1]], [1.0, 2.0], [0, 0])
    with pytest.raises(DataError):
        match_outcomes(one_arm, feature_scales(one_arm))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(6, 200), M=st.integers(2, 3), seed=st.integers(0, 10 ** 6))
def test_matches_brute_force(n, M, seed):
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.round(rng.normal(size=n), 1), rng.integers(0, 3, n)]).astype(float)
    d = rng.integers(0, M, n)
    d[:M] = np.arange(M)
    y = rng.normal(size=n)
    feats = [FeatureMeta("a"), FeatureMeta("c", "unordered", ["p", "q", "r"])]
    s = Sample(y, d, x, feats, M)
    got = match_outcomes(s, feature_scales(s)).ytilde
    exp = brute_match(x, y, d, [False, True], [0, 3], M)
    np.testing.assert_array_equal(got, exp)
    for m in range(M):
        assert np.all(np.isin(got[:, m], y[d == m]))
