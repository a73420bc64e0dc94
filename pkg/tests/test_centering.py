import numpy as np
import pytest

import mcforest.centering as centering
from mcforest.centering import CenteringConfig, center_outcomes
from mcforest.data import DataError, FeatureMeta, Sample, SplitAssignment, split_halves
from mcforest.estimator import fit, iates
from mcforest.forest import ForestConfig, canonical_halves

from conftest import make_sample

SMALL = ForestConfig(n_trees=30)


def _center(s, K=2, seed=1, forest=SMALL):
    return center_outcomes(s, split_halves(s, 0), CenteringConfig(K, forest, seed))


def test_constant_outcome_centers_to_zero():
    s = make_sample(200, seed=1).with_outcome(np.full(200, 2.5))
    c, model = _center(s)
    np.testing.assert_array_equal(c.y, np.zeros(200))
    np.testing.assert_array_equal(model.predictions, np.full(200, 2.5))


@pytest.mark.parametrize("K", [2, 5])
def test_residual_mean_near_zero(K):
    s = make_sample(600, seed=3)
    c, _ = _center(s, K)
    assert abs(c.y.mean()) < 3 * c.y.std(ddof=1) / np.sqrt(c.n)
    assert c.y.var() < s.y.var()


@pytest.mark.parametrize("scale", [1e-6, 1.0, 1e6])
def test_restore_is_bit_exact(scale):
    s = make_sample(300, seed=4)
    s = s.with_outcome(s.y * scale / 3.0)
    c, model = _center(s, 3)
    np.testing.assert_array_equal(model.restore(c.y), s.y)
    np.testing.assert_array_equal(c.x, s.x)
    np.testing.assert_array_equal(c.d, s.d)


def test_fold_bookkeeping():
    s = make_sample(203, seed=5)
    split = split_halves(s, 0)
    _, model = center_outcomes(s, split, CenteringConfig(5, SMALL, 2))
    A, B = canonical_halves(s, split)
    assert np.all(model.fold[B] == -1)
    sizes = np.bincount(model.fold[A], minlength=5)
    assert sizes.max() - sizes.min() <= 1 and sizes.sum() == A.size


def test_no_self_prediction(monkeypatch):
    """With the trees held fixed, a fold's predictions ignore the fold's own outcomes."""
    s = make_sample(240, seed=6)
    split = split_halves(s, 0)
    cfg = CenteringConfig(3, SMALL, 7)
    A, B = canonical_halves(s, split)
    trees = centering.build_regression_forest(s.take(A), cfg.forest, cfg.seed)
    monkeypatch.setattr(centering, "build_regression_forest", lambda *a, **k: trees)
    _, base = center_outcomes(s, split, cfg)
    for k in range(3):
        rows = A[base.fold[A] == k]
        y = s.y.copy()
        y[rows] += np.random.default_rng(k).normal(size=rows.size) * 50
        _, other = center_outcomes(s.with_outcome(y), split, cfg)
        np.testing.assert_allclose(other.predictions[rows], base.predictions[rows], rtol=0, atol=1e-9)
        others = np.setdiff1d(A, rows)
        assert not np.allclose(other.predictions[others], base.predictions[others])
    # B outcomes never enter any prediction
    y = s.y.copy()
    y[B] = 1e3
    _, other = center_outcomes(s.with_outcome(y), split, cfg)
    np.testing.assert_allclose(other.predictions, base.predictions, rtol=0, atol=1e-9)


def test_too_many_folds():
    rng = np.random.default_rng(0)
    s = Sample(rng.normal(size=8), np.tile([0, 1], 4), rng.normal(size=(8, 1)), [FeatureMeta("a")], 2)
    split = SplitAssignment(np.arange(4), np.arange(4, 8), 0)
    with pytest.raises(DataError):
        center_outcomes(s, split, CenteringConfig(5, SMALL, 0))
    with pytest.raises(ValueError):
        CenteringConfig(1)


def test_centering_lowers_iate_mse():
    """Additive nuisance ``g(x)``: centring reduces the IATE MSE on average."""
    R, n = 100, 400
    mse = np.zeros(2)
    cfg = ForestConfig(n_trees=40, seed=0)
    for r in range(R):
        rng = np.random.default_rng(r)
        x = rng.normal(size=(n, 3))
        d = (rng.random(n) < 0.5).astype(np.int64)
        tau = 1.0 + 0.5 * x[:, 1]
        y = 4.0 * np.sin(2 * x[:, 0]) + 3.0 * x[:, 2] + tau * d + rng.normal(size=n)
        s = Sample(y, d, x, [FeatureMeta(f"x{u}") for u in range(3)], 2)
        X = x[:40]
        for j, folds in enumerate((None, 2)):
            f = fit(s, cfg, folds, ForestConfig(n_trees=40, seed=0)).forest
            est, _ = iates(f, X, 1, 0, with_se=False)
            mse[j] += np.mean((est - tau[:40]) ** 2) / R
    assert mse[1] < mse[0]
