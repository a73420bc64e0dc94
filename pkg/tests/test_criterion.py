import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcforest.criterion import (CriterionConfig, LeafStats, default_lambda, effective_lambda, leaf_effect_objective,
                                leaf_mce, leaf_mse, penalty, split_objective)


def _stats(n, sy, syy, sa=(0.0,), sb=(0.0,), sab=(0.0,)):
    return LeafStats(np.array(n, float), np.array(sy, float), np.array(syy, float), np.array(sa, float),
                     np.array(sb, float), np.array(sab, float))


def test_leaf_mse_examples():
    s = LeafStats.from_rows([1.0, 3.0, 5.0], [0, 0, 1], 2)
    assert leaf_mse(s, 0) == 1.0
    assert leaf_mse(s, 1) == 0.0
    assert leaf_mse(LeafStats.from_rows([2.0, 2.0, 2.0, 1.0], [0, 0, 0, 1], 2), 0) == 0.0
    with pytest.raises(ValueError):
        leaf_mse(LeafStats.from_rows([1.0], [0], 2), 1)


def test_leaf_mce_examples():
    # one row in arm 0 with residuals 2 (own arm) and -1 (matched arm 1)
    s = _stats([1, 0], [3.0, 0.0], [9.0, 0.0], [3.0], [4.0], [12.0])
    assert leaf_mce(s, 0, 1, mu=(1.0, 5.0)) == -2.0
    y = np.array([1.0, 2.0, 4.0, 7.0])
    d = np.array([0, 0, 1, 1])
    flat = np.column_stack([np.full(4, 1.5), np.full(4, 5.5)])
    assert leaf_mce(LeafStats.from_rows(y, d, 2, flat), 0, 1) == 0.0
    const = LeafStats.from_rows(np.full(4, 3.0), d, 2, np.full((4, 2), 3.0))
    assert leaf_mce(const, 0, 1) == 0.0
    with pytest.raises(ValueError):
        leaf_mce(const, 1, 1)


def test_objective_arithmetic():
    # MSE_0 = MSE_1 = 1 and MCE = 0.5 with two rows per arm
    y = np.array([0.0, 2.0, 10.0, 12.0])
    d = np.array([0, 0, 1, 1])
    yt = np.array([[0.0, 10.0], [2.0, 12.0], [1.0, 10.0], [1.0, 12.0]])
    s = LeafStats.from_rows(y, d, 2, yt)
    assert leaf_mse(s, 0) == 1.0 and leaf_mse(s, 1) == 1.0
    assert leaf_mce(s, 0, 1) == 0.5
    assert leaf_effect_objective(s, CriterionConfig("one_f_mce")) == 1.0
    assert leaf_effect_objective(s, CriterionConfig("one_f")) == 2.0
    v = LeafStats.from_rows([1.0, 4.0], [0, 1], 2)
    assert leaf_effect_objective(v, CriterionConfig("one_f_vart")) == -9.0


def test_penalty_examples():
    sep_L = LeafStats.from_rows([0.0, 0.0], [0, 0], 2)
    sep_R = LeafStats.from_rows([0.0, 0.0], [1, 1], 2)
    assert penalty(sep_L, sep_R, 3.0, 2) == 0.0
    same = LeafStats.from_rows([0.0, 0.0], [0, 1], 2)
    assert penalty(same, same, 3.0, 2) == 3.0
    L = LeafStats.from_rows([0.0] * 4, [0, 0, 0, 1], 2)
    R = LeafStats.from_rows([0.0] * 4, [0, 1, 1, 1], 2)
    assert penalty(L, R, 1.0, 2) == 0.75
    assert penalty(L, R, 2.0, 2) == penalty(R, L, 2.0, 2) == 1.5


def test_split_objective_properties():
    cfg = CriterionConfig("one_f")
    s = LeafStats.from_rows([1.0, 2.0, 4.0, 5.0], [0, 1, 0, 1], 2)
    assert split_objective(s, s, cfg) == 2 * 4 * leaf_effect_objective(s, cfg)
    pen = CriterionConfig("one_f", penalty_on=True)
    yl, yr = [1.0, 2.0, 4.0, 3.0], [5.0, 1.0, 2.0, 0.0]
    L_sep, R_sep = LeafStats.from_rows(yl, [0, 0, 0, 1], 2), LeafStats.from_rows(yr, [1, 1, 1, 0], 2)
    L_mix, R_mix = LeafStats.from_rows(yl, [0, 1, 0, 1], 2), LeafStats.from_rows(yr, [1, 0, 1, 0], 2)
    extra_sep = split_objective(L_sep, R_sep, pen, 1.0) - split_objective(L_sep, R_sep, cfg)
    extra_mix = split_objective(L_mix, R_mix, pen, 1.0) - split_objective(L_mix, R_mix, cfg)
    assert extra_sep == pytest.approx(8 * penalty(L_sep, R_sep, 1.0, 2))
    assert extra_mix == pytest.approx(8 * penalty(L_mix, R_mix, 1.0, 2)) == 8.0
    # equal shares in the mixed split, 3/4 vs 1/4 in the separated one
    assert extra_sep < extra_mix


def test_lambda_defaults():
    y = np.array([1.0, 3.0, 2.0, 6.0])
    d = np.array([0, 0, 1, 1])
    assert default_lambda(CriterionConfig("one_f_mce", True), y, d, 2) == np.var(y)
    assert default_lambda(CriterionConfig("one_f_vart", True), y, d, 2) == (2.0 - 4.0) ** 2
    assert effective_lambda(CriterionConfig("one_f_vart", True), y, d, 2) == 400.0
    assert effective_lambda(CriterionConfig("one_f_mce", False), y, d, 2) == 0.0
    assert effective_lambda(CriterionConfig("basic", True), y, d, 2) == 0.0
    assert effective_lambda(CriterionConfig("one_f", True, lam=2.0), y, d, 2) == 2.0
    with pytest.raises(ValueError):
        CriterionConfig("one_f", lam=-1.0)
    with pytest.raises(ValueError):
        CriterionConfig("nope")


rows = st.lists(st.tuples(st.floats(-50, 50), st.integers(0, 2), st.floats(-50, 50), st.floats(-50, 50),
                          st.floats(-50, 50)), min_size=2, max_size=30)


def _from(rows_, M=3):
    y = np.array([r[0] for r in rows_])
    d = np.array([r[1] for r in rows_])
    yt = np.array([[r[2], r[3], r[4]] for r in rows_])
    yt[np.arange(y.size), d] = y
    return y, d, yt


@settings(max_examples=60, deadline=None)
@given(rows=rows, cut=st.integers(1, 29))
def test_mergeable(rows, cut):
    y, d, yt = _from(rows)
    cut = min(cut, y.size - 1)
    whole = LeafStats.from_rows(y, d, 3, yt)
    merged = LeafStats.from_rows(y[:cut], d[:cut], 3, yt[:cut]).merge(LeafStats.from_rows(y[cut:], d[cut:], 3, yt[cut:]))
    for a, b in zip((whole.n, whole.sy, whole.syy, whole.sa, whole.sb, whole.sab),
                    (merged.n, merged.sy, merged.syy, merged.sa, merged.sb, merged.sab)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-9)
    assert whole.total == y.size


@settings(max_examples=60, deadline=None)
@given(rows=rows, shift=st.floats(-100, 100))
def test_shift_invariance(rows, shift):
    y, d, yt = _from(rows)
    if len(set(d.tolist())) < 3:
        return
    a = LeafStats.from_rows(y, d, 3, yt)
    b = LeafStats.from_rows(y + shift, d, 3, yt + shift)
    for m in range(3):
        assert leaf_mse(b, m) == pytest.approx(leaf_mse(a, m), rel=1e-6, abs=1e-6)
    assert leaf_mce(b, 0, 2) == pytest.approx(leaf_mce(a, 0, 2), rel=1e-6, abs=1e-5)


def test_binary_mce_display():
    rng = np.random.default_rng(1)
    y = rng.normal(size=20)
    d = np.r_[np.zeros(10, int), np.ones(10, int)]
    yt = np.column_stack([y, y[::-1]])
    yt[d == 1, 1] = y[d == 1]
    s = LeafStats.from_rows(y, d, 2, yt)
    val = leaf_effect_objective(s, CriterionConfig("one_f_mce"))
    assert val == pytest.approx(leaf_mse(s, 0) + leaf_mse(s, 1) - 2 * leaf_mce(s, 0, 1), rel=1e-12)
