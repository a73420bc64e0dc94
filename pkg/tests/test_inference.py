import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcforest.forest import ForestConfig, WeightSet, build_forest
from mcforest.inference import (GroupSpec, adjacent_differences, aggregate_ate, aggregate_gate, contrast_covariance,
                                contrast_variance, default_k, estimate_iate, estimate_potential_outcome,
                                knn_conditional_moments, make_estimate, p_value, signed_weights, wald_gate_equality,
                                wald_test, weights_variance)

from conftest import make_sample
from oracles import knn_by_hand

# Five honest rows, k = 2. Neighbour sets worked out by hand:
#   row 0 (w=1):    {0, 3} -> y 1, 3 -> mean 2.0, var 1.0
#   row 1 (w=3):    {1, 4} -> y 2, 5 -> mean 3.5, var 2.25
#   row 2 (w=-2):   {2, 3} -> y 4, 3 -> mean 3.5, var 0.25
#   row 3 (w=0):    {3, 0} -> y 3, 1 -> mean 2.0, var 1.0
#   row 4 (w=2.5):  {4, 1} -> y 5, 2 -> mean 3.5, var 2.25
HAND_W = np.array([1.0, 3.0, -2.0, 0.0, 2.5])
HAND_Y = np.array([1.0, 2.0, 4.0, 3.0, 5.0])
HAND_MU = np.array([2.0, 3.5, 3.5, 2.0, 3.5])
HAND_S2 = np.array([1.0, 2.25, 0.25, 1.0, 2.25])
# term 1: (1*1 + 9*2.25 + 4*0.25 + 0*1 + 6.25*2.25) / 25 = 36.3125 / 25
# term 2: w*mu = [2, 10.5, -7, 0, 8.75], mean 2.85, squared deviations sum 199.2, / (5*4)
HAND_VAR = 36.3125 / 25 + 199.2 / 20


def test_hand_knn_moments():
    mu, s2 = knn_conditional_moments(HAND_W, HAND_Y, 2)
    np.testing.assert_array_equal(mu, HAND_MU)
    np.testing.assert_array_equal(s2, HAND_S2)


def test_hand_variance():
    assert abs(weights_variance(HAND_W, HAND_Y, 2) - HAND_VAR) < 1e-12
    assert HAND_VAR == pytest.approx(11.4125, abs=1e-12)


def test_equal_weights_five_rows():
    # w = 1 everywhere: every row is equidistant, neighbours are the k lowest row ids
    y = np.array([2.0, 4.0, 6.0, 8.0, 10.0])
    k = 3
    mu, s2 = knn_conditional_moments(np.ones(5), y, k)
    np.testing.assert_array_equal(mu, np.full(5, 4.0))
    np.testing.assert_allclose(s2, np.full(5, 8.0 / 3.0), rtol=1e-15)
    # term 1 = 5 * (8/3) / 25; term 2 = 0 because w*mu is constant
    assert weights_variance(np.ones(5), y, k) == pytest.approx(8.0 / 15.0, abs=1e-12)


def test_knn_ties_by_row_id():
    mu, _ = knn_conditional_moments(np.array([0.0, 1.0, -1.0]), np.array([0.0, 10.0, 20.0]), 2)
    assert mu[0] == 5.0


def test_knn_examples():
    rng = np.random.default_rng(0)
    w = rng.normal(size=50)
    mu, s2 = knn_conditional_moments(w, np.full(50, 3.0), 7)
    assert np.all(mu == 3.0) and np.all(s2 == 0.0)
    y = rng.normal(size=50)
    mu, _ = knn_conditional_moments(w, y, 50)
    np.testing.assert_allclose(mu, y.mean(), rtol=1e-12)
    with pytest.raises(ValueError):
        knn_conditional_moments(w, y, 51)
    big_w = rng.normal(size=20000)
    big_y = rng.normal(size=20000) * 2.0
    _, s2 = knn_conditional_moments(big_w, big_y, default_k(20000))
    assert abs(s2.mean() / big_y.var() - 1.0) < 0.10


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n=st.integers(2, 40), k=st.integers(1, 40))
def test_knn_matches_hand_sort(seed, n, k):
    rng = np.random.default_rng(seed)
    w = rng.integers(-3, 4, n) / 2.0
    y = rng.normal(size=n)
    k = min(k, n)
    mu, s2 = knn_conditional_moments(w, y, k)
    emu, es2 = knn_by_hand(w, y, k)
    np.testing.assert_allclose(mu, emu, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(s2, es2, rtol=1e-9, atol=1e-12)


def test_constant_outcome_variance():
    assert weights_variance(np.ones(5), np.full(5, 7.0)) == 0.0
    # with unequal weights the display's second term keeps the spread of w * 7
    w = HAND_W
    expected = np.sum((7 * w - 7 * w.mean()) ** 2) / 20
    assert weights_variance(w, np.full(5, 7.0), 2) == pytest.approx(expected, abs=1e-12)
    c = np.array([0.5, -1.0, 0.5, 0.0, 0.0])
    d = np.array([0, 1, 0, 1, 0])
    assert contrast_variance(c, np.full(5, 7.0), d, (1, 0)) == 0.0


def _uniform_ws(d, n):
    rows = [np.flatnonzero(d == m) for m in range(2)]
    return WeightSet(rows, [np.full(r.size, 1.0 / r.size) for r in rows], n)


def test_iate_six_row_fixture():
    d = np.array([0, 1, 0, 1, 0, 1])
    y = np.array([1.0, 4.0, 2.0, 7.0, 3.0, 10.0])
    ws = _uniform_ws(d, 6)
    e = estimate_iate(ws, y, 1, 0, d)
    assert e.point == pytest.approx(7.0 - 2.0, abs=1e-14)
    np.testing.assert_allclose(e.weights, 6 * (ws.dense(1) - ws.dense(0)))
    assert abs(e.weights.sum()) < 1e-12
    np.testing.assert_allclose(np.abs(e.weights).sum(), 2 * 6)
    flat = estimate_iate(ws, np.full(6, 3.0), 1, 0, d)
    assert flat.point == 0.0 and flat.std_error == 0.0 and flat.p_value == 1.0
    scaled = estimate_iate(ws, -3.0 * y, 1, 0, d)
    assert scaled.point == pytest.approx(-3.0 * e.point)
    assert scaled.std_error == pytest.approx(3.0 * e.std_error, rel=1e-12)
    with pytest.raises(ValueError):
        signed_weights(ws, 1, 1)
    disp = estimate_iate(ws, y, 1, 0)
    assert disp.std_error == pytest.approx(math.sqrt(weights_variance(disp.weights, y)))


def test_unreliable_flag():
    d = np.array([0, 1, 0, 0])
    ws = WeightSet([np.array([0]), np.array([1])], [np.array([1.0]), np.array([1.0])], 4)
    assert not estimate_iate(ws, np.array([1.0, 2.0, 3.0, 4.0]), 1, 0, d).reliable


def test_potential_outcome():
    d = np.array([0, 1, 0, 1, 0, 1])
    y = np.array([1.0, 4.0, 2.0, 7.0, 3.0, 10.0])
    e = estimate_potential_outcome(_uniform_ws(d, 6).dense(1), y, 1, d)
    assert e.point == pytest.approx(7.0)


def test_p_value_conventions():
    assert p_value(0.0, 0.0) == 1.0 and p_value(1.0, 0.0) == 0.0
    assert p_value(1.959963984540054, 1.0) == pytest.approx(0.05, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), shift=st.floats(-1e3, 1e3))
def test_arm_variance_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    n = 60
    d = rng.integers(0, 2, n)
    d[:2] = [0, 1]
    y = rng.normal(size=n)
    c = np.zeros(n)
    for m, sign in ((1, 1.0), (0, -1.0)):
        rows = np.flatnonzero(d == m)
        w = rng.random(rows.size)
        c[rows] = sign * w / w.sum()
    a = contrast_variance(c, y, d, (1, 0))
    b = contrast_variance(c, y + shift, d, (1, 0))
    assert b == pytest.approx(a, rel=1e-6, abs=1e-9)
    assert (c @ (y + shift)) == pytest.approx(c @ y, abs=1e-9 * (1 + abs(shift)))


def _forest_fixture():
    s = make_sample(300, seed=21)
    return s, build_forest(s, ForestConfig(n_trees=40, seed=3))


def test_aggregation_identities():
    s, f = _forest_fixture()
    X = f.x_B
    d_pts = f.d_B
    C = f.weight_matrix(X, 1) - f.weight_matrix(X, 0)
    z = (X[:, 0] > 0).astype(int)
    iate = C @ f.y_B
    for v in (0, 1):
        w = aggregate_gate(C, GroupSpec(z), v, 1, 0, d_pts)
        assert abs(w @ f.y_B - iate[z == v].mean()) < 1e-10
    ate = aggregate_ate(C, (), 1, 0, d_pts)
    assert abs(ate @ f.y_B - iate.mean()) < 1e-10
    everyone = aggregate_gate(C, GroupSpec(np.zeros(z.size)), 0, 1, 0, d_pts)
    np.testing.assert_allclose(everyone, ate, atol=1e-15)
    single = GroupSpec(np.arange(z.size))
    assert abs(aggregate_gate(C, single, 5, 1, 0, d_pts) @ f.y_B - iate[5]) < 1e-12
    atet = aggregate_ate(C, (1,), 1, 0, d_pts)
    assert abs(atet @ f.y_B - iate[d_pts == 1].mean()) < 1e-10
    with pytest.raises(ValueError):
        aggregate_gate(C, GroupSpec(z), 7, 1, 0, d_pts)
    # the forest's own aggregation agrees with averaging IATE weights
    W = f.aggregated_weights(X)
    np.testing.assert_allclose(W[1] - W[0], ate, atol=1e-14)


def test_constant_iate_field():
    d = np.array([0, 1] * 6)
    y = np.arange(12, dtype=float) + 2.5 * d
    ws = [_uniform_ws(d, 12)] * 4
    ate = aggregate_ate(ws, (), 1, 0, np.array([0, 1, 0, 1]))
    assert ate @ y == pytest.approx(np.mean(y[d == 1]) - np.mean(y[d == 0]))


def test_wald_identities():
    s, f = _forest_fixture()
    X = f.x_B
    C = f.weight_matrix(X, 1) - f.weight_matrix(X, 0)
    z = (X[:, 0] > 0).astype(int)
    g = [aggregate_gate(C, GroupSpec(z), v, 1, 0, f.d_B) for v in (0, 1)]
    stat, dof, p, singular = wald_gate_equality(g, f.y_B, d=f.d_B, arms=(1, 0))
    t = make_estimate("diff", g[0] - g[1], f.y_B, f.d_B, (1, 0)).t_stat
    assert dof == 1 and not singular
    assert abs(stat - t * t) < 1e-8
    stat0, _, p0, _ = wald_gate_equality([g[0], g[0], g[0]], f.y_B, d=f.d_B, arms=(1, 0))
    assert stat0 == 0.0 and p0 == 1.0
    # display mode variant of the same identity
    stat_d, _, _, _ = wald_gate_equality(g, f.y_B)
    t_d = make_estimate("diff", g[0] - g[1], f.y_B, mode="display").t_stat
    assert abs(stat_d - t_d * t_d) < 1e-8
    with pytest.raises(ValueError):
        wald_gate_equality(g[:1], f.y_B)


def test_covariance_psd_and_singular():
    s, f = _forest_fixture()
    X = f.x_B[:30]
    C = f.weight_matrix(X, 1) - f.weight_matrix(X, 0)
    V = contrast_covariance(list(C[:6]), f.y_B, f.d_B, (1, 0))
    assert np.linalg.eigvalsh(V).min() > -1e-12 * np.abs(V).max()
    np.testing.assert_allclose(np.diag(V), [contrast_variance(c, f.y_B, f.d_B, (1, 0)) for c in C[:6]], rtol=1e-12)
    dup = wald_test([C[0], C[0]], f.y_B, f.d_B, (1, 0))
    assert dup["singular"] and dup["dof"] == 1


def test_adjacent_differences():
    d = np.array([0, 1] * 6)
    y = np.arange(12.0)
    a = np.zeros(12)
    a[[0, 1]] = [-1.0, 1.0]
    b = np.zeros(12)
    b[[2, 3]] = [-1.0, 1.0]
    out = adjacent_differences([a, b], ["lo", "hi"], y, d, (1, 0))
    assert len(out) == 1 and out[0].point == pytest.approx((b - a) @ y)


def test_wald_size_under_equal_gates():
    """Equal true GATEs: the 5% test rejects at roughly its nominal rate."""
    rng = np.random.default_rng(2024)
    n, G, R = 600, 3, 500
    rejections = 0
    for _ in range(R):
        x = rng.random(n)
        d = rng.integers(0, 2, n)
        group = np.minimum((x * G).astype(int), G - 1)
        ws = []
        for g in range(G):
            c = np.zeros(n)
            for m, sign in ((1, 1.0), (0, -1.0)):
                rows = np.flatnonzero((group == g) & (d == m))
                c[rows] = sign / rows.size
            ws.append(c)
        y = 1.0 * d + rng.normal(size=n)
        rejections += wald_gate_equality(ws, y, d=d, arms=(1, 0))[2] < 0.05
    assert 0.02 <= rejections / R <= 0.09
