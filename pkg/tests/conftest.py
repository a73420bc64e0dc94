import numpy as np
import pytest

import mcforest.estimator
import mcforest.forest
from mcforest.data import FeatureMeta, Sample

IDENTITY_TOL = 1e-10
_checked = {"forests": 0}


def make_sample(n=200, M=2, seed=0, p=3, categorical=True, effect=1.0, noise=1.0) -> Sample:
    """Small confounded sample with one unordered feature."""
    rng = np.random.default_rng(seed)
    cols = [rng.normal(size=n) for _ in range(p)]
    feats = [FeatureMeta(f"x{u}") for u in range(p)]
    if categorical:
        c = rng.integers(0, 4, n)
        c[:4] = np.arange(4)
        cols.append(c.astype(np.float64))
        feats.append(FeatureMeta("cat", "unordered", ["a", "b", "c", "d"]))
    x = np.column_stack(cols)
    logits = np.column_stack([np.zeros(n)] + [0.5 * x[:, 0] * (m % 2 * 2 - 1) for m in range(1, M)])
    prob = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    d = np.array([rng.choice(M, p=pr) for pr in prob])
    d[: 2 * M] = np.tile(np.arange(M), 2)
    y = x[:, 0] + effect * d * (1.0 + 0.5 * x[:, 1]) + noise * rng.normal(size=n)
    return Sample(y, d, x, feats, M)


def check_weight_identities(forest, n_points=12):
    """Weight algebra identities that must hold for every trained forest."""
    X = forest.x_B[: min(n_points, forest.n_honest)]
    M = forest.n_treatments
    nq = X.shape[0]
    Ws = [forest.weight_matrix(X, m) for m in range(M)]
    for W in Ws:
        assert np.all(W >= 0)
        np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=IDENTITY_TOL, rtol=0)
    z = np.arange(nq) % 3
    values = np.unique(z)
    pw = np.vstack([(z == v).astype(float) for v in values])
    G = forest.aggregated_weights(X, pw)
    A = forest.aggregated_weights(X)
    y = forest.y_B
    for m in range(M):
        for l in range(m):
            C = Ws[m] - Ws[l]
            np.testing.assert_allclose(C.sum(axis=1), 0.0, atol=IDENTITY_TOL, rtol=0)
            iate = C @ y
            ate = (A[m] - A[l]) @ y
            assert abs(iate.mean() - ate) < IDENTITY_TOL * max(1.0, abs(ate))
            gates = np.array([(G[g, m] - G[g, l]) @ y for g in range(values.size)])
            for g, v in enumerate(values):
                assert abs(iate[z == v].mean() - gates[g]) < IDENTITY_TOL * max(1.0, abs(gates[g]))
            shares = pw.sum(axis=1) / nq
            assert abs(shares @ gates - ate) < IDENTITY_TOL * max(1.0, abs(ate))
    _checked["forests"] += 1


@pytest.fixture(autouse=True)
def _identities_on_every_forest(monkeypatch):
    """Wrap forest construction so every model trained in a test is checked."""
    original = mcforest.forest.build_forest

    def checked(*args, **kwargs):
        forest = original(*args, **kwargs)
        check_weight_identities(forest)
        return forest

    monkeypatch.setattr(mcforest.forest, "build_forest", checked)
    monkeypatch.setattr(mcforest.estimator, "build_forest", checked)
    yield


@pytest.fixture
def sample():
    return make_sample()


@pytest.fixture(scope="session")
def forest_counter():
    return _checked


_acceptance = {}


@pytest.fixture(scope="session")
def acceptance():
    """``record(n, ok, detail)`` stores an acceptance result; ``ok`` is then asserted by the caller."""

    def record(n, ok, detail):
        _acceptance[n] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        ok, detail = _acceptance[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
