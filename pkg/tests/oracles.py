"""Slow, independent reference implementations used as test oracles.

Nothing here calls into the package's split search or matching code; the
objectives are evaluated directly from the rows of each candidate leaf.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np


# ---- matching --------------------------------------------------------------

def brute_match(x: np.ndarray, y: np.ndarray, d: np.ndarray, unordered: list, n_cats: list, M: int) -> np.ndarray:
    """O(N^2) nearest-neighbour outcomes with inverse-variance weights and one-hot categories."""
    cols = []
    for u in range(x.shape[1]):
        if unordered[u]:
            for c in range(n_cats[u]):
                cols.append((x[:, u] == c).astype(float))
        else:
            cols.append(x[:, u].astype(float))
    z = np.column_stack(cols)
    var = z.var(axis=0)
    w = np.where(var > 0, 1.0 / np.where(var > 0, var, 1.0), 0.0)
    n = y.size
    out = np.empty((n, M))
    for i in range(n):
        for m in range(M):
            if d[i] == m:
                out[i, m] = y[i]
                continue
            best, best_j = np.inf, -1
            for j in range(n):
                if d[j] != m:
                    continue
                dist = float(np.sum(w * (z[i] - z[j]) ** 2))
                if dist < best:
                    best, best_j = dist, j
            out[i, m] = y[best_j]
    return out


# ---- recursive partitioning --------------------------------------------------

def _leaf_objective(y, d, yt, M, variant):
    means = np.array([y[d == m].mean() for m in range(M)])
    if variant == "one_f_vart":
        return -sum((means[m] - means[l]) ** 2 for m, l in combinations(range(M), 2))
    mse = sum(np.mean((y[d == m] - means[m]) ** 2) for m in range(M))
    if variant != "one_f_mce":
        return mse
    mce = 0.0
    for m, l in combinations(range(M), 2):
        sel = (d == m) | (d == l)
        mce += np.mean((yt[sel, m] - means[m]) * (yt[sel, l] - means[l]))
    return (M - 1) * mse - 2.0 * mce


def _split_value(rows_L, rows_R, y, d, yt, M, variant, pen, lam):
    nL, nR = rows_L.size, rows_R.size
    val = (nL * _leaf_objective(y[rows_L], d[rows_L], yt[rows_L], M, variant)
           + nR * _leaf_objective(y[rows_R], d[rows_R], yt[rows_R], M, variant))
    if pen:
        s = sum((np.mean(d[rows_L] == m) - np.mean(d[rows_R] == m)) ** 2 for m in range(M))
        val += (nL + nR) * lam * (1.0 - s / M)
    return val


def brute_partition(X, y, d, yt, unordered, M, variant, pen=False, lam=0.0, k=2, min_leaf=5, alpha=0.05):
    """Exhaustive recursive partitioner over all features and all cut points.

    Returns nodes in depth-first, left-first order. A split node is
    ``("split", feature, threshold, left_category_set)``; a leaf is
    ``("leaf", arm_means)``. Unordered features are cut along the categories
    ranked by their pooled node mean (ties by category index).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    d = np.asarray(d)
    yt = np.zeros((y.size, M)) if yt is None else np.asarray(yt, dtype=float)
    nodes = []

    def grow(rows):
        counts = np.array([np.sum(d[rows] == m) for m in range(M)])
        leaf = ("leaf", tuple(float(y[rows][d[rows] == m].mean()) if counts[m] else float("nan") for m in range(M)))
        if np.any(counts < 2 * k - 1) or rows.size < 2 * min_leaf:
            nodes.append(leaf)
            return
        tol = 1e-10 * (float(np.sum(y[rows] ** 2)) + rows.size * lam)
        cands = []
        for f in range(X.shape[1]):
            v = X[rows, f]
            if unordered[f]:
                cats = sorted(set(v.astype(int).tolist()), key=lambda c: (y[rows][v == c].mean(), c))
                rank = {c: r for r, c in enumerate(cats)}
                key = np.array([rank[int(c)] for c in v], dtype=float)
            else:
                key = v
            values = np.unique(key)
            for a, b in zip(values[:-1], values[1:]):
                go_left = key <= a
                L, R = rows[go_left], rows[~go_left]
                nL = np.array([np.sum(d[L] == m) for m in range(M)])
                nR = counts - nL
                if np.any(nL < k) or np.any(nR < k):
                    continue
                if np.any(nL < alpha * counts) or np.any(nR < alpha * counts):
                    continue
                if L.size < min_leaf or R.size < min_leaf:
                    continue
                if unordered[f]:
                    split = (f, float(b), frozenset(cats[: int(b)]))
                else:
                    thr = 0.5 * (a + b)
                    split = (f, float(thr if thr > a else b), None)
                cands.append((_split_value(L, R, y, d, yt, M, variant, pen, lam), split, L, R))
        if not cands:
            nodes.append(leaf)
            return
        best = min(c[0] for c in cands)
        val, split, L, R = next(c for c in cands if c[0] <= best + tol)
        nodes.append(("split",) + split)
        grow(L)
        grow(R)

    grow(np.arange(y.size))
    return nodes


def tree_nodes(feature, threshold, mask, left, right, X, y, d, M, unordered):
    """Convert kernel node arrays to the oracle's depth-first node list."""
    out = []

    def walk(node, rows):
        f = int(feature[node])
        if f < 0:
            out.append(("leaf", tuple(float(y[rows][d[rows] == m].mean()) if np.any(d[rows] == m) else float("nan")
                                      for m in range(M))))
            return
        if unordered[f]:
            cats = frozenset(c for c in range(64) if (int(mask[node]) >> c) & 1)
            out.append(("split", f, float(threshold[node]), cats))
            go_left = np.array([int(c) in cats for c in X[rows, f]], dtype=bool)
        else:
            out.append(("split", f, float(threshold[node]), None))
            go_left = X[rows, f] < threshold[node]
        walk(int(left[node]), rows[go_left])
        walk(int(right[node]), rows[~go_left])

    walk(0, np.arange(y.size))
    return out


def same_nodes(a: list, b: list, tol: float = 1e-12) -> bool:
    if len(a) != len(b):
        return False
    for u, v in zip(a, b):
        if u[0] != v[0]:
            return False
        if u[0] == "leaf":
            if not np.allclose(u[1], v[1], rtol=tol, atol=tol, equal_nan=True):
                return False
        elif u[1] != v[1] or u[2] != v[2] or u[3] != v[3]:
            return False
    return True


# ---- variance ----------------------------------------------------------------

def knn_by_hand(w, y, k):
    """Neighbourhood moments by sorting every row's distances explicitly."""
    w = np.asarray(w, dtype=float)
    y = np.asarray(y, dtype=float)
    mu = np.empty(w.size)
    s2 = np.empty(w.size)
    for i in range(w.size):
        nb = sorted(range(w.size), key=lambda j: (abs(w[j] - w[i]), j))[:k]
        vals = y[nb]
        mu[i] = vals.mean()
        s2[i] = np.mean((vals - vals.mean()) ** 2)
    return mu, s2
