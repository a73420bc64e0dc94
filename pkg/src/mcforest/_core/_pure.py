"""Reference (numpy) implementations of the hot kernels.

These define the exact arithmetic; the compiled versions in ``_fast.pyx``
must reproduce them bit for bit. Trees are grown depth first, left child
first; node ``t`` consumes row ``t`` of the pre-drawn random inputs.
"""

from __future__ import annotations

import numpy as np

from ..criterion import (KERNEL_MCE, KERNEL_VART, ONE_F, ONE_F_MCE, ONE_F_VART, CriterionConfig, LeafStats,
                         pairs, split_objective)

_CODE_TO_VARIANT = {0: ONE_F, KERNEL_MCE: ONE_F_MCE, KERNEL_VART: ONE_F_VART}


def _search_node(X, y, d, yt, rows, feats, kinds, M, cfg, lam, k, min_leaf, alpha):
    n = rows.size
    yn = y[rows]
    dn = d[rows]
    onehot = (dn[:, None] == np.arange(M)[None, :]).astype(np.float64)
    P = pairs(M)
    use_pairs = cfg.variant == ONE_F_MCE
    tot_n = onehot.sum(axis=0)
    sum_y2 = np.cumsum(yn * yn)[-1]
    tol = 1e-10 * (sum_y2 + n * lam)

    best_objs = []
    best_info = []
    for f in feats:
        v = X[rows, f]
        rank_order = None
        if kinds[f]:
            cats = v.astype(np.int64)
            ncat = int(cats.max()) + 1
            csum = np.bincount(cats, weights=yn, minlength=ncat)
            ccnt = np.bincount(cats, minlength=ncat)
            present = np.flatnonzero(ccnt > 0)
            means = csum[present] / ccnt[present]
            rank_order = present[np.lexsort((present, means))]
            rank = np.zeros(ncat)
            rank[rank_order] = np.arange(rank_order.size, dtype=np.float64)
            v = rank[cats]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        oh = onehot[order]
        ys = yn[order]
        c_n = np.cumsum(oh, axis=0)
        c_sy = np.cumsum(ys[:, None] * oh, axis=0)
        c_syy = np.cumsum((ys * ys)[:, None] * oh, axis=0)
        if use_pairs:
            ds = dn[order]
            yts = yt[rows[order]]
            sa = np.empty((n, len(P)))
            sb = np.empty((n, len(P)))
            sab = np.empty((n, len(P)))
            for j, (m, l) in enumerate(P):
                mask = ((ds == m) | (ds == l)).astype(np.float64)
                sa[:, j] = np.cumsum(yts[:, m] * mask)
                sb[:, j] = np.cumsum(yts[:, l] * mask)
                sab[:, j] = np.cumsum((yts[:, m] * yts[:, l]) * mask)
        else:
            sa = sb = sab = np.zeros((n, len(P)))
        # left daughter = first i sorted rows, i = 1..n-1
        nL = c_n[:-1]
        nR = c_n[-1][None, :] - nL
        ok = vs[1:] > vs[:-1]
        ok &= np.all(nL >= k, axis=1) & np.all(nR >= k, axis=1)
        ok &= np.all(nL >= alpha * tot_n[None, :], axis=1) & np.all(nR >= alpha * tot_n[None, :], axis=1)
        sizes = np.arange(1, n, dtype=np.float64)
        ok &= (sizes >= min_leaf) & (n - sizes >= min_leaf)
        pos = np.flatnonzero(ok)
        if pos.size == 0:
            continue
        L = LeafStats(nL[pos], c_sy[pos], c_syy[pos], sa[pos], sb[pos], sab[pos])
        R = LeafStats(nR[pos], c_sy[-1][None, :] - c_sy[pos], c_syy[-1][None, :] - c_syy[pos],
                      sa[-1][None, :] - sa[pos], sb[-1][None, :] - sb[pos], sab[-1][None, :] - sab[pos])
        obj = split_objective(L, R, cfg, lam)
        best_objs.append(obj)
        best_info.append((f, pos, vs, rank_order))
    if not best_objs:
        return None
    allobj = np.concatenate(best_objs)
    target = allobj.min() + tol
    flat = int(np.flatnonzero(allobj <= target)[0])
    for obj, (f, pos, vs, rank_order) in zip(best_objs, best_info):
        if flat < obj.size:
            i = int(pos[flat]) + 1
            a, b = vs[i - 1], vs[i]
            if rank_order is None:
                thr = 0.5 * (a + b)
                if thr <= a:
                    thr = b
                return f, float(thr), 0
            mask = 0
            for c in rank_order[: int(b)]:
                mask |= 1 << int(c)
            return f, float(b), mask
        flat -= obj.size
    raise AssertionError("unreachable")


def grow_tree(X, y, d, yt, rows, kinds, M, variant, pen, lam, k, min_leaf, alpha, keys, vcounts):
    """Grow one tree on ``rows``; returns ``(feature, threshold, mask, left, right, parent, count)``."""
    X = np.asarray(X, dtype=np.float64)
    p = X.shape[1]
    cfg = CriterionConfig(_CODE_TO_VARIANT[variant], bool(pen), None, 1.0)
    max_nodes = keys.shape[0]
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    mask = np.zeros(max_nodes, dtype=np.uint64)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    parent = np.full(max_nodes, -1, dtype=np.int64)
    count = np.zeros(max_nodes, dtype=np.int64)
    n_nodes = 1
    stack = [(0, np.sort(np.asarray(rows, dtype=np.int64)))]
    stop_below = 2 * k - 1
    while stack:
        node, nrows = stack.pop()
        count[node] = nrows.size
        arm_n = np.bincount(d[nrows], minlength=M)
        if np.any(arm_n < stop_below) or nrows.size < 2 * min_leaf:
            continue
        V = min(p, 1 + int(vcounts[node]))
        feats = np.sort(np.argsort(keys[node], kind="stable")[:V])
        found = _search_node(X, y, d, yt, nrows, feats, kinds, M, cfg, lam, k, min_leaf, alpha)
        if found is None:
            continue
        f, thr, m = found
        if kinds[f]:
            cats = X[nrows, f].astype(np.int64)
            go_left = ((np.uint64(m) >> cats.astype(np.uint64)) & np.uint64(1)).astype(bool)
        else:
            go_left = X[nrows, f] < thr
        feature[node] = f
        threshold[node] = thr
        mask[node] = np.uint64(m)
        left[node] = n_nodes
        right[node] = n_nodes + 1
        parent[n_nodes] = node
        parent[n_nodes + 1] = node
        n_nodes += 2
        stack.append((right[node], nrows[~go_left]))
        stack.append((left[node], nrows[go_left]))
    s = slice(0, n_nodes)
    return feature[s], threshold[s], mask[s], left[s], right[s], parent[s], count[s]


def apply_tree(X, feature, threshold, mask, left, right, kinds):
    """Leaf index for every row of ``X``. Ordered ties at the threshold go right."""
    X = np.asarray(X, dtype=np.float64)
    out = np.zeros(X.shape[0], dtype=np.int64)
    active = np.arange(X.shape[0])
    node = np.zeros(X.shape[0], dtype=np.int64)
    while active.size:
        nd = node[active]
        f = feature[nd]
        internal = f >= 0
        done = active[~internal]
        out[done] = nd[~internal]
        active = active[internal]
        nd = nd[internal]
        f = f[internal]
        if not active.size:
            break
        vals = X[active, f]
        is_cat = kinds[f].astype(bool)
        go_left = np.empty(active.size, dtype=bool)
        go_left[~is_cat] = vals[~is_cat] < threshold[nd[~is_cat]]
        if np.any(is_cat):
            cats = vals[is_cat].astype(np.uint64)
            go_left[is_cat] = ((mask[nd[is_cat]] >> cats) & np.uint64(1)).astype(bool)
        node[active] = np.where(go_left, left[nd], right[nd])
    return out


def knn_moments(w, y, k):
    """Mean and variance (divisor ``k``) of ``y`` over the ``k`` nearest rows in ``w``.

    Neighbours of row ``i`` are the ``k`` rows with smallest ``|w_j - w_i|``;
    equal distances go to the lower row index. Row ``i`` is a candidate for
    its own neighbourhood like any other row.
    """
    w = np.asarray(w, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = w.size
    if k < 1 or k > n:
        raise ValueError(f"k must be in 1..{n}, got {k}")
    order = np.argsort(w, kind="stable")
    ws = w[order]
    ys = y[order]
    p1 = np.concatenate(([0.0], np.cumsum(ys)))
    p2 = np.concatenate(([0.0], np.cumsum(ys * ys)))
    starts = np.concatenate(([0], np.flatnonzero(ws[1:] != ws[:-1]) + 1))
    ends = np.concatenate((starts[1:], [n]))
    nb = starts.size
    mu_b = np.empty(nb)
    s2_b = np.empty(nb)
    for b in range(nb):
        v = ws[starts[b]]
        need = k
        take = min(ends[b] - starts[b], need)
        s1 = p1[starts[b] + take] - p1[starts[b]]
        s2 = p2[starts[b] + take] - p2[starts[b]]
        need -= take
        lo, hi = b - 1, b + 1
        while need > 0:
            dl = v - ws[starts[lo]] if lo >= 0 else np.inf
            dr = ws[starts[hi]] - v if hi < nb else np.inf
            if dl < dr:
                take = min(ends[lo] - starts[lo], need)
                s1 += p1[starts[lo] + take] - p1[starts[lo]]
                s2 += p2[starts[lo] + take] - p2[starts[lo]]
                need -= take
                lo -= 1
            elif dr < dl:
                take = min(ends[hi] - starts[hi], need)
                s1 += p1[starts[hi] + take] - p1[starts[hi]]
                s2 += p2[starts[hi] + take] - p2[starts[hi]]
                need -= take
                hi += 1
            else:
                # equidistant blocks on both sides: merge by row index
                i, j = starts[lo], starts[hi]
                while need > 0 and (i < ends[lo] or j < ends[hi]):
                    if j >= ends[hi] or (i < ends[lo] and order[i] < order[j]):
                        t = i
                        i += 1
                    else:
                        t = j
                        j += 1
                    s1 += ys[t]
                    s2 += ys[t] * ys[t]
                    need -= 1
                lo -= 1
                hi += 1
        mu = s1 / k
        var = s2 / k - mu * mu
        mu_b[b] = mu
        s2_b[b] = var if var > 0.0 else 0.0
    block = np.repeat(np.arange(nb), ends - starts)
    mu_out = np.empty(n)
    var_out = np.empty(n)
    mu_out[order] = mu_b[block]
    var_out[order] = s2_b[block]
    return mu_out, var_out
