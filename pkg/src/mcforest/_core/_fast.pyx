# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled split search, tree routing and k-NN moments.

Mirrors ``_pure.py`` operation for operation so both backends give
bit-identical trees. The GIL is released while growing and routing.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY
from libc.stdint cimport int64_t, uint64_t
from libc.stdlib cimport free, malloc, qsort

cnp.import_array()

ctypedef struct VI:
    double v
    int64_t i


cdef int _cmp_vi(const void* a, const void* b) noexcept nogil:
    cdef const VI* x = <const VI*> a
    cdef const VI* z = <const VI*> b
    if x.v < z.v:
        return -1
    if x.v > z.v:
        return 1
    if x.i < z.i:
        return -1
    if x.i > z.i:
        return 1
    return 0


cdef double _leaf_obj(int M, int P, int variant, const double* n, const double* sy, const double* syy,
                      const double* sa, const double* sb, const double* sab,
                      const int* pm, const int* pl) noexcept nogil:
    cdef int dd, j
    cdef double het, diff, mse_sum, mse_d, mce_sum, c, mu_m, mu_l
    if variant == 2:
        het = 0.0
        for j in range(P):
            mu_m = sy[pm[j]] / n[pm[j]]
            mu_l = sy[pl[j]] / n[pl[j]]
            diff = mu_m - mu_l
            het = het + diff * diff
        return -het
    mse_sum = 0.0
    for dd in range(M):
        mse_d = (syy[dd] - sy[dd] * sy[dd] / n[dd]) / n[dd]
        mse_sum = mse_sum + mse_d
    if variant != 1:
        return mse_sum
    mce_sum = 0.0
    for j in range(P):
        c = n[pm[j]] + n[pl[j]]
        mu_m = sy[pm[j]] / n[pm[j]]
        mu_l = sy[pl[j]] / n[pl[j]]
        mce_sum = mce_sum + (c * mu_m * mu_l - mu_m * sb[j] - mu_l * sa[j] + sab[j]) / c
    return (M - 1) * mse_sum - 2.0 * mce_sum


def grow_tree(const double[:, ::1] X, const double[::1] y, const int64_t[::1] d, const double[:, ::1] yt,
              rows_in, const signed char[::1] kinds, int M, int variant, int pen, double lam,
              int k, int min_leaf, double alpha, const double[:, ::1] keys, const int64_t[::1] vcounts):
    cdef int64_t[::1] rows = np.sort(np.asarray(rows_in, dtype=np.int64))
    cdef Py_ssize_t n_rows = rows.shape[0]
    cdef int p = X.shape[1]
    cdef Py_ssize_t max_nodes = keys.shape[0]
    cdef int P = M * (M - 1) // 2

    feature_a = np.full(max_nodes, -1, dtype=np.int64)
    threshold_a = np.zeros(max_nodes, dtype=np.float64)
    mask_a = np.zeros(max_nodes, dtype=np.uint64)
    left_a = np.full(max_nodes, -1, dtype=np.int64)
    right_a = np.full(max_nodes, -1, dtype=np.int64)
    parent_a = np.full(max_nodes, -1, dtype=np.int64)
    count_a = np.zeros(max_nodes, dtype=np.int64)
    cdef int64_t[::1] feature = feature_a
    cdef double[::1] threshold = threshold_a
    cdef uint64_t[::1] mask = mask_a
    cdef int64_t[::1] left = left_a
    cdef int64_t[::1] right = right_a
    cdef int64_t[::1] parent = parent_a
    cdef int64_t[::1] count = count_a

    cdef int64_t* buf = <int64_t*> malloc(max(n_rows, 1) * sizeof(int64_t))
    cdef int64_t* tmp = <int64_t*> malloc(max(n_rows, 1) * sizeof(int64_t))
    cdef VI* vi = <VI*> malloc(max(n_rows, p, 64) * sizeof(VI))
    cdef Py_ssize_t cand_cap = max(n_rows, 1) * max(p, 1)
    cdef double* cand_obj = <double*> malloc(cand_cap * sizeof(double))
    cdef int* cand_f = <int*> malloc(cand_cap * sizeof(int))
    cdef double* cand_thr = <double*> malloc(cand_cap * sizeof(double))
    cdef uint64_t* cand_mask = <uint64_t*> malloc(cand_cap * sizeof(uint64_t))
    cdef double* arm = <double*> malloc(12 * max(M, 1) * sizeof(double))
    cdef double* pr = <double*> malloc(9 * max(P, 1) * sizeof(double))
    cdef int* pm = <int*> malloc(max(P, 1) * sizeof(int))
    cdef int* pl = <int*> malloc(max(P, 1) * sizeof(int))
    cdef int* feats = <int*> malloc(max(p, 1) * sizeof(int))
    cdef int64_t* st_node = <int64_t*> malloc(max_nodes * sizeof(int64_t))
    cdef Py_ssize_t* st_lo = <Py_ssize_t*> malloc(max_nodes * sizeof(Py_ssize_t))
    cdef Py_ssize_t* st_hi = <Py_ssize_t*> malloc(max_nodes * sizeof(Py_ssize_t))
    cdef double csum[64]
    cdef double ccnt[64]
    cdef double crank[64]
    cdef int corder[64]

    cdef double* totn = arm
    cdef double* tsy = arm + M
    cdef double* tsyy = arm + 2 * M
    cdef double* Ln = arm + 3 * M
    cdef double* Lsy = arm + 4 * M
    cdef double* Lsyy = arm + 5 * M
    cdef double* Rn = arm + 6 * M
    cdef double* Rsy = arm + 7 * M
    cdef double* Rsyy = arm + 8 * M
    cdef double* tsa = pr
    cdef double* tsb = pr + P
    cdef double* tsab = pr + 2 * P
    cdef double* Lsa = pr + 3 * P
    cdef double* Lsb = pr + 4 * P
    cdef double* Lsab = pr + 5 * P
    cdef double* Rsa = pr + 6 * P
    cdef double* Rsb = pr + 7 * P
    cdef double* Rsab = pr + 8 * P

    cdef Py_ssize_t n_nodes = 1, sp = 0, lo, hi, nn, t, q, ncand, best, nl
    cdef int64_t node, row, cat
    cdef int dd, j, f, fi, V, ncat, npresent, stop_below = 2 * k - 1, leaf, use_pairs = (variant == 1)
    cdef double yv, ya, yb, sum_y2, tol, nLt, nRt, objL, objR, tot, s, diff, a, b, thr, mn, target
    cdef int valid
    cdef uint64_t mbits

    if (buf == NULL or tmp == NULL or vi == NULL or cand_obj == NULL or cand_f == NULL or cand_thr == NULL
            or cand_mask == NULL or arm == NULL or pr == NULL or pm == NULL or pl == NULL or feats == NULL
            or st_node == NULL or st_lo == NULL or st_hi == NULL):
        raise MemoryError()

    try:
        with nogil:
            j = 0
            for dd in range(M):
                for f in range(dd + 1, M):
                    pm[j] = dd
                    pl[j] = f
                    j += 1
            for t in range(n_rows):
                buf[t] = rows[t]
            st_node[0] = 0
            st_lo[0] = 0
            st_hi[0] = n_rows
            sp = 1
            while sp > 0:
                sp -= 1
                node = st_node[sp]
                lo = st_lo[sp]
                hi = st_hi[sp]
                nn = hi - lo
                count[node] = nn
                for dd in range(M):
                    totn[dd] = 0.0
                for t in range(lo, hi):
                    totn[d[buf[t]]] += 1.0
                leaf = 0
                for dd in range(M):
                    if totn[dd] < stop_below:
                        leaf = 1
                if leaf or nn < 2 * min_leaf:
                    continue

                # random feature subset: V smallest keys, scanned in ascending feature order
                V = 1 + <int> vcounts[node]
                if V > p:
                    V = p
                for f in range(p):
                    vi[f].v = keys[node, f]
                    vi[f].i = f
                qsort(vi, p, sizeof(VI), _cmp_vi)
                for f in range(V):
                    feats[f] = <int> vi[f].i
                for f in range(1, V):
                    fi = feats[f]
                    j = f - 1
                    while j >= 0 and feats[j] > fi:
                        feats[j + 1] = feats[j]
                        j -= 1
                    feats[j + 1] = fi

                sum_y2 = 0.0
                for t in range(lo, hi):
                    yv = y[buf[t]]
                    sum_y2 += yv * yv
                tol = 1e-10 * (sum_y2 + nn * lam)

                ncand = 0
                for fi in range(V):
                    f = feats[fi]
                    if kinds[f]:
                        for cat in range(64):
                            csum[cat] = 0.0
                            ccnt[cat] = 0.0
                        for t in range(lo, hi):
                            cat = <int64_t> X[buf[t], f]
                            csum[cat] += y[buf[t]]
                            ccnt[cat] += 1.0
                        npresent = 0
                        for cat in range(64):
                            if ccnt[cat] > 0:
                                vi[npresent].v = csum[cat] / ccnt[cat]
                                vi[npresent].i = cat
                                npresent += 1
                        qsort(vi, npresent, sizeof(VI), _cmp_vi)
                        for j in range(npresent):
                            corder[j] = <int> vi[j].i
                            crank[vi[j].i] = <double> j
                        for t in range(lo, hi):
                            vi[t - lo].v = crank[<int64_t> X[buf[t], f]]
                            vi[t - lo].i = buf[t]
                    else:
                        for t in range(lo, hi):
                            vi[t - lo].v = X[buf[t], f]
                            vi[t - lo].i = buf[t]
                    qsort(vi, nn, sizeof(VI), _cmp_vi)

                    for dd in range(M):
                        totn[dd] = 0.0
                        tsy[dd] = 0.0
                        tsyy[dd] = 0.0
                        Ln[dd] = 0.0
                        Lsy[dd] = 0.0
                        Lsyy[dd] = 0.0
                    for j in range(P):
                        tsa[j] = 0.0
                        tsb[j] = 0.0
                        tsab[j] = 0.0
                        Lsa[j] = 0.0
                        Lsb[j] = 0.0
                        Lsab[j] = 0.0
                    for t in range(nn):
                        row = vi[t].i
                        dd = <int> d[row]
                        yv = y[row]
                        totn[dd] += 1.0
                        tsy[dd] += yv
                        tsyy[dd] += yv * yv
                        if use_pairs:
                            for j in range(P):
                                if dd == pm[j] or dd == pl[j]:
                                    ya = yt[row, pm[j]]
                                    yb = yt[row, pl[j]]
                                    tsa[j] += ya
                                    tsb[j] += yb
                                    tsab[j] += ya * yb

                    for t in range(nn - 1):
                        row = vi[t].i
                        dd = <int> d[row]
                        yv = y[row]
                        Ln[dd] += 1.0
                        Lsy[dd] += yv
                        Lsyy[dd] += yv * yv
                        if use_pairs:
                            for j in range(P):
                                if dd == pm[j] or dd == pl[j]:
                                    ya = yt[row, pm[j]]
                                    yb = yt[row, pl[j]]
                                    Lsa[j] += ya
                                    Lsb[j] += yb
                                    Lsab[j] += ya * yb
                        if not (vi[t].v < vi[t + 1].v):
                            continue
                        valid = 1
                        for dd in range(M):
                            Rn[dd] = totn[dd] - Ln[dd]
                            if (Ln[dd] < k or Rn[dd] < k or Ln[dd] < alpha * totn[dd]
                                    or Rn[dd] < alpha * totn[dd]):
                                valid = 0
                        nLt = <double> (t + 1)
                        if nLt < min_leaf or nn - nLt < min_leaf:
                            valid = 0
                        if not valid:
                            continue
                        for dd in range(M):
                            Rsy[dd] = tsy[dd] - Lsy[dd]
                            Rsyy[dd] = tsyy[dd] - Lsyy[dd]
                        for j in range(P):
                            Rsa[j] = tsa[j] - Lsa[j]
                            Rsb[j] = tsb[j] - Lsb[j]
                            Rsab[j] = tsab[j] - Lsab[j]
                        nLt = Ln[0]
                        nRt = Rn[0]
                        for dd in range(1, M):
                            nLt = nLt + Ln[dd]
                            nRt = nRt + Rn[dd]
                        objL = _leaf_obj(M, P, variant, Ln, Lsy, Lsyy, Lsa, Lsb, Lsab, pm, pl)
                        objR = _leaf_obj(M, P, variant, Rn, Rsy, Rsyy, Rsa, Rsb, Rsab, pm, pl)
                        tot = nLt * objL + nRt * objR
                        if pen:
                            s = 0.0
                            for dd in range(M):
                                diff = Ln[dd] / nLt - Rn[dd] / nRt
                                s = s + diff * diff
                            tot = tot + (nLt + nRt) * lam * (1.0 - s / M)
                        a = vi[t].v
                        b = vi[t + 1].v
                        cand_obj[ncand] = tot
                        cand_f[ncand] = f
                        if kinds[f]:
                            mbits = 0
                            for j in range(<int> b):
                                mbits = mbits | ((<uint64_t> 1) << corder[j])
                            cand_thr[ncand] = b
                            cand_mask[ncand] = mbits
                        else:
                            thr = 0.5 * (a + b)
                            if thr <= a:
                                thr = b
                            cand_thr[ncand] = thr
                            cand_mask[ncand] = 0
                        ncand += 1

                if ncand == 0:
                    continue
                mn = cand_obj[0]
                for q in range(1, ncand):
                    if cand_obj[q] < mn:
                        mn = cand_obj[q]
                target = mn + tol
                best = 0
                while not (cand_obj[best] <= target):
                    best += 1
                f = cand_f[best]
                feature[node] = f
                threshold[node] = cand_thr[best]
                mask[node] = cand_mask[best]

                # stable partition of the node's rows
                nl = 0
                for t in range(lo, hi):
                    row = buf[t]
                    if kinds[f]:
                        valid = <int> ((cand_mask[best] >> (<uint64_t> X[row, f])) & 1)
                    else:
                        valid = X[row, f] < cand_thr[best]
                    if valid:
                        tmp[lo + nl] = row
                        nl += 1
                q = lo + nl
                for t in range(lo, hi):
                    row = buf[t]
                    if kinds[f]:
                        valid = <int> ((cand_mask[best] >> (<uint64_t> X[row, f])) & 1)
                    else:
                        valid = X[row, f] < cand_thr[best]
                    if not valid:
                        tmp[q] = row
                        q += 1
                for t in range(lo, hi):
                    buf[t] = tmp[t]
                left[node] = n_nodes
                right[node] = n_nodes + 1
                parent[n_nodes] = node
                parent[n_nodes + 1] = node
                st_node[sp] = n_nodes + 1
                st_lo[sp] = lo + nl
                st_hi[sp] = hi
                sp += 1
                st_node[sp] = n_nodes
                st_lo[sp] = lo
                st_hi[sp] = lo + nl
                sp += 1
                n_nodes += 2
    finally:
        free(buf); free(tmp); free(vi); free(cand_obj); free(cand_f); free(cand_thr); free(cand_mask)
        free(arm); free(pr); free(pm); free(pl); free(feats); free(st_node); free(st_lo); free(st_hi)

    s_ = slice(0, n_nodes)
    return (feature_a[s_], threshold_a[s_], mask_a[s_], left_a[s_], right_a[s_], parent_a[s_], count_a[s_])


def apply_tree(const double[:, ::1] X, const int64_t[::1] feature, const double[::1] threshold,
               const uint64_t[::1] mask, const int64_t[::1] left, const int64_t[::1] right,
               const signed char[::1] kinds):
    cdef Py_ssize_t n = X.shape[0], i
    cdef int64_t node, f
    out_a = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] out = out_a
    with nogil:
        for i in range(n):
            node = 0
            while feature[node] >= 0:
                f = feature[node]
                if kinds[f]:
                    if (mask[node] >> (<uint64_t> X[i, f])) & 1:
                        node = left[node]
                    else:
                        node = right[node]
                elif X[i, f] < threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i] = node
    return out_a


def knn_moments(w_in, y_in, Py_ssize_t k):
    cdef double[::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef double[::1] y = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef Py_ssize_t n = w.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k must be in 1..{n}, got {k}")
    mu_a = np.empty(n, dtype=np.float64)
    var_a = np.empty(n, dtype=np.float64)
    cdef double[::1] mu_out = mu_a
    cdef double[::1] var_out = var_a
    cdef VI* vi = <VI*> malloc(n * sizeof(VI))
    cdef double* ws = <double*> malloc(n * sizeof(double))
    cdef double* ys = <double*> malloc(n * sizeof(double))
    cdef double* p1 = <double*> malloc((n + 1) * sizeof(double))
    cdef double* p2 = <double*> malloc((n + 1) * sizeof(double))
    cdef Py_ssize_t* starts = <Py_ssize_t*> malloc((n + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t t, b, nb, need, take, lo, hi, i, j, r, e
    cdef double v, s1, s2, dl, dr, mu, var
    if vi == NULL or ws == NULL or ys == NULL or p1 == NULL or p2 == NULL or starts == NULL:
        free(vi); free(ws); free(ys); free(p1); free(p2); free(starts)
        raise MemoryError()
    with nogil:
        for t in range(n):
            vi[t].v = w[t]
            vi[t].i = t
        qsort(vi, n, sizeof(VI), _cmp_vi)
        p1[0] = 0.0
        p2[0] = 0.0
        for t in range(n):
            ws[t] = vi[t].v
            ys[t] = y[vi[t].i]
        # cumsum semantics: first prefix is the first element itself
        for t in range(n):
            if t == 0:
                p1[1] = ys[0]
                p2[1] = ys[0] * ys[0]
            else:
                p1[t + 1] = p1[t] + ys[t]
                p2[t + 1] = p2[t] + ys[t] * ys[t]
        nb = 0
        for t in range(n):
            if t == 0 or ws[t] != ws[t - 1]:
                starts[nb] = t
                nb += 1
        starts[nb] = n
        for b in range(nb):
            v = ws[starts[b]]
            need = k
            take = starts[b + 1] - starts[b]
            if take > need:
                take = need
            s1 = p1[starts[b] + take] - p1[starts[b]]
            s2 = p2[starts[b] + take] - p2[starts[b]]
            need -= take
            lo = b - 1
            hi = b + 1
            while need > 0:
                dl = v - ws[starts[lo]] if lo >= 0 else INFINITY
                dr = ws[starts[hi]] - v if hi < nb else INFINITY
                if dl < dr:
                    take = starts[lo + 1] - starts[lo]
                    if take > need:
                        take = need
                    s1 += p1[starts[lo] + take] - p1[starts[lo]]
                    s2 += p2[starts[lo] + take] - p2[starts[lo]]
                    need -= take
                    lo -= 1
                elif dr < dl:
                    take = starts[hi + 1] - starts[hi]
                    if take > need:
                        take = need
                    s1 += p1[starts[hi] + take] - p1[starts[hi]]
                    s2 += p2[starts[hi] + take] - p2[starts[hi]]
                    need -= take
                    hi += 1
                else:
                    i = starts[lo]
                    j = starts[hi]
                    e = starts[hi + 1]
                    while need > 0 and (i < starts[lo + 1] or j < e):
                        if j >= e or (i < starts[lo + 1] and vi[i].i < vi[j].i):
                            r = i
                            i += 1
                        else:
                            r = j
                            j += 1
                        s1 += ys[r]
                        s2 += ys[r] * ys[r]
                        need -= 1
                    lo -= 1
                    hi += 1
            mu = s1 / k
            var = s2 / k - mu * mu
            if not (var > 0.0):
                var = 0.0
            for t in range(starts[b], starts[b + 1]):
                mu_out[vi[t].i] = mu
                var_out[vi[t].i] = var
    free(vi); free(ws); free(ys); free(p1); free(p2); free(starts)
    return mu_a, var_a
