"""Compiled kernels for growing and evaluating honest trees.

Both kernels grow a tree depth-first over two row sets: ``srows`` decide the
splits, ``erows`` populate the leaves.  For a non-honest tree pass the same
array twice.  Nodes are stored as flat arrays; ``feature == -1`` marks a leaf.
Samples go left when ``x[feature] <= threshold``.
"""

import numpy as np
from numba import njit

LEAF = -1


@njit(cache=True, nogil=True)
def _draw_features(k, mtry):
    perm = np.arange(k)
    for i in range(mtry):
        j = i + np.random.randint(k - i)
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    return perm[:mtry]


@njit(cache=True, nogil=True)
def _partition(rows, lo, hi, X, feat, thr, buf):
    """Stable in-place partition of rows[lo:hi]; returns the split position."""
    nl = 0
    for i in range(lo, hi):
        if X[rows[i], feat] <= thr:
            buf[nl] = rows[i]
            nl += 1
    pos = nl
    for i in range(lo, hi):
        if X[rows[i], feat] > thr:
            buf[pos] = rows[i]
            pos += 1
    for i in range(hi - lo):
        rows[lo + i] = buf[i]
    return lo + nl


@njit(cache=True, nogil=True)
def _threshold(a, b):
    thr = 0.5 * (a + b)
    if thr >= b:
        thr = a
    return thr


@njit(cache=True, nogil=True)
def _better(gain, feat, thr, best_gain, best_feat, best_thr):
    if gain > best_gain:
        return True
    if gain == best_gain and best_feat >= 0:
        if feat < best_feat:
            return True
        if feat == best_feat and thr < best_thr:
            return True
    return False


@njit(cache=True, nogil=True)
def grow_regression(X, y, srows, erows, mtry, min_leaf, alpha, seed):
    """Grow a variance-reduction tree.

    Every child must hold at least ``min_leaf`` structure rows and
    ``min_leaf`` estimation rows, and at least ``alpha`` of the parent's
    structure rows.
    """
    np.random.seed(seed)
    n_rows, k = X.shape
    srows = srows.copy()
    erows = erows.copy()
    ns = srows.shape[0]
    ne = erows.shape[0]
    cap = 2 * max(ns, ne) + 1
    feature = np.full(cap, LEAF, dtype=np.int32)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    value = np.zeros(cap)
    count = np.zeros(cap, dtype=np.int32)
    buf = np.empty(max(ns, ne), dtype=srows.dtype)

    # stack entries: node, s_lo, s_hi, e_lo, e_hi
    stack = np.empty((cap, 5), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = ns
    stack[0, 3] = 0
    stack[0, 4] = ne
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        s_lo = stack[top, 1]
        s_hi = stack[top, 2]
        e_lo = stack[top, 3]
        e_hi = stack[top, 4]
        m = s_hi - s_lo
        me = e_hi - e_lo

        tot = 0.0
        sq = 0.0
        for i in range(s_lo, s_hi):
            v = y[srows[i]]
            tot += v
            sq += v * v
        base = tot * tot / m
        tol = 1e-12 * sq
        min_child = max(min_leaf, int(np.ceil(alpha * m)))

        best_gain = tol
        best_feat = -1
        best_thr = 0.0
        if m >= 2 * min_child and me >= 2 * min_leaf:
            feats = _draw_features(k, mtry)
            vals = np.empty(m)
            evals = np.empty(me)
            for f in feats:
                for i in range(m):
                    vals[i] = X[srows[s_lo + i], f]
                order = np.argsort(vals)
                for i in range(me):
                    evals[i] = X[erows[e_lo + i], f]
                evals.sort()
                s_left = 0.0
                ptr = 0
                for i in range(m - 1):
                    s_left += y[srows[s_lo + order[i]]]
                    a = vals[order[i]]
                    b = vals[order[i + 1]]
                    if a == b:
                        continue
                    nl = i + 1
                    nr = m - nl
                    if nl < min_child:
                        continue
                    if nr < min_child:
                        break
                    thr = _threshold(a, b)
                    while ptr < me and evals[ptr] <= thr:
                        ptr += 1
                    if ptr < min_leaf:
                        continue
                    if me - ptr < min_leaf:
                        break
                    s_right = tot - s_left
                    gain = s_left * s_left / nl + s_right * s_right / nr - base
                    if _better(gain, f, thr, best_gain, best_feat, best_thr):
                        best_gain = gain
                        best_feat = f
                        best_thr = thr

        if best_feat < 0:
            acc = 0.0
            for i in range(e_lo, e_hi):
                acc += y[erows[i]]
            value[node] = acc / me
            count[node] = me
            continue

        s_mid = _partition(srows, s_lo, s_hi, X, best_feat, best_thr, buf)
        e_mid = _partition(erows, e_lo, e_hi, X, best_feat, best_thr, buf)
        feature[node] = best_feat
        threshold[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        count[node] = me
        # push right first so the left subtree is numbered first
        stack[top, 0] = rc
        stack[top, 1] = s_mid
        stack[top, 2] = s_hi
        stack[top, 3] = e_mid
        stack[top, 4] = e_hi
        top += 1
        stack[top, 0] = lc
        stack[top, 1] = s_lo
        stack[top, 2] = s_mid
        stack[top, 3] = e_lo
        stack[top, 4] = e_mid
        top += 1

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], value[:n_nodes], count[:n_nodes])


@njit(cache=True, nogil=True)
def robinson_theta_rows(ry, rd, rows, lo, hi):
    num = 0.0
    den = 0.0
    for i in range(lo, hi):
        r = rows[i]
        num += rd[r] * ry[r]
        den += rd[r] * rd[r]
    return num, den


@njit(cache=True, nogil=True)
def grow_causal(X, ry, rd, d, srows, erows, mtry, min_node, alpha, seed):
    """Grow a causal tree on residualized outcome/treatment.

    Splits maximize ``(sum_L rho)^2 / n_L + (sum_R rho)^2 / n_R`` where rho is
    the per-row gradient of the node's residual-on-residual fit.  Both the
    structure and estimation halves of each child need ``min_node`` treated
    and ``min_node`` control rows.
    """
    np.random.seed(seed)
    n_rows, k = X.shape
    srows = srows.copy()
    erows = erows.copy()
    ns = srows.shape[0]
    ne = erows.shape[0]
    cap = 2 * max(ns, ne) + 1
    feature = np.full(cap, LEAF, dtype=np.int32)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    value = np.zeros(cap)
    n_treated = np.zeros(cap, dtype=np.int32)
    n_control = np.zeros(cap, dtype=np.int32)
    buf = np.empty(max(ns, ne), dtype=srows.dtype)
    rho = np.zeros(n_rows)

    stack = np.empty((cap, 5), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = ns
    stack[0, 3] = 0
    stack[0, 4] = ne
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        s_lo = stack[top, 1]
        s_hi = stack[top, 2]
        e_lo = stack[top, 3]
        e_hi = stack[top, 4]
        m = s_hi - s_lo
        me = e_hi - e_lo

        st = 0
        for i in range(s_lo, s_hi):
            st += d[srows[i]]
        et = 0
        for i in range(e_lo, e_hi):
            et += d[erows[i]]

        num, den = robinson_theta_rows(ry, rd, srows, s_lo, s_hi)
        min_child = max(2 * min_node, int(np.ceil(alpha * m)))
        best_feat = -1
        best_thr = 0.0
        splittable = (den > 0.0 and st >= 2 * min_node
                      and m - st >= 2 * min_node and et >= 2 * min_node
                      and me - et >= 2 * min_node and m >= 2 * min_child)
        if splittable:
            theta = num / den
            a_p = den / m
            tot = 0.0
            scale = 0.0
            for i in range(s_lo, s_hi):
                r = srows[i]
                g = rd[r] * (ry[r] - rd[r] * theta) / a_p
                rho[r] = g
                tot += g
                scale += ry[r] * ry[r]
            base = tot * tot / m
            best_gain = 1e-12 * scale / a_p

            feats = _draw_features(k, mtry)
            vals = np.empty(m)
            evals = np.empty(me)
            for f in feats:
                for i in range(m):
                    vals[i] = X[srows[s_lo + i], f]
                order = np.argsort(vals)
                for i in range(me):
                    evals[i] = X[erows[e_lo + i], f]
                eorder = np.argsort(evals)
                s_left = 0.0
                t_left = 0
                ptr = 0
                et_left = 0
                for i in range(m - 1):
                    r = srows[s_lo + order[i]]
                    s_left += rho[r]
                    t_left += d[r]
                    a = vals[order[i]]
                    b = vals[order[i + 1]]
                    if a == b:
                        continue
                    nl = i + 1
                    nr = m - nl
                    if nl < min_child:
                        continue
                    if nr < min_child:
                        break
                    thr = _threshold(a, b)
                    while ptr < me and evals[eorder[ptr]] <= thr:
                        et_left += d[erows[e_lo + eorder[ptr]]]
                        ptr += 1
                    if (t_left < min_node or nl - t_left < min_node
                            or st - t_left < min_node
                            or (nr - (st - t_left)) < min_node):
                        continue
                    if (et_left < min_node or ptr - et_left < min_node
                            or et - et_left < min_node
                            or (me - ptr) - (et - et_left) < min_node):
                        continue
                    s_right = tot - s_left
                    gain = s_left * s_left / nl + s_right * s_right / nr - base
                    if _better(gain, f, thr, best_gain, best_feat, best_thr):
                        best_gain = gain
                        best_feat = f
                        best_thr = thr

        n_treated[node] = et
        n_control[node] = me - et
        if best_feat < 0:
            num_e, den_e = robinson_theta_rows(ry, rd, erows, e_lo, e_hi)
            if den_e > 0.0:
                value[node] = num_e / den_e
            else:
                value[node] = np.nan
            continue

        s_mid = _partition(srows, s_lo, s_hi, X, best_feat, best_thr, buf)
        e_mid = _partition(erows, e_lo, e_hi, X, best_feat, best_thr, buf)
        feature[node] = best_feat
        threshold[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        stack[top, 0] = rc
        stack[top, 1] = s_mid
        stack[top, 2] = s_hi
        stack[top, 3] = e_mid
        stack[top, 4] = e_hi
        top += 1
        stack[top, 0] = lc
        stack[top, 1] = s_lo
        stack[top, 2] = s_mid
        stack[top, 3] = e_lo
        stack[top, 4] = e_mid
        top += 1

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], value[:n_nodes], n_treated[:n_nodes],
            n_control[:n_nodes])


@njit(cache=True, nogil=True)
def apply_tree(feature, threshold, left, right, X):
    """Leaf index reached by every row of X."""
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] != LEAF:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@njit(cache=True, nogil=True)
def predict_forest(feature, threshold, left, right, value, offsets, use,
                   X, row_cluster, inbag):
    """Average leaf values over trees.

    ``offsets[t]`` is tree t's first node in the concatenated arrays.  Trees
    with ``use[t] == False`` are skipped.  When ``inbag`` has rows, tree t is
    also skipped for row i whenever ``inbag[t, row_cluster[i]]`` is set
    (out-of-bag prediction).
    """
    n = X.shape[0]
    n_trees = offsets.shape[0]
    total = np.zeros(n)
    counts = np.zeros(n, dtype=np.int64)
    oob = inbag.shape[0] > 0
    for t in range(n_trees):
        if not use[t]:
            continue
        base = offsets[t]
        for i in range(n):
            if oob and inbag[t, row_cluster[i]]:
                continue
            node = 0
            while feature[base + node] != LEAF:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            total[i] += value[base + node]
            counts[i] += 1
    return total, counts
