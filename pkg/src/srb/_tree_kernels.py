"""Compiled kernels for weighted CART regression trees and forests.

Trees are stored as flat arrays (feature, threshold, left, right, value);
``feature == -1`` marks a leaf. Randomness (feature subsets, bootstrap
counts) comes from a splitmix64 generator seeded per tree so results do not
depend on any global state.
"""

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def _splitmix(state):
    state = state + _GOLDEN
    z = state
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    z = z ^ (z >> np.uint64(31))
    return state, z


@njit(cache=True)
def _randbelow(state, k):
    state, z = _splitmix(state)
    return state, np.int64(z % np.uint64(k))


@njit(cache=True)
def _build(X, y, w, cnt, rows, max_depth, min_leaf, mtry, seed,
           feat, thr, left, right, value):
    """Grow one tree on ``rows``; returns the number of nodes used."""
    n_rows = rows.shape[0]
    p = X.shape[1]
    state = np.uint64(seed)
    order = rows.copy()
    # explicit stack of (node, start, stop, depth)
    st_node = np.empty(2 * n_rows + 2, np.int64)
    st_lo = np.empty(2 * n_rows + 2, np.int64)
    st_hi = np.empty(2 * n_rows + 2, np.int64)
    st_dep = np.empty(2 * n_rows + 2, np.int64)
    top = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n_rows
    st_dep[0] = 0
    top = 1
    n_nodes = 1
    feats = np.arange(p)
    chosen = np.arange(p)
    n_chosen = p
    vals = np.empty(n_rows)
    idx = np.empty(n_rows, np.int64)
    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        depth = st_dep[top]
        W = 0.0
        S = 0.0
        C = 0
        constant = True
        y0 = y[order[lo]]
        for k in range(lo, hi):
            r = order[k]
            W += w[r]
            S += w[r] * y[r]
            C += cnt[r]
            if y[r] != y0:
                constant = False
        feat[node] = -1
        if constant:
            value[node] = y0
            continue
        mean = S / W
        value[node] = mean
        # centred sums keep split gains invariant to shifts of y
        Sc = 0.0
        sse = 0.0
        for k in range(lo, hi):
            r = order[k]
            d = y[r] - mean
            Sc += w[r] * d
            sse += w[r] * d * d
        if C < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue
        # feature subset, ascending order for deterministic tie-breaking
        if mtry < p:
            for k in range(p):
                feats[k] = k
            for k in range(mtry):
                state, u = _randbelow(state, p - k)
                tmp = feats[k]
                feats[k] = feats[k + u]
                feats[k + u] = tmp
            # insertion sort of the drawn subset
            for k in range(mtry):
                v = feats[k]
                j = k - 1
                while j >= 0 and chosen[j] > v:
                    chosen[j + 1] = chosen[j]
                    j -= 1
                chosen[j + 1] = v
            n_chosen = mtry
        base = Sc * Sc / W
        # gains within a relative 1e-9 count as ties and keep the earlier split
        best_gain = 1e-12 * sse
        best_f = -1
        best_t = 0.0
        m = hi - lo
        for fi in range(n_chosen):
            f = chosen[fi]
            for k in range(m):
                vals[k] = X[order[lo + k], f]
            perm = np.argsort(vals[:m])
            for k in range(m):
                idx[k] = order[lo + perm[k]]
            WL = 0.0
            SL = 0.0
            CL = 0
            for k in range(m - 1):
                r = idx[k]
                WL += w[r]
                SL += w[r] * (y[r] - mean)
                CL += cnt[r]
                a = X[r, f]
                b = X[idx[k + 1], f]
                if b <= a:
                    continue
                if CL < min_leaf or C - CL < min_leaf:
                    continue
                WR = W - WL
                SR = Sc - SL
                gain = SL * SL / WL + SR * SR / WR - base
                if gain > best_gain * (1.0 + 1e-9):
                    best_gain = gain
                    best_f = f
                    t = 0.5 * (a + b)
                    if t >= b:
                        t = a
                    best_t = t
        if best_f < 0:
            continue
        # partition rows of the node
        i = lo
        j = hi - 1
        while i <= j:
            if X[order[i], best_f] <= best_t:
                i += 1
            else:
                tmp = order[i]
                order[i] = order[j]
                order[j] = tmp
                j -= 1
        feat[node] = best_f
        thr[node] = best_t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        st_node[top] = n_nodes
        st_lo[top] = lo
        st_hi[top] = i
        st_dep[top] = depth + 1
        top += 1
        st_node[top] = n_nodes + 1
        st_lo[top] = i
        st_hi[top] = hi
        st_dep[top] = depth + 1
        top += 1
        n_nodes += 2
    return n_nodes


@njit(cache=True)
def grow_forest(X, y, w, n_trees, bootstrap, max_depth, min_leaf, mtry, seeds):
    """Grow ``n_trees`` trees; returns concatenated node arrays and offsets."""
    n = X.shape[0]
    cap = n_trees * (2 * n + 1)
    feat = np.full(cap, -1, np.int64)
    thr = np.zeros(cap)
    left = np.zeros(cap, np.int64)
    right = np.zeros(cap, np.int64)
    value = np.zeros(cap)
    offsets = np.zeros(n_trees + 1, np.int64)
    cnt = np.ones(n, np.int64)
    wt = np.empty(n)
    for t in range(n_trees):
        state = np.uint64(seeds[t])
        if bootstrap:
            cnt[:] = 0
            for k in range(n):
                state, u = _randbelow(state, n)
                cnt[u] += 1
        else:
            cnt[:] = 1
        n_used = 0
        for k in range(n):
            if cnt[k] > 0:
                n_used += 1
        rows = np.empty(n_used, np.int64)
        j = 0
        for k in range(n):
            wt[k] = w[k] * cnt[k]
            if cnt[k] > 0:
                rows[j] = k
                j += 1
        off = offsets[t]
        state, sub_seed = _splitmix(state)
        used = _build(X, y, wt, cnt, rows, max_depth, min_leaf, mtry, sub_seed,
                      feat[off:], thr[off:], left[off:], right[off:], value[off:])
        offsets[t + 1] = off + used
    end = offsets[n_trees]
    return feat[:end], thr[:end], left[:end], right[:end], value[:end], offsets


@njit(cache=True)
def predict_forest(Xq, feat, thr, left, right, value, offsets):
    """Mean prediction over the trees for each query row."""
    n_trees = offsets.shape[0] - 1
    out = np.zeros(Xq.shape[0])
    for t in range(n_trees):
        off = offsets[t]
        for i in range(Xq.shape[0]):
            node = 0
            while feat[off + node] >= 0:
                if Xq[i, feat[off + node]] <= thr[off + node]:
                    node = left[off + node]
                else:
                    node = right[off + node]
            out[i] += value[off + node]
    return out / n_trees
