"""Compiled CART kernels: Gini tree growth and batch traversal."""
import numba
import numpy as np


@numba.njit(cache=True)
def _next(state):
    # xorshift64*
    x = state[0]
    x ^= x >> np.uint64(12)
    x ^= x << np.uint64(25)
    x ^= x >> np.uint64(27)
    state[0] = x
    return x * np.uint64(2685821657736338717)


@numba.njit(cache=True)
def _randbelow(state, n):
    return np.int64(_next(state) >> np.uint64(11)) % n


@numba.njit(cache=True)
def _sumsq(counts):
    s = 0.0
    for k in range(counts.shape[0]):
        s += counts[k] * counts[k]
    return s


@numba.njit(cache=True)
def grow_tree(X, y, samples, n_classes, max_features, min_leaf, max_depth, seed):
    """Grow one tree on ``X[samples]`` (``samples`` may repeat rows).

    Returns node arrays: feature (-1 for leaves), threshold, left, right,
    class counts per node and the weighted Gini decrease of every split.
    """
    n_total = samples.shape[0]
    n_feat = X.shape[1]
    cap = 2 * n_total + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap, np.float64)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    counts = np.zeros((cap, n_classes), np.float64)
    gain = np.zeros(cap, np.float64)

    idx = samples.copy()
    state = np.empty(1, np.uint64)
    state[0] = np.uint64(seed) | np.uint64(1)
    feats = np.arange(n_feat)
    vals = np.empty(n_total, np.float64)
    labs = np.empty(n_total, np.int64)
    lc = np.zeros(n_classes, np.float64)
    rc = np.zeros(n_classes, np.float64)

    stack = np.empty((cap, 4), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n_total
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        n = end - start
        for i in range(start, end):
            counts[node, y[idx[i]]] += 1.0
        parent_sq = _sumsq(counts[node])
        if parent_sq == n * n or n < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue

        best_score = -1.0
        best_f = -1
        best_t = 0.0
        visited = 0
        drawn = 0
        # partial Fisher-Yates over features; constant features do not count
        while drawn < n_feat and visited < max_features:
            j = drawn + _randbelow(state, n_feat - drawn)
            tmp = feats[drawn]
            feats[drawn] = feats[j]
            feats[j] = tmp
            f = feats[drawn]
            drawn += 1
            for i in range(n):
                vals[i] = X[idx[start + i], f]
            order = np.argsort(vals[:n], kind="mergesort")
            if vals[order[0]] == vals[order[n - 1]]:
                continue
            visited += 1
            for i in range(n):
                labs[i] = y[idx[start + order[i]]]
            lc[:] = 0.0
            rc[:] = counts[node]
            lsq = 0.0
            rsq = parent_sq
            for i in range(n - 1):
                k = labs[i]
                lsq += 2.0 * lc[k] + 1.0
                rsq -= 2.0 * rc[k] - 1.0
                lc[k] += 1.0
                rc[k] -= 1.0
                nl = i + 1
                nr = n - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                v0 = vals[order[i]]
                v1 = vals[order[i + 1]]
                if v0 == v1:
                    continue
                score = lsq / nl + rsq / nr
                if score > best_score + 1e-12 * score:
                    best_score = score
                    best_f = f
                    t = 0.5 * (v0 + v1)
                    if t >= v1:
                        t = v0
                    best_t = t
        if best_f < 0:
            continue

        # partition idx[start:end] so that values <= threshold come first
        lo = start
        hi = end - 1
        while lo <= hi:
            if X[idx[lo], best_f] <= best_t:
                lo += 1
            else:
                tmp = idx[lo]
                idx[lo] = idx[hi]
                idx[hi] = tmp
                hi -= 1
        nl = lo - start
        # weighted decrease: n*gini(parent) - nl*gini(left) - nr*gini(right), over n_total
        gain[node] = (best_score - parent_sq / n) / n_total
        feature[node] = best_f
        threshold[node] = best_t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack[top, 0] = n_nodes + 1
        stack[top, 1] = lo
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = n_nodes
        stack[top, 1] = start
        stack[top, 2] = lo
        stack[top, 3] = depth + 1
        top += 1
        n_nodes += 2
        if nl == 0 or nl == n:
            raise RuntimeError("split did not partition the node")

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), counts[:n_nodes].copy(), gain[:n_nodes].copy())


@numba.njit(cache=True)
def apply_tree(X, feature, threshold, left, right):
    """Leaf index reached by every row of ``X``."""
    out = np.empty(X.shape[0], np.int64)
    for r in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = node
    return out
