"""Numba kernels for exact-greedy gradient boosted regression trees.

Trees are stored in implicit heap layout: node i has children 2i+1 and
2i+2; feature[i] < 0 marks a leaf whose prediction is value[i]. Split
search is exact greedy over presorted feature values with the variance
reduction criterion; candidate thresholds sit midway between consecutive
distinct values inside a node.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def boost_fit(X, y, n_trees, learning_rate, max_depth, min_leaf,
              subsample_frac, seed):
    n, p = X.shape
    n_nodes = 2 ** (max_depth + 1) - 1
    feat_out = np.full((n_trees, n_nodes), -1, dtype=np.int64)
    thr_out = np.zeros((n_trees, n_nodes))
    val_out = np.zeros((n_trees, n_nodes))
    losses = np.zeros(n_trees)

    # one presort reused by every tree
    order = np.empty((p, n), dtype=np.int64)
    for j in range(p):
        order[j] = np.argsort(X[:, j])

    init = y.mean()
    pred = np.full(n, init)
    resid = np.empty(n)

    np.random.seed(seed)
    n_sub = int(subsample_frac * n)
    if n_sub < 1:
        n_sub = 1

    in_node = np.empty(n, dtype=np.int64)
    node_cnt = np.zeros(n_nodes, dtype=np.int64)
    node_sum = np.zeros(n_nodes)
    best_gain = np.empty(n_nodes)
    best_feat = np.empty(n_nodes, dtype=np.int64)
    best_thr = np.empty(n_nodes)
    cnt_l = np.zeros(n_nodes, dtype=np.int64)
    sum_l = np.zeros(n_nodes)
    prev_val = np.zeros(n_nodes)

    for tree in range(n_trees):
        for i in range(n):
            resid[i] = y[i] - pred[i]
            in_node[i] = -1
        if n_sub < n:
            perm = np.random.permutation(n)
            for s in range(n_sub):
                in_node[perm[s]] = 0
        else:
            for i in range(n):
                in_node[i] = 0
        node_cnt[0] = 0
        node_sum[0] = 0.0
        for i in range(n):
            if in_node[i] == 0:
                node_cnt[0] += 1
                node_sum[0] += resid[i]

        feat_t = feat_out[tree]
        thr_t = thr_out[tree]
        val_t = val_out[tree]

        for level in range(max_depth):
            lo = (1 << level) - 1
            hi = (1 << (level + 1)) - 1
            any_active = False
            for nd in range(lo, hi):
                best_gain[nd] = -1.0
                best_feat[nd] = -1
                if node_cnt[nd] > 0:
                    any_active = True
            if not any_active:
                break
            for j in range(p):
                for nd in range(lo, hi):
                    cnt_l[nd] = 0
                    sum_l[nd] = 0.0
                for ii in range(n):
                    r = order[j, ii]
                    nd = in_node[r]
                    if nd < lo or nd >= hi:
                        continue
                    v = X[r, j]
                    cl = cnt_l[nd]
                    if cl > 0 and v > prev_val[nd]:
                        nr = node_cnt[nd] - cl
                        if cl >= min_leaf and nr >= min_leaf:
                            sl = sum_l[nd]
                            sr = node_sum[nd] - sl
                            gain = sl * sl / cl + sr * sr / nr
                            if gain > best_gain[nd]:
                                best_gain[nd] = gain
                                best_feat[nd] = j
                                best_thr[nd] = 0.5 * (prev_val[nd] + v)
                    cnt_l[nd] = cl + 1
                    sum_l[nd] += resid[r]
                    prev_val[nd] = v
            for nd in range(lo, hi):
                cnt = node_cnt[nd]
                if cnt == 0:
                    continue
                parent_score = node_sum[nd] * node_sum[nd] / cnt
                eps = 1e-12 + 1e-12 * abs(parent_score)
                if best_feat[nd] >= 0 and best_gain[nd] > parent_score + eps:
                    feat_t[nd] = best_feat[nd]
                    thr_t[nd] = best_thr[nd]
                    node_cnt[2 * nd + 1] = 0
                    node_sum[2 * nd + 1] = 0.0
                    node_cnt[2 * nd + 2] = 0
                    node_sum[2 * nd + 2] = 0.0
                else:
                    feat_t[nd] = -1
                    val_t[nd] = node_sum[nd] / cnt
            for i in range(n):
                nd = in_node[i]
                if lo <= nd < hi and feat_t[nd] >= 0:
                    if X[i, feat_t[nd]] <= thr_t[nd]:
                        child = 2 * nd + 1
                    else:
                        child = 2 * nd + 2
                    in_node[i] = child
                    node_cnt[child] += 1
                    node_sum[child] += resid[i]

        lo = (1 << max_depth) - 1
        hi = (1 << (max_depth + 1)) - 1
        for nd in range(lo, hi):
            if node_cnt[nd] > 0:
                feat_t[nd] = -1
                val_t[nd] = node_sum[nd] / node_cnt[nd]

        loss = 0.0
        for i in range(n):
            nd = 0
            while feat_t[nd] >= 0:
                if X[i, feat_t[nd]] <= thr_t[nd]:
                    nd = 2 * nd + 1
                else:
                    nd = 2 * nd + 2
            pred[i] += learning_rate * val_t[nd]
            diff = y[i] - pred[i]
            loss += diff * diff
        losses[tree] = loss / n
    return init, feat_out, thr_out, val_out, losses


@njit(cache=True)
def boost_predict(X, init, learning_rate, feat, thr, val):
    n = X.shape[0]
    out = np.full(n, init)
    for t in range(feat.shape[0]):
        for i in range(n):
            nd = 0
            while feat[t, nd] >= 0:
                if X[i, feat[t, nd]] <= thr[t, nd]:
                    nd = 2 * nd + 1
                else:
                    nd = 2 * nd + 2
            out[i] += learning_rate * val[t, nd]
    return out
