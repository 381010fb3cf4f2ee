"""Histogram gradient-boosted trees of fixed depth.

Trees are complete binary trees stored level-order: node ``t`` has children
``2t+1`` and ``2t+2``; internal nodes come first, then ``2**depth`` leaves.
A node that finds no admissible split sends every row left (threshold equal
to the last bin), so all trees share one array shape.
"""
from __future__ import annotations

import numpy as np
from numba import njit

MAX_BIN_LIMIT = 65535


def bin_edges(X: np.ndarray, max_bins: int) -> list:
    """Per-feature split thresholds: midpoints between adjacent distinct values.

    When a feature has more than ``max_bins`` distinct values the thresholds
    are taken at empirical quantiles (still placed midway between two
    neighbouring observed values, so no training row sits on an edge).
    """
    edges = []
    for f in range(X.shape[1]):
        u = np.unique(X[:, f])
        if len(u) <= 1:
            edges.append(np.empty(0))
            continue
        mids = 0.5 * (u[1:] + u[:-1])
        if len(u) > max_bins:
            col = np.sort(X[:, f])
            pos = np.linspace(0, len(col) - 1, max_bins + 1)[1:-1].astype(np.int64)
            lo = col[pos]
            idx = np.searchsorted(u, lo, side="right")
            idx = np.unique(np.clip(idx, 1, len(u) - 1))
            mids = 0.5 * (u[idx] + u[idx - 1])
        edges.append(mids)
    return edges


def apply_bins(X: np.ndarray, edges: list) -> np.ndarray:
    out = np.empty(X.shape, dtype=np.uint16)
    for f, e in enumerate(edges):
        out[:, f] = np.searchsorted(e, X[:, f], side="left")
    return out


@njit(cache=True)
def _node_hist(XbT, rows, lo, hi, g, h, out):
    k = XbT.shape[0]
    for f in range(k):
        col = XbT[f]
        for idx in range(lo, hi):
            i = rows[idx]
            b = col[i]
            out[f, b, 0] += g[i]
            out[f, b, 1] += h[i]
            out[f, b, 2] += 1.0


@njit(cache=True)
def _grow_tree(XbT, n_bins, g, h, depth, min_leaf, lam, rows, node_of, feat, thr, leaf):
    """Grow one tree; ``rows`` is reordered so each node owns a contiguous segment.

    Only the smaller child of each split is histogrammed; its sibling is the
    parent histogram minus the child's.
    """
    k, n = XbT.shape
    n_internal = (1 << depth) - 1
    n_nodes = 2 * n_internal + 1
    max_b = 0
    for f in range(k):
        if n_bins[f] > max_b:
            max_b = n_bins[f]
    hist = np.zeros((max(n_internal, 1), k, max_b, 3))
    start = np.zeros(n_nodes + 1, dtype=np.int64)
    stop = np.zeros(n_nodes + 1, dtype=np.int64)
    for i in range(n):
        rows[i] = i
    stop[0] = n
    if n_internal > 0:
        _node_hist(XbT, rows, 0, n, g, h, hist[0])
    for node in range(n_internal):
        H = hist[node]
        gt = 0.0
        ht = 0.0
        ct = 0.0
        for b in range(n_bins[0]):
            gt += H[0, b, 0]
            ht += H[0, b, 1]
            ct += H[0, b, 2]
        best_gain = 1e-12
        best_f = -1
        best_b = 0
        parent = gt * gt / (ht + lam)
        if ct >= 2 * min_leaf:
            for f in range(k):
                gl = 0.0
                hl = 0.0
                cl = 0.0
                for b in range(n_bins[f] - 1):
                    gl += H[f, b, 0]
                    hl += H[f, b, 1]
                    cl += H[f, b, 2]
                    if cl < min_leaf:
                        continue
                    if ct - cl < min_leaf:
                        break
                    gr = gt - gl
                    hr = ht - hl
                    gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_b = b
        if best_f < 0:
            feat[node] = 0
            thr[node] = MAX_BIN_LIMIT
        else:
            feat[node] = best_f
            thr[node] = best_b
        # partition the node's segment: left rows first
        lo = start[node]
        hi = stop[node]
        col = XbT[feat[node]]
        t = thr[node]
        a = lo
        z = hi - 1
        while a <= z:
            if col[rows[a]] <= t:
                a += 1
            else:
                tmp = rows[a]
                rows[a] = rows[z]
                rows[z] = tmp
                z -= 1
        left = 2 * node + 1
        right = left + 1
        start[left] = lo
        stop[left] = a
        start[right] = a
        stop[right] = hi
        if left < n_internal:
            if a - lo <= hi - a:
                small, big = left, right
            else:
                small, big = right, left
            _node_hist(XbT, rows, start[small], stop[small], g, h, hist[small])
            for f in range(k):
                for b in range(max_b):
                    for c in range(3):
                        hist[big, f, b, c] = H[f, b, c] - hist[small, f, b, c]
    n_leaves = 1 << depth
    for t in range(n_leaves):
        node = n_internal + t
        gs = 0.0
        hs = 0.0
        for idx in range(start[node], stop[node]):
            i = rows[idx]
            gs += g[i]
            hs += h[i]
            node_of[i] = t
        leaf[t] = -gs / (hs + lam)


@njit(cache=True)
def _boost(XbT, n_bins, y, w, base, n_trees, depth, lr, min_leaf, lam, logistic):
    n = XbT.shape[1]
    n_internal = (1 << depth) - 1
    n_leaves = 1 << depth
    feats = np.zeros((n_trees, max(n_internal, 1)), dtype=np.int64)
    thrs = np.zeros((n_trees, max(n_internal, 1)), dtype=np.int64)
    leaves = np.zeros((n_trees, n_leaves))
    f = np.full(n, base)
    g = np.empty(n)
    h = np.empty(n)
    node_of = np.empty(n, dtype=np.int64)
    rows = np.empty(n, dtype=np.int64)
    for m in range(n_trees):
        for i in range(n):
            if logistic:
                p = 1.0 / (1.0 + np.exp(-f[i]))
                g[i] = w[i] * (p - y[i])
                h[i] = w[i] * max(p * (1.0 - p), 1e-12)
            else:
                g[i] = w[i] * (f[i] - y[i])
                h[i] = w[i]
        _grow_tree(XbT, n_bins, g, h, depth, min_leaf, lam, rows, node_of,
                   feats[m], thrs[m], leaves[m])
        for t in range(n_leaves):
            leaves[m, t] *= lr
        for i in range(n):
            f[i] += leaves[m, node_of[i]]
    return feats, thrs, leaves


@njit(cache=True)
def _predict(Xb, base, feats, thrs, leaves, depth):
    n = Xb.shape[0]
    n_trees = leaves.shape[0]
    n_internal = (1 << depth) - 1
    out = np.full(n, base)
    for i in range(n):
        acc = base
        for m in range(n_trees):
            node = 0
            for _ in range(depth):
                if Xb[i, feats[m, node]] <= thrs[m, node]:
                    node = 2 * node + 1
                else:
                    node = 2 * node + 2
            acc += leaves[m, node - n_internal]
        out[i] = acc
    return out


class BoostedTrees:
    """Squared-error (identity) or logistic boosting on binned features.

    ``predict_raw`` returns the additive score; for the logistic case the
    caller applies the inverse logit.
    """

    def __init__(self, trees=100, depth=2, learning_rate=0.1, min_leaf=5,
                 l2=1.0, max_bins=255, logistic=False):
        self.trees = trees
        self.depth = depth
        self.learning_rate = learning_rate
        self.min_leaf = min_leaf
        self.l2 = l2
        self.max_bins = max_bins
        self.logistic = logistic

    def fit(self, X, y, sample_weight=None):
        X = np.ascontiguousarray(X, dtype=float)
        return self.fit_binned(Binned.from_data(X, self.max_bins), y, sample_weight)

    def fit_binned(self, binned: "Binned", y, sample_weight=None):
        """Fit on features already binned (lets several models share one binning)."""
        y = np.asarray(y, dtype=float)
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        self.edges_ = binned.edges
        ybar = float(np.average(y, weights=w))
        if self.logistic:
            ybar = min(max(ybar, 1e-6), 1 - 1e-6)
            self.base_ = float(np.log(ybar / (1 - ybar)))
        else:
            self.base_ = ybar
        self.feats_, self.thrs_, self.leaves_ = _boost(
            binned.XbT, binned.n_bins, y, w, self.base_, int(self.trees), int(self.depth),
            float(self.learning_rate), int(self.min_leaf), float(self.l2), bool(self.logistic))
        return self

    def predict_raw(self, X):
        return self.predict_binned(apply_bins(np.ascontiguousarray(X, dtype=float), self.edges_))

    def predict_binned(self, Xb):
        return _predict(Xb, self.base_, self.feats_, self.thrs_, self.leaves_, int(self.depth))


class Binned:
    """Bin edges plus the feature-major binned matrix of one training set."""

    def __init__(self, edges, Xb):
        self.edges = edges
        self.XbT = np.ascontiguousarray(Xb.T)
        self.n_bins = np.array([len(e) + 1 for e in edges], dtype=np.int64)

    @classmethod
    def from_data(cls, X, max_bins):
        edges = bin_edges(X, max_bins)
        return cls(edges, apply_bins(X, edges))
