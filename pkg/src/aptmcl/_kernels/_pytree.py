"""Numpy implementations of the tree kernels, used when the extension is absent."""

from __future__ import annotations

import numpy as np


def forest_apply(feature, threshold, left, right, roots, X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    node = np.broadcast_to(np.asarray(roots, dtype=np.int64), (X.shape[0], len(roots))).copy()
    rows = np.arange(X.shape[0])[:, None]
    f = feature[node]
    active = f >= 0
    while active.any():
        r, t = np.nonzero(active)
        cur = node[r, t]
        go_left = X[rows[r, 0], f[r, t]] < threshold[cur]
        node[r, t] = np.where(go_left, left[cur], right[cur])
        f[r, t] = feature[node[r, t]]
        active = f >= 0
    return node


def best_split(X, y, w, n_classes, min_leaf):
    n, d = X.shape
    tot = np.zeros(n_classes)
    np.add.at(tot, y, w)
    total_w = 0.0
    for k in range(n_classes):
        total_w += tot[k]
    best, best_f, best_thr = np.inf, -1, 0.0
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = w
    pos = np.arange(1, n)  # left child size after position i (i = pos - 1)
    size_ok = (pos >= min_leaf) & (n - pos >= min_leaf)
    for f in range(d):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cl = np.cumsum(onehot[order], axis=0)[:-1]
        wl = np.cumsum(w[order])[:-1]
        wr = total_w - wl
        ok = size_ok & (xs[:-1] < xs[1:]) & (wl > 0) & (wr > 0)
        if not ok.any():
            continue
        cr = tot - cl
        sl = np.zeros(n - 1)
        sr = np.zeros(n - 1)
        for k in range(n_classes):
            sl = sl + cl[:, k] * cl[:, k]
            sr = sr + cr[:, k] * cr[:, k]
        with np.errstate(divide="ignore", invalid="ignore"):
            imp = (wl - sl / wl) + (wr - sr / wr)
        imp = np.where(ok, imp, np.inf)
        i = int(np.argmin(imp))
        if imp[i] < best - 1e-12:
            a, b = xs[i], xs[i + 1]
            thr = (a + b) / 2.0
            if thr <= a:
                thr = b
            best, best_f, best_thr = float(imp[i]), f, float(thr)
    return best_f, best_thr, best
