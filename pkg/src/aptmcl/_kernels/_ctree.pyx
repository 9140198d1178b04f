# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tree kernels: forest traversal and best Gini split search."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t INT
ctypedef cnp.float64_t REAL


def forest_apply(INT[::1] feature, REAL[::1] threshold, INT[::1] left, INT[::1] right,
                 INT[::1] roots, REAL[:, ::1] X):
    cdef Py_ssize_t n = X.shape[0], t_count = roots.shape[0]
    cdef Py_ssize_t i, t
    cdef INT node, f
    out_arr = np.empty((n, t_count), dtype=np.int64)
    cdef INT[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            for t in range(t_count):
                node = roots[t]
                f = feature[node]
                while f >= 0:
                    if X[i, f] < threshold[node]:
                        node = left[node]
                    else:
                        node = right[node]
                    f = feature[node]
                out[i, t] = node
    return out_arr


def best_split(REAL[:, ::1] X, INT[::1] y, REAL[::1] w, int n_classes, int min_leaf):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t f, i, k, j
    cdef REAL total_w = 0.0, wl, wr, sl, sr, c, imp, a, b, thr
    cdef REAL best = np.inf, fbest
    cdef INT best_f = -1
    cdef Py_ssize_t fpos
    cdef REAL best_thr = 0.0
    cdef REAL[::1] tot = np.zeros(n_classes)
    cdef REAL[::1] cl = np.zeros(n_classes)
    cdef INT[::1] order
    for i in range(n):
        tot[y[i]] += w[i]
    for k in range(n_classes):
        total_w += tot[k]
    for f in range(d):
        order = np.argsort(np.asarray(X[:, f]), kind="stable").astype(np.int64)
        for k in range(n_classes):
            cl[k] = 0.0
        wl = 0.0
        fbest = np.inf
        fpos = -1
        for i in range(n - 1):
            j = order[i]
            cl[y[j]] += w[j]
            wl += w[j]
            if i + 1 < min_leaf or n - i - 1 < min_leaf:
                continue
            a = X[j, f]
            b = X[order[i + 1], f]
            if not a < b:
                continue
            wr = total_w - wl
            if wl <= 0.0 or wr <= 0.0:
                continue
            sl = 0.0
            sr = 0.0
            for k in range(n_classes):
                c = cl[k]
                sl += c * c
                c = tot[k] - cl[k]
                sr += c * c
            imp = (wl - sl / wl) + (wr - sr / wr)
            if imp < fbest:
                fbest = imp
                fpos = i
        # features compete with a tolerance so near-ties keep the lower index
        if fpos >= 0 and fbest < best - 1e-12:
            a = X[order[fpos], f]
            b = X[order[fpos + 1], f]
            thr = (a + b) / 2.0
            if thr <= a:
                thr = b
            best = fbest
            best_f = f
            best_thr = thr
    return best_f, best_thr, best
