"""Hot tree kernels, compiled when available.

``forest_apply`` routes every sample through every tree of a flattened
forest and returns the reached leaf ids. ``best_split`` finds the
weighted-Gini-optimal axis split of a node. The compiled module is used
unless it failed to build or ``APTMCL_PURE_PYTHON=1`` is set.
"""

from __future__ import annotations

import os

import numpy as np

from aptmcl._kernels import _pytree

try:
    from aptmcl._kernels import _ctree
except ImportError:  # extension not built
    _ctree = None

if _ctree is not None and os.environ.get("APTMCL_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    _impl, BACKEND = _ctree, "cython"
else:
    _impl, BACKEND = _pytree, "python"


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def forest_apply(feature, threshold, left, right, roots, X, backend=None):
    """Leaf reached by each row of ``X`` in each tree, shape (n, n_trees).

    Internal nodes have ``feature >= 0``; a sample goes left when
    ``X[i, feature] < threshold``. ``roots`` gives each tree's root id in
    the flattened arrays.
    """
    impl = backend or _impl
    return impl.forest_apply(_i64(feature), _f64(threshold), _i64(left), _i64(right), _i64(roots), _f64(X))


def best_split(X, y, w, n_classes, min_leaf=1, backend=None):
    """Best (feature, threshold, weighted child Gini) over all columns of ``X``.

    Returns feature ``-1`` when no valid split exists.
    """
    impl = backend or _impl
    f, thr, imp = impl.best_split(_f64(X), _i64(y), _f64(w), int(n_classes), int(min_leaf))
    return int(f), float(thr), float(imp)


__all__ = ["BACKEND", "best_split", "forest_apply"]
