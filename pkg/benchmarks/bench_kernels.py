"""Compare the compiled and pure-Python tree kernels.

Run from the repository root::

    python benchmarks/bench_kernels.py [--rows 20000] [--repeat 5]

Both backends are called on identical inputs; the script checks that they
agree before reporting timings.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from aptmcl import _kernels
from aptmcl._kernels import _pytree
from aptmcl.iforest import IsolationForest

try:
    from aptmcl._kernels import _ctree
except ImportError:
    _ctree = None


def _cases(n_rows: int, seed: int):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n_rows, 15))
    forest = IsolationForest(n_trees=100, subsample=256, rng_seed=seed).fit(X)
    feature, threshold, left, right, roots, _ = forest._flatten()
    Xs = rng.normal(size=(2000, 15))
    y = (Xs[:, 0] + 0.5 * rng.normal(size=2000) > 0).astype(np.int64)
    w = np.ones(2000)
    return {
        "forest_apply (100 trees)": lambda impl: _kernels.forest_apply(
            feature, threshold, left, right, roots, X, backend=impl
        ),
        "best_split (2000x15)": lambda impl: _kernels.best_split(Xs, y, w, 2, backend=impl),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if _ctree is None:
        print("compiled extension not built; only the Python backend is available")
    print(f"default backend: {_kernels.BACKEND}")
    print(f"{'kernel':28s} {'python (s)':>11s} {'cython (s)':>11s} {'speedup':>8s}")
    for name, fn in _cases(args.rows, args.seed).items():
        py = min(timeit.repeat(lambda: fn(_pytree), number=1, repeat=args.repeat))
        if _ctree is None:
            print(f"{name:28s} {py:11.4f} {'-':>11s} {'-':>8s}")
            continue
        a, b = fn(_pytree), fn(_ctree)
        if not np.array_equal(np.asarray(a), np.asarray(b)):
            raise SystemExit(f"{name}: backends disagree")
        cy = min(timeit.repeat(lambda: fn(_ctree), number=1, repeat=args.repeat))
        print(f"{name:28s} {py:11.4f} {cy:11.4f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
