"""Isolation forest over process embeddings.

Scores follow ``s(x, n) = 2 ** (-E[h(x)] / c(n))`` where ``h`` is the path
length to the isolating leaf (plus ``c(leaf size)`` for unresolved leaves)
and ``c(n) = 2 H(n-1) - 2 (n-1) / n`` is the average unsuccessful-search
length of a binary search tree on ``n`` points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from aptmcl import _kernels
from aptmcl.errors import DegenerateDataError, DimensionError, NotFittedError

MALICIOUS_THRESHOLD = 0.5


def harmonic(m: int) -> float:
    return math.fsum(1.0 / i for i in range(1, m + 1))


def average_path_length(n: int) -> float:
    """``c(n)``: expected path length of an unsuccessful BST search."""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


@dataclass
class IsolationTree:
    """One tree in flattened pre-order form.

    Internal nodes carry ``feature >= 0`` and a ``threshold`` strictly inside
    the range of the residual sample on that feature; leaves carry
    ``feature == -1`` and the residual sample ``size``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray

    @property
    def height(self) -> int:
        return int(self.depth.max())

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        leaves = _kernels.forest_apply(
            self.feature, self.threshold, self.left, self.right, np.array([0]), X
        )[:, 0]
        adjust = np.array([average_path_length(int(s)) for s in self.size])
        return self.depth[leaves] + adjust[leaves]


def build_tree(X: np.ndarray, height_limit: int, rng: np.random.Generator) -> IsolationTree:
    n, d = X.shape
    feature, threshold, left, right, size, depth = [], [], [], [], [], []

    def new_node(dep: int, count: int) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(count)
        depth.append(dep)
        return len(feature) - 1

    stack = [(np.arange(n), 0, new_node(0, n))]
    while stack:
        rows, dep, node = stack.pop()
        if dep >= height_limit or rows.size <= 1:
            continue
        sub = X[rows]
        lo_all = sub.min(axis=0)
        hi_all = sub.max(axis=0)
        dim = -1
        for _ in range(d):
            cand = int(rng.integers(d))
            if lo_all[cand] < hi_all[cand]:
                dim = cand
                break
        if dim < 0:
            continue
        lo, hi = lo_all[dim], hi_all[dim]
        split = rng.uniform(lo, hi)
        while not lo < split < hi:
            split = rng.uniform(lo, hi)
        go_left = sub[:, dim] < split
        lrows, rrows = rows[go_left], rows[~go_left]
        feature[node] = dim
        threshold[node] = split
        lnode = new_node(dep + 1, lrows.size)
        rnode = new_node(dep + 1, rrows.size)
        left[node], right[node] = lnode, rnode
        # right pushed first so the left subtree is numbered first
        stack.append((rrows, dep + 1, rnode))
        stack.append((lrows, dep + 1, lnode))

    return IsolationTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        size=np.array(size, dtype=np.int64),
        depth=np.array(depth, dtype=np.int64),
    )


@dataclass
class IsolationForest:
    n_trees: int = 100
    subsample: int = 256
    rng_seed: int = 0
    trees: list[IsolationTree] = field(default_factory=list)
    sample_size: int = 0
    n_features: int = 0

    @property
    def height_limit(self) -> int:
        return max(1, math.ceil(math.log2(max(self.sample_size, 2))))

    def fit(self, X: np.ndarray) -> IsolationForest:
        """Grow ``n_trees`` trees, each on ``subsample`` rows drawn without replacement.

        Raises:
            DimensionError: ``X`` is not a 2-D array with at least two rows.
            DegenerateDataError: Every row of ``X`` is identical.
        """
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 2:
            raise DimensionError(f"need a 2-D array with >= 2 rows, got shape {X.shape}")
        if not np.isfinite(X).all():
            raise ValueError("embeddings contain non-finite values")
        if np.all(X == X[0]):
            raise DegenerateDataError("all training rows are identical")
        n = X.shape[0]
        self.sample_size = min(self.subsample, n)
        self.n_features = X.shape[1]
        limit = self.height_limit
        seeds = np.random.SeedSequence(self.rng_seed).spawn(self.n_trees)
        self.trees = []
        for ss in seeds:
            rng = np.random.default_rng(ss)
            rows = np.sort(rng.choice(n, size=self.sample_size, replace=False))
            self.trees.append(build_tree(X[rows], limit, rng))
        self._flat = None
        return self

    def _flatten(self):
        if getattr(self, "_flat", None) is None:
            offsets = np.cumsum([0] + [t.feature.size for t in self.trees[:-1]])
            cat = lambda name: np.concatenate([getattr(t, name) for t in self.trees])  # noqa: E731
            left = np.concatenate([np.where(t.left >= 0, t.left + o, -1) for t, o in zip(self.trees, offsets)])
            right = np.concatenate([np.where(t.right >= 0, t.right + o, -1) for t, o in zip(self.trees, offsets)])
            sizes = cat("size")
            table = np.array([average_path_length(s) for s in range(int(sizes.max()) + 1)])
            self._flat = (
                cat("feature"), cat("threshold"), left, right, offsets.astype(np.int64),
                cat("depth") + table[sizes],
            )
        return self._flat

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        """Mean path length ``E[h(x)]`` over trees for each row."""
        if not self.trees:
            raise NotFittedError("isolation forest is not fitted")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise DimensionError(f"expected width {self.n_features}, got {X.shape[1]}")
        feature, threshold, left, right, roots, plen = self._flatten()
        leaves = _kernels.forest_apply(feature, threshold, left, right, roots, X)
        return plen[leaves].mean(axis=1)

    def score_samples(self, X: np.ndarray) -> np.ndarray:
        """Anomaly score in (0, 1) per row; higher is more anomalous."""
        return 2.0 ** (-self.path_lengths(X) / average_path_length(self.sample_size))

    def score(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise DimensionError("score expects a single vector; use score_samples for matrices")
        return float(self.score_samples(x[None, :])[0])

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "subsample": self.subsample,
            "rng_seed": self.rng_seed,
            "sample_size": self.sample_size,
            "n_features": self.n_features,
            "trees": [
                {k: getattr(t, k).tolist() for k in ("feature", "threshold", "left", "right", "size", "depth")}
                for t in self.trees
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> IsolationForest:
        f = cls(n_trees=d["n_trees"], subsample=d["subsample"], rng_seed=d["rng_seed"])
        f.sample_size = d["sample_size"]
        f.n_features = d["n_features"]
        f.trees = [
            IsolationTree(
                feature=np.array(t["feature"], dtype=np.int64),
                threshold=np.array(t["threshold"], dtype=np.float64),
                left=np.array(t["left"], dtype=np.int64),
                right=np.array(t["right"], dtype=np.int64),
                size=np.array(t["size"], dtype=np.int64),
                depth=np.array(t["depth"], dtype=np.int64),
            )
            for t in d["trees"]
        ]
        return f

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> IsolationForest:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit(benign_embeddings: np.ndarray, n_trees: int = 100, subsample: int = 256, seed: int = 0) -> IsolationForest:
    return IsolationForest(n_trees=n_trees, subsample=subsample, rng_seed=seed).fit(benign_embeddings)


def to_anomaly_probability(score):
    """Identity calibration: returns ``(probability, is_malicious)``.

    Works elementwise on arrays; a score of exactly 0.5 is benign.
    """
    p = np.asarray(score, dtype=np.float64)
    label = p > MALICIOUS_THRESHOLD
    if p.ndim == 0:
        return float(p), bool(label)
    return p, label
