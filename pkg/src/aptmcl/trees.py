"""Bagged decision trees used as confidence classifiers.

Classes are integer coded; throughout the pipeline 0 is benign and 1 is
malicious. Probabilities come from vote fractions across the trees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from aptmcl import _kernels
from aptmcl.errors import ClassStarvationError, DimensionError, NotFittedError


class ConfidenceClassifier(Protocol):
    """Anything trainable on (features, labels) that emits class probabilities."""

    def fit(self, X: np.ndarray, y: np.ndarray) -> ConfidenceClassifier: ...

    def predict_proba(self, X: np.ndarray) -> np.ndarray: ...


@dataclass
class DecisionTree:
    max_depth: int | None = 8
    max_features: int | None = None
    min_samples_leaf: int = 1
    n_classes: int = 2
    feature: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    threshold: np.ndarray = field(default_factory=lambda: np.empty(0))
    left: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    right: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    value: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))

    def fit(self, X, y, sample_weight=None, rng: np.random.Generator | None = None) -> DecisionTree:
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        rng = rng or np.random.default_rng(0)
        n, d = X.shape
        max_depth = math.inf if self.max_depth is None else self.max_depth
        feature, threshold, left, right, value = [], [], [], [], []

        def leaf(rows: np.ndarray) -> int:
            dist = np.zeros(self.n_classes)
            np.add.at(dist, y[rows], w[rows])
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(dist)
            return len(feature) - 1

        stack = [(np.arange(n), 0, leaf(np.arange(n)))]
        while stack:
            rows, depth, node = stack.pop()
            if depth >= max_depth or rows.size < 2 * self.min_samples_leaf:
                continue
            if np.count_nonzero(value[node]) <= 1:
                continue
            if self.max_features is not None and self.max_features < d:
                cols = np.sort(rng.choice(d, size=self.max_features, replace=False))
            else:
                cols = np.arange(d)
            f, thr, _ = _kernels.best_split(
                X[np.ix_(rows, cols)], y[rows], w[rows], self.n_classes, self.min_samples_leaf
            )
            if f < 0:
                continue
            f = int(cols[f])
            go_left = X[rows, f] < thr
            lrows, rrows = rows[go_left], rows[~go_left]
            feature[node], threshold[node] = f, thr
            lnode, rnode = leaf(lrows), leaf(rrows)
            left[node], right[node] = lnode, rnode
            stack.append((rrows, depth + 1, rnode))
            stack.append((lrows, depth + 1, lnode))

        self.feature = np.array(feature, dtype=np.int64)
        self.threshold = np.array(threshold, dtype=np.float64)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.value = np.array(value, dtype=np.float64).reshape(-1, self.n_classes)
        return self

    def apply(self, X) -> np.ndarray:
        return _kernels.forest_apply(self.feature, self.threshold, self.left, self.right, np.array([0]), X)[:, 0]

    def predict(self, X) -> np.ndarray:
        # ties resolve to the lower class index (benign)
        return self.value[self.apply(X)].argmax(axis=1)


@dataclass
class BaggedTrees:
    """Bootstrap ensemble of depth-limited Gini trees.

    Args:
        n_trees: Ensemble size.
        max_depth: Depth cap per tree (``None`` grows until pure).
        max_features: Features examined per split: ``None`` for all,
            ``"sqrt"`` for random-forest style subsampling, or an int.
        class_weight: ``"balanced"`` weights samples by inverse class
            frequency; ``None`` leaves them uniform.
        seed: Seeds the bootstrap and feature draws.
    """

    n_trees: int = 50
    max_depth: int | None = 8
    max_features: int | str | None = None
    class_weight: str | None = "balanced"
    seed: int = 0
    n_classes: int = 2
    trees: list[DecisionTree] = field(default_factory=list)
    n_features: int = 0

    def fit(self, X, y) -> BaggedTrees:
        """Train on integer labels ``y`` in ``range(n_classes)``.

        Raises:
            ClassStarvationError: ``y`` contains fewer than two classes.
        """
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DimensionError(f"X shape {X.shape} does not match {y.shape[0]} labels")
        counts = np.bincount(y, minlength=self.n_classes)
        if np.count_nonzero(counts) < 2:
            raise ClassStarvationError(f"need at least two classes, got counts {counts.tolist()}")
        n, d = X.shape
        self.n_features = d
        if self.class_weight == "balanced":
            cw = np.where(counts > 0, n / (np.count_nonzero(counts) * np.maximum(counts, 1)), 0.0)
            w = cw[y]
        else:
            w = np.ones(n)
        if self.max_features == "sqrt":
            mf = max(1, int(math.sqrt(d)))
        else:
            mf = self.max_features
        self.trees = []
        inbag = np.zeros((self.n_trees, n), dtype=bool)
        for t, ss in enumerate(np.random.SeedSequence(self.seed).spawn(self.n_trees)):
            rng = np.random.default_rng(ss)
            rows = rng.integers(0, n, size=n)
            inbag[t, rows] = True
            tree = DecisionTree(max_depth=self.max_depth, max_features=mf, n_classes=self.n_classes)
            self.trees.append(tree.fit(X[rows], y[rows], w[rows], rng))
        self._flat = None
        self._train = (X, inbag)
        return self

    def _flatten(self):
        if getattr(self, "_flat", None) is None:
            sizes = [t.feature.size for t in self.trees]
            offsets = np.cumsum([0] + sizes[:-1]).astype(np.int64)
            shift = lambda a, o: np.where(a >= 0, a + o, -1)  # noqa: E731
            self._flat = (
                np.concatenate([t.feature for t in self.trees]),
                np.concatenate([t.threshold for t in self.trees]),
                np.concatenate([shift(t.left, o) for t, o in zip(self.trees, offsets)]),
                np.concatenate([shift(t.right, o) for t, o in zip(self.trees, offsets)]),
                offsets,
                np.concatenate([t.value.argmax(axis=1) for t in self.trees]),
            )
        return self._flat

    def predict_proba(self, X) -> np.ndarray:
        """Fraction of trees voting for each class, shape (n, n_classes)."""
        if not self.trees:
            raise NotFittedError("classifier is not fitted")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise DimensionError(f"expected width {self.n_features}, got {X.shape[1]}")
        votes = self._votes(X)
        out = np.stack([(votes == k).sum(axis=1) for k in range(self.n_classes)], axis=1)
        return out / len(self.trees)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def _votes(self, X) -> np.ndarray:
        feature, threshold, left, right, roots, vote = self._flatten()
        return vote[_kernels.forest_apply(feature, threshold, left, right, roots, X)]

    def oob_proba(self) -> np.ndarray:
        """Out-of-bag class fractions for the rows the ensemble was fitted on.

        Each row is voted on only by trees whose bootstrap left it out; a
        row that every tree saw falls back to the full ensemble.
        """
        train = getattr(self, "_train", None)
        if train is None:
            raise NotFittedError("out-of-bag estimates need the fitting data; refit the ensemble")
        X, inbag = train
        votes = self._votes(X)
        oob = ~inbag.T
        out = np.stack([((votes == k) & oob).sum(axis=1) for k in range(self.n_classes)], axis=1).astype(np.float64)
        n_oob = oob.sum(axis=1)
        seen = n_oob == 0
        out[~seen] /= n_oob[~seen, None]
        if seen.any():
            out[seen] = self.predict_proba(X[seen])
        return out

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "max_features": self.max_features,
            "class_weight": self.class_weight,
            "seed": self.seed,
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "threshold": t.threshold.tolist(),
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "value": t.value.tolist(),
                }
                for t in self.trees
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> BaggedTrees:
        m = cls(
            n_trees=d["n_trees"],
            max_depth=d["max_depth"],
            max_features=d["max_features"],
            class_weight=d["class_weight"],
            seed=d["seed"],
            n_classes=d["n_classes"],
        )
        m.n_features = d["n_features"]
        for t in d["trees"]:
            tree = DecisionTree(max_depth=d["max_depth"], n_classes=d["n_classes"])
            tree.feature = np.array(t["feature"], dtype=np.int64)
            tree.threshold = np.array(t["threshold"], dtype=np.float64)
            tree.left = np.array(t["left"], dtype=np.int64)
            tree.right = np.array(t["right"], dtype=np.int64)
            tree.value = np.array(t["value"], dtype=np.float64).reshape(-1, d["n_classes"])
            m.trees.append(tree)
        return m
