"""Fusion of the structural (SM) and behavioral (BM) sub-model verdicts.

Every strategy works on a :class:`ProbPair`, i.e. the ``[malicious, benign]``
probability vectors of the two sub-models for a batch of process nodes.

* BV, benign voting: malicious only if both views say malicious.
* MV, malicious voting: malicious if either view says malicious.
* SV, soft voting: average the two vectors, malicious iff MP > BP
  (a tie, up to float rounding, is benign).
* ST, stacking: a logistic meta-model over the four probabilities, trained
  on the nodes where SM and BM agree, labelled with that agreed verdict.

A single view calls a node malicious when its malicious probability exceeds
0.5.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np
from sklearn.linear_model import LogisticRegression

from aptmcl.errors import ClassStarvationError, DimensionError, NotFittedError

VIEW_THRESHOLD = 0.5
# MP and BP closer than this count as an exact tie (rounding in 1 - p)
TIE_TOL = 1e-12


class FusionStrategy(str, Enum):
    BV = "bv"
    MV = "mv"
    SV = "sv"
    ST = "st"


@dataclass
class ProbPair:
    """``sm`` and ``bm`` are (n, 2) arrays of ``[MP, BP]`` rows."""

    sm: np.ndarray
    bm: np.ndarray

    def __post_init__(self) -> None:
        self.sm = np.atleast_2d(np.asarray(self.sm, dtype=np.float64))
        self.bm = np.atleast_2d(np.asarray(self.bm, dtype=np.float64))
        if self.sm.shape != self.bm.shape or self.sm.ndim != 2 or self.sm.shape[1] != 2:
            raise DimensionError(f"expected two (n, 2) arrays, got {self.sm.shape} and {self.bm.shape}")
        for name, arr in (("sm", self.sm), ("bm", self.bm)):
            if np.any(arr < 0) or np.any(arr > 1) or np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-9):
                raise ValueError(f"{name} rows must be probability vectors")

    @classmethod
    def from_malicious(cls, mp_sm, mp_bm) -> ProbPair:
        mp_sm = np.asarray(mp_sm, dtype=np.float64)
        mp_bm = np.asarray(mp_bm, dtype=np.float64)
        return cls(np.column_stack([mp_sm, 1.0 - mp_sm]), np.column_stack([mp_bm, 1.0 - mp_bm]))

    def __len__(self) -> int:
        return self.sm.shape[0]

    @property
    def sm_flags(self) -> np.ndarray:
        return self.sm[:, 0] > VIEW_THRESHOLD

    @property
    def bm_flags(self) -> np.ndarray:
        return self.bm[:, 0] > VIEW_THRESHOLD

    def stacked(self) -> np.ndarray:
        return np.hstack([self.sm, self.bm])


def fuse_bv(p: ProbPair) -> np.ndarray:
    return p.sm_flags & p.bm_flags


def fuse_mv(p: ProbPair) -> np.ndarray:
    return p.sm_flags | p.bm_flags


def fuse_sv(p: ProbPair) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(is_malicious, MP, BP)``."""
    mp = (p.sm[:, 0] + p.bm[:, 0]) / 2
    bp = (p.sm[:, 1] + p.bm[:, 1]) / 2
    return mp - bp > TIE_TOL, mp, bp


@dataclass
class MetaModel:
    model: LogisticRegression | None = None
    n_train: int = 0

    def predict_proba(self, p: ProbPair) -> np.ndarray:
        """Malicious probability per node."""
        if self.model is None:
            raise NotFittedError("stacking meta-model is not trained")
        return self.model.predict_proba(p.stacked())[:, 1]

    def to_dict(self) -> dict:
        if self.model is None:
            return {"trained": False}
        return {
            "trained": True,
            "coef": self.model.coef_.ravel().tolist(),
            "intercept": float(self.model.intercept_[0]),
            "C": self.model.C,
            "n_train": self.n_train,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetaModel:
        if not d.get("trained"):
            return cls()
        lr = LogisticRegression(C=d["C"])
        lr.classes_ = np.array([0, 1])
        lr.coef_ = np.array([d["coef"]])
        lr.intercept_ = np.array([d["intercept"]])
        lr.n_features_in_ = len(d["coef"])
        return cls(lr, d["n_train"])

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


def agreement_set(p: ProbPair) -> tuple[np.ndarray, np.ndarray]:
    """Row indices where SM and BM agree, and the agreed labels (1 = malicious)."""
    sm, bm = p.sm_flags, p.bm_flags
    rows = np.flatnonzero(sm == bm)
    return rows, sm[rows].astype(np.int64)


def train_stacking(p: ProbPair, C: float = 1.0) -> MetaModel:
    """Fit the logistic meta-model on the agreement set.

    Raises:
        ClassStarvationError: The agreement set is empty or single-class;
            callers are expected to fall back to soft voting.
    """
    rows, labels = agreement_set(p)
    if rows.size == 0 or np.unique(labels).size < 2:
        raise ClassStarvationError(
            f"agreement set has {rows.size} rows and classes {np.unique(labels).tolist()}"
        )
    lr = LogisticRegression(C=C, max_iter=1000)
    lr.fit(p.stacked()[rows], labels)
    return MetaModel(lr, int(rows.size))


def fuse_st(meta: MetaModel, p: ProbPair) -> np.ndarray:
    return meta.predict_proba(p) > 0.5


def fuse(strategy: FusionStrategy | str, p: ProbPair, meta: MetaModel | None = None) -> np.ndarray:
    """Dispatch to one strategy and return the malicious flags."""
    s = FusionStrategy(strategy)
    if s is FusionStrategy.BV:
        return fuse_bv(p)
    if s is FusionStrategy.MV:
        return fuse_mv(p)
    if s is FusionStrategy.SV:
        return fuse_sv(p)[0]
    if meta is None:
        raise NotFittedError("stacking needs a trained meta-model")
    return fuse_st(meta, p)
