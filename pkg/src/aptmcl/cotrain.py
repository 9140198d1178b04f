"""Collaborative (co-)training of per-view supervised sub-models.

The unsupervised detectors of each view (USM structural, UBM behavioral)
seed a small pseudo-labelled pool LD from the unlabelled process pool UD.
Each round then trains one classifier per view on LD (SM and BM), lets both
score what is left of UD, and moves each view's most confident malicious and
benign predictions into LD. A key confidently labelled by only one view is
still pseudo-labelled, which is how one view corrects the other.

Selection, per view and per round:

* malicious: among keys with malicious probability ``> batch_thres``, the
  ``batch_prob`` fraction with the highest probability;
* benign: among keys with malicious probability ``< 1 - batch_thres``
  (classifier rounds) or ``<= 0.5`` (seeding, where isolation-forest scores
  of inliers sit just under 0.5), the ``batch_prob`` fraction with the
  lowest probability.

A fraction of a non-empty candidate set always selects at least one key.
When the two views pick the same key with opposite labels the more
confident view wins; exact ties stay in UD.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from aptmcl.errors import ClassStarvationError, ColdStartError
from aptmcl.iforest import MALICIOUS_THRESHOLD
from aptmcl.trees import BaggedTrees, ConfidenceClassifier

logger = logging.getLogger(__name__)

BENIGN, MALICIOUS = 0, 1
LABEL_NAMES = {BENIGN: "benign", MALICIOUS: "malicious"}


@dataclass
class CoTrainConfig:
    batch_thres: float = 0.65
    batch_prob: float = 0.3
    max_iterations: int = 50
    n_trees: int = 50
    max_depth: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.5 <= self.batch_thres < 1:
            raise ValueError(f"batch_thres must lie in [0.5, 1), got {self.batch_thres}")
        if not 0 < self.batch_prob <= 1:
            raise ValueError(f"batch_prob must lie in (0, 1], got {self.batch_prob}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def make_classifier(self) -> ConfidenceClassifier:
        return BaggedTrees(n_trees=self.n_trees, max_depth=self.max_depth, class_weight="balanced", seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PseudoLabel:
    label: int
    source: str
    iteration: int
    confidence: float


@dataclass
class Selection:
    key: str
    label: int
    source: str
    confidence: float


def batch_size(n_candidates: int, batch_prob: float) -> int:
    if n_candidates == 0:
        return 0
    return max(1, math.floor(batch_prob * n_candidates + 1e-9))


def select_view(
    keys: list[str],
    p_mal: np.ndarray,
    source: str,
    batch_thres: float,
    batch_prob: float,
    benign_ceiling: float,
    benign_inclusive: bool = False,
) -> tuple[list[Selection], dict]:
    """Pick one view's confident malicious and benign batches.

    Candidates are ranked by probability; equal probabilities keep the order
    of ``keys``.
    """
    p = np.asarray(p_mal, dtype=np.float64)
    mal_cand = np.flatnonzero(p > batch_thres)
    ben_mask = p <= benign_ceiling if benign_inclusive else p < benign_ceiling
    ben_cand = np.flatnonzero(ben_mask)
    mal_take = mal_cand[np.argsort(-p[mal_cand], kind="stable")][: batch_size(mal_cand.size, batch_prob)]
    ben_take = ben_cand[np.argsort(p[ben_cand], kind="stable")][: batch_size(ben_cand.size, batch_prob)]
    picks = [Selection(keys[i], MALICIOUS, source, float(p[i])) for i in mal_take]
    picks += [Selection(keys[i], BENIGN, source, float(1.0 - p[i])) for i in ben_take]
    stats = {
        "above_thres": int(mal_cand.size),
        "benign_candidates": int(ben_cand.size),
        "malicious": int(mal_take.size),
        "benign": int(ben_take.size),
    }
    return picks, stats


def merge_selections(*views: list[Selection]) -> tuple[dict[str, Selection], int, int]:
    """Combine per-view picks; returns (winners, conflicts resolved, ties dropped)."""
    by_key: dict[str, list[Selection]] = {}
    for picks in views:
        for s in picks:
            by_key.setdefault(s.key, []).append(s)
    out: dict[str, Selection] = {}
    resolved = ties = 0
    for key, cands in by_key.items():
        best = max(cands, key=lambda s: s.confidence)
        labels = {s.label for s in cands}
        if len(labels) > 1:
            top = [s for s in cands if s.confidence == best.confidence]
            if len({s.label for s in top}) > 1:
                ties += 1
                continue
            resolved += 1
        out[key] = best
    return out, resolved, ties


@dataclass
class CoTrainState:
    """Mutable pools. ``ld`` maps key -> pseudo-label; ``ud`` keeps key order."""

    ld: dict[str, PseudoLabel] = field(default_factory=dict)
    ud: list[str] = field(default_factory=list)

    def check_disjoint(self) -> None:
        overlap = set(self.ld) & set(self.ud)
        if overlap:
            raise AssertionError(f"keys in both pools: {sorted(overlap)[:5]}")

    def move(self, chosen: dict[str, Selection], iteration: int) -> None:
        for key, s in chosen.items():
            self.ld[key] = PseudoLabel(s.label, s.source, iteration, s.confidence)
        self.ud = [k for k in self.ud if k not in chosen]


def seed_pools(
    ud: list[str],
    usm_prob: np.ndarray,
    ubm_prob: np.ndarray,
    config: CoTrainConfig,
) -> tuple[CoTrainState, dict]:
    """Initial LD from the two unsupervised detectors' anomaly probabilities.

    Raises:
        ColdStartError: Neither detector scores any key above ``batch_thres``.
    """
    usm_prob = np.asarray(usm_prob, dtype=np.float64)
    ubm_prob = np.asarray(ubm_prob, dtype=np.float64)
    if usm_prob.shape != (len(ud),) or ubm_prob.shape != (len(ud),):
        raise ValueError("one anomaly probability per UD key is required from each view")
    s_picks, s_stats = select_view(
        ud, usm_prob, "USM", config.batch_thres, config.batch_prob, MALICIOUS_THRESHOLD, benign_inclusive=True
    )
    b_picks, b_stats = select_view(
        ud, ubm_prob, "UBM", config.batch_thres, config.batch_prob, MALICIOUS_THRESHOLD, benign_inclusive=True
    )
    if s_stats["above_thres"] == 0 and b_stats["above_thres"] == 0:
        raise ColdStartError(
            f"no key has anomaly probability > batch_thres={config.batch_thres} in either view; "
            "lower batch_thres"
        )
    chosen, resolved, ties = merge_selections(s_picks, b_picks)
    state = CoTrainState(ud=list(ud))
    state.move(chosen, 0)
    record = {
        "iteration": 0,
        "stage": "seed",
        "selected": {"USM": s_stats, "UBM": b_stats},
        "moved": len(chosen),
        "conflicts_resolved": resolved,
        "conflicts_tied": ties,
        "ld_size": len(state.ld),
        "ud_size": len(state.ud),
        "ld_malicious": sum(v.label == MALICIOUS for v in state.ld.values()),
    }
    return state, record


def _train(factory, emb: np.ndarray, rows: list[int], labels: np.ndarray, view: str):
    if len(set(labels.tolist())) < 2:
        raise ClassStarvationError(f"pseudo-labelled pool holds a single class; cannot train {view}")
    return factory().fit(emb[rows], labels)


def train_submodels(state, index, struct_emb, behav_emb, config, factory=None):
    factory = factory or config.make_classifier
    keys = list(state.ld)
    rows = [index[k] for k in keys]
    labels = np.array([state.ld[k].label for k in keys], dtype=np.int64)
    sm = _train(factory, struct_emb, rows, labels, "SM")
    bm = _train(factory, behav_emb, rows, labels, "BM")
    return sm, bm


def cotrain_round(
    state: CoTrainState,
    index: dict[str, int],
    struct_emb: np.ndarray,
    behav_emb: np.ndarray,
    config: CoTrainConfig,
    iteration: int,
    factory: Callable[[], ConfidenceClassifier] | None = None,
):
    """One round: train SM/BM on LD, pseudo-label the confident part of UD.

    Returns ``(sm, bm, record)``; ``state`` is updated in place and
    ``record["moved"] == 0`` signals no progress.

    Raises:
        ClassStarvationError: LD contains a single class.
    """
    sm, bm = train_submodels(state, index, struct_emb, behav_emb, config, factory)
    ld_keys = list(state.ld)
    ld_rows = [index[k] for k in ld_keys]
    ld_labels = np.array([state.ld[k].label for k in ld_keys])
    flips_sm = int(np.sum(sm.predict_proba(struct_emb[ld_rows]).argmax(axis=1) != ld_labels))
    flips_bm = int(np.sum(bm.predict_proba(behav_emb[ld_rows]).argmax(axis=1) != ld_labels))

    ud = state.ud
    before = len(ud)
    if ud:
        rows = [index[k] for k in ud]
        p_sm = sm.predict_proba(struct_emb[rows])[:, MALICIOUS]
        p_bm = bm.predict_proba(behav_emb[rows])[:, MALICIOUS]
        ceiling = 1.0 - config.batch_thres
        s_picks, s_stats = select_view(ud, p_sm, "SM", config.batch_thres, config.batch_prob, ceiling)
        b_picks, b_stats = select_view(ud, p_bm, "BM", config.batch_thres, config.batch_prob, ceiling)
        disagree = int(np.sum((p_sm > MALICIOUS_THRESHOLD) != (p_bm > MALICIOUS_THRESHOLD)))
        chosen, resolved, ties = merge_selections(s_picks, b_picks)
    else:
        s_stats = b_stats = {}
        chosen, resolved, ties, disagree = {}, 0, 0, 0
    state.move(chosen, iteration)
    record = {
        "iteration": iteration,
        "stage": "round",
        "selected": {"SM": s_stats, "BM": b_stats},
        "moved": len(chosen),
        "conflicts_resolved": resolved,
        "conflicts_tied": ties,
        "ld_label_flips": {"SM": flips_sm, "BM": flips_bm},
        "ud_view_disagreement": disagree,
        "ld_size": len(state.ld),
        "ud_size": len(state.ud),
        "ld_malicious": sum(v.label == MALICIOUS for v in state.ld.values()),
    }
    assert len(state.ud) == before - len(chosen)
    return sm, bm, record


@dataclass
class CoTrainResult:
    sm: ConfidenceClassifier
    bm: ConfidenceClassifier
    state: CoTrainState
    audit: list[dict]
    iterations: int
    stop_reason: str

    def pseudo_labels(self) -> list[dict]:
        return [
            {
                "key": k,
                "label": LABEL_NAMES[v.label],
                "source": v.source,
                "iteration": v.iteration,
                "confidence": v.confidence,
            }
            for k, v in sorted(self.state.ld.items())
        ]

    def write_audit(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.audit:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def write_pseudo_labels(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.pseudo_labels():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def run_cotraining(
    keys: list[str],
    struct_emb: np.ndarray,
    behav_emb: np.ndarray,
    usm_prob: np.ndarray,
    ubm_prob: np.ndarray,
    config: CoTrainConfig | None = None,
    factory: Callable[[], ConfidenceClassifier] | None = None,
) -> CoTrainResult:
    """Run seeding plus co-training rounds until UD is exhausted.

    Args:
        keys: The unlabelled pool UD (process keys).
        struct_emb, behav_emb: Per-view embeddings, one row per key.
        usm_prob, ubm_prob: Anomaly probabilities of the two detectors.
        config: Thresholds and sub-model settings.
        factory: Builds a fresh :class:`ConfidenceClassifier`; defaults to
            the bagged-tree ensemble described by ``config``.

    The loop stops when UD is empty, when a round moves no key, or after
    ``config.max_iterations`` rounds. The returned SM/BM are trained on the
    final LD.
    """
    cfg = config or CoTrainConfig()
    index = {k: i for i, k in enumerate(keys)}
    if len(index) != len(keys):
        raise ValueError("duplicate keys in the unlabelled pool")
    state, record = seed_pools(list(keys), usm_prob, ubm_prob, cfg)
    audit = [record]
    logger.info("seeded LD with %d keys (%d malicious), %d left in UD", record["ld_size"], record["ld_malicious"], record["ud_size"])

    iterations = 0
    stop = "ud_empty"
    sm = bm = None
    stale = True
    while state.ud:
        if iterations >= cfg.max_iterations:
            stop = "max_iterations"
            break
        iterations += 1
        sm, bm, record = cotrain_round(state, index, struct_emb, behav_emb, cfg, iterations, factory)
        audit.append(record)
        logger.debug("round %d moved %d keys, |UD|=%d", iterations, record["moved"], record["ud_size"])
        if record["moved"] == 0:
            stop = "no_progress"
            stale = False
            warnings.warn(
                f"co-training stalled after {iterations} rounds with {len(state.ud)} keys unlabelled "
                f"(batch_thres={cfg.batch_thres})",
                RuntimeWarning,
                stacklevel=2,
            )
            break
    if stale or sm is None:
        sm, bm = train_submodels(state, index, struct_emb, behav_emb, cfg, factory)
    state.check_disjoint()
    logger.info("co-training stopped (%s) after %d rounds: |LD|=%d, |UD|=%d", stop, iterations, len(state.ld), len(state.ud))
    return CoTrainResult(sm, bm, state, audit, iterations, stop)
