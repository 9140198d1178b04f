"""Train/test splitting and detection metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Mapping

import numpy as np

from aptmcl.errors import AptMclError


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    rng_seed: int = 0


@dataclass(frozen=True)
class Split:
    nts: list[str]  # benign, train
    nes: list[str]  # benign, test
    mts: list[str]  # malicious, train
    mes: list[str]  # malicious, test


def train_count(n: int, fraction: float) -> int:
    """``round(fraction * n)`` with halves rounded up, computed exactly."""
    x = Fraction(str(fraction)) * n
    return int(x + Fraction(1, 2))


def _split_one(keys, fraction, rng):
    ordered = sorted(keys)
    perm = rng.permutation(len(ordered))
    k = train_count(len(ordered), fraction)
    shuffled = [ordered[i] for i in perm]
    return sorted(shuffled[:k]), sorted(shuffled[k:])


def split(benign: list[str], malicious: list[str], spec: SplitSpec | None = None) -> Split:
    """Split each class independently into train and test parts.

    Raises:
        AptMclError: ``benign`` is empty.
    """
    spec = spec or SplitSpec()
    if not benign:
        raise AptMclError("split needs at least one benign key")
    overlap = set(benign) & set(malicious)
    if overlap:
        raise AptMclError(f"keys labelled both benign and malicious: {sorted(overlap)[:5]}")
    rng = np.random.default_rng(spec.rng_seed)
    nts, nes = _split_one(benign, spec.train_fraction, rng)
    mts, mes = _split_one(malicious, spec.train_fraction, rng)
    return Split(nts, nes, mts, mes)


@dataclass(frozen=True)
class MetricsReport:
    """Binary detection metrics with malicious as the positive class.

    ``precision``/``recall``/``fpr`` are ``None`` when their denominator is
    zero (e.g. recall on a test set without malicious nodes). Per-class F1
    with a zero denominator counts as 0.
    """

    tp: int
    fp: int
    tn: int
    fn: int
    precision: float | None
    recall: float | None
    accuracy: float
    fpr: float | None
    macro_f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> MetricsReport:
        total = tp + fp + tn + fn
        if total == 0:
            raise AptMclError("no predictions to score")

        def ratio(a, b):
            return a / b if b else None

        def f1(a, b):
            return 2 * a / b if b else 0.0

        f1_mal = f1(tp, 2 * tp + fp + fn)
        f1_ben = f1(tn, 2 * tn + fn + fp)
        return cls(
            tp=tp,
            fp=fp,
            tn=tn,
            fn=fn,
            precision=ratio(tp, tp + fp),
            recall=ratio(tp, tp + fn),
            accuracy=(tp + tn) / total,
            fpr=ratio(fp, fp + tn),
            macro_f1=(f1_mal + f1_ben) / 2,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(predictions: Mapping[str, bool], truth: Mapping[str, bool]) -> MetricsReport:
    """Score per-key malicious flags against ground truth.

    Raises:
        AptMclError: The two mappings do not cover the same keys.
    """
    if set(predictions) != set(truth):
        missing = set(truth) ^ set(predictions)
        raise AptMclError(f"prediction/ground-truth key mismatch ({len(missing)} keys differ)")
    tp = fp = tn = fn = 0
    for k, pred in predictions.items():
        actual = bool(truth[k])
        if pred and actual:
            tp += 1
        elif pred:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    return MetricsReport.from_counts(tp, fp, tn, fn)


def metrics_from_arrays(pred: np.ndarray, actual: np.ndarray) -> MetricsReport:
    pred = np.asarray(pred, dtype=bool)
    actual = np.asarray(actual, dtype=bool)
    return MetricsReport.from_counts(
        int(np.sum(pred & actual)),
        int(np.sum(pred & ~actual)),
        int(np.sum(~pred & ~actual)),
        int(np.sum(~pred & actual)),
    )


def format_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """Aligned plaintext table of reports."""

    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    header = ("variant", "precision", "recall", "accuracy", "fpr", "macro_f1", "tp", "fp", "tn", "fn")
    body = [
        (name, fmt(r.precision), fmt(r.recall), fmt(r.accuracy), fmt(r.fpr), fmt(r.macro_f1),
         str(r.tp), str(r.fp), str(r.tn), str(r.fn))
        for name, r in rows
    ]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines)
