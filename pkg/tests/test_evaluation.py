from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import confusion_metrics
from aptmcl.errors import AptMclError
from aptmcl.evaluation import (
    MetricsReport,
    SplitSpec,
    compute_metrics,
    format_table,
    metrics_from_arrays,
    split,
    train_count,
)


def test_ten_and_ten():
    s = split([f"b{i}" for i in range(10)], [f"m{i}" for i in range(10)])
    assert (len(s.nts), len(s.nes), len(s.mts), len(s.mes)) == (7, 3, 7, 3)


def test_large_benign_count():
    assert train_count(29018, 0.7) == 20313
    assert train_count(714, 0.7) == 500


def test_split_deterministic_and_exhaustive():
    ben = [f"b{i:03d}" for i in range(97)]
    mal = [f"m{i}" for i in range(13)]
    a, b = split(ben, mal, SplitSpec(rng_seed=4)), split(list(reversed(ben)), mal, SplitSpec(rng_seed=4))
    assert a == b
    assert sorted(a.nts + a.nes) == ben and sorted(a.mts + a.mes) == sorted(mal)
    assert not set(a.nts) & set(a.nes)
    assert split(ben, mal, SplitSpec(rng_seed=5)) != a


def test_split_edge_cases():
    s = split(["a", "b", "c"], [])
    assert s.mts == [] and s.mes == []
    with pytest.raises(AptMclError):
        split([], ["m"])
    with pytest.raises(AptMclError):
        split(["a"], ["a"])


def test_perfect_predictions():
    truth = {"a": True, "b": False, "c": True}
    r = compute_metrics(dict(truth), truth)
    assert (r.precision, r.recall, r.accuracy, r.fpr, r.macro_f1) == (1.0, 1.0, 1.0, 0.0, 1.0)


def test_all_benign_predictor():
    truth = {f"k{i}": i < 10 for i in range(100)}
    r = compute_metrics({k: False for k in truth}, truth)
    assert r.accuracy == 0.9 and r.recall == 0.0 and r.precision is None


def test_no_malicious_in_test_set():
    r = metrics_from_arrays(np.array([False, True]), np.array([False, False]))
    assert r.recall is None and r.fpr == 0.5


def test_key_mismatch():
    with pytest.raises(AptMclError, match="mismatch"):
        compute_metrics({"a": True}, {"b": True})
    with pytest.raises(AptMclError):
        MetricsReport.from_counts(0, 0, 0, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_metrics_match_hand_formulas(tp, fp, tn, fn):
    if tp + fp + tn + fn == 0:
        return
    r = MetricsReport.from_counts(tp, fp, tn, fn)
    want = confusion_metrics(tp, fp, tn, fn)
    for k, v in want.items():
        got = getattr(r, k)
        assert (got is None and v is None) or got == pytest.approx(v, abs=1e-12)
    for k in ("precision", "recall", "fpr", "accuracy", "macro_f1"):
        v = getattr(r, k)
        assert v is None or 0.0 <= v <= 1.0
    pred = np.r_[np.ones(tp + fp, bool), np.zeros(tn + fn, bool)]
    act = np.r_[np.ones(tp, bool), np.zeros(fp + tn, bool), np.ones(fn, bool)]
    assert metrics_from_arrays(pred, act) == r


def test_table_alignment():
    rows = [("SFV", MetricsReport.from_counts(1, 2, 3, 4)), ("APT-MCL/st", MetricsReport.from_counts(0, 0, 5, 0))]
    lines = format_table(rows).splitlines()
    assert len({len(line.rstrip()) for line in lines[:2]}) == 1
    assert "n/a" in lines[3]
