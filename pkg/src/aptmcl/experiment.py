"""Experiment driver: ablation variants and the batch_thres sweep.

Variants scored on the held-out processes (NES plus MES):

* ``SFV`` / ``BFV``: one encoder plus isolation forest on a single view.
* ``CON``: the same single-model pipeline over the 62-dim concatenation.
* ``APT-MCL/<strategy>``: co-trained SM/BM fused with bv, mv, sv or st.
* ``Unsupervised``: either view's forest flags the process.
* ``Supervised``: bagged trees trained on true labels of NTS and MTS.

A failing variant is reported with its error instead of aborting the run.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from aptmcl.cotrain import CoTrainConfig
from aptmcl.errors import ColdStartError
from aptmcl.evaluation import MetricsReport, Split, format_table, metrics_from_arrays
from aptmcl.fusion import FusionStrategy
from aptmcl.pipeline import (
    VIEW_PAIR,
    FeatureCache,
    PipelineConfig,
    ViewModel,
    anomaly_probability,
    cotrain_models,
    fit_view,
    split_processes,
    verdicts,
)
from aptmcl.provenance import ProvenanceGraph
from aptmcl.trees import BaggedTrees

logger = logging.getLogger(__name__)

STRATEGIES = tuple(s.value for s in FusionStrategy)


@dataclass
class VariantResult:
    name: str
    report: MetricsReport | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        d = {"variant": self.name}
        if self.report is not None:
            d["metrics"] = self.report.to_dict()
        if self.error is not None:
            d["error"] = self.error
        return d


@dataclass
class SweepPoint:
    batch_thres: float
    report: MetricsReport
    cold_start: bool
    notes: dict

    @property
    def macro_f1(self) -> float:
        return self.report.macro_f1

    def to_dict(self) -> dict:
        return {
            "batch_thres": self.batch_thres,
            "cold_start": self.cold_start,
            "metrics": self.report.to_dict(),
            "notes": self.notes,
        }


@dataclass
class ExperimentReport:
    config_hash: str
    n_test: int
    n_test_malicious: int
    results: list[VariantResult] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> MetricsReport:
        for r in self.results:
            if r.name == name:
                if r.report is None:
                    raise KeyError(f"variant {name} failed: {r.error}")
                return r.report
        raise KeyError(name)

    def macro_f1(self, name: str) -> float:
        return self[name].macro_f1

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "n_test": self.n_test,
            "n_test_malicious": self.n_test_malicious,
            "results": [r.to_dict() for r in self.results],
            "notes": self.notes,
        }

    def table(self) -> str:
        ok = [(r.name, r.report) for r in self.results if r.report is not None]
        lines = [format_table(ok)] if ok else []
        lines += [f"{r.name}: FAILED ({r.error})" for r in self.results if r.report is None]
        return "\n".join(lines)

    def write(self, directory: str | Path, stem: str = "experiment") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{stem}.json").write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
        (d / f"{stem}.txt").write_text(self.table() + "\n", encoding="utf-8")


class Experiment:
    """Holds the fitted per-view models so several co-training runs can share them."""

    def __init__(self, graph: ProvenanceGraph, truth: dict[str, str], config: PipelineConfig) -> None:
        self.config = config.resolved()
        self.config_hash = config.hash()
        self.cache = FeatureCache(graph, self.config.load_sensitivity())
        self.parts: Split = split_processes(self.cache, truth, self.config.split)
        self.test = sorted(self.parts.nes + self.parts.mes)
        self.ud = sorted(self.parts.nts + self.parts.mts)
        self.actual = np.array([truth[k] == "malicious" for k in self.test])
        self.views: dict[str, ViewModel] = {}
        self.emb: dict[str, np.ndarray] = {}
        # test-set sub-model probabilities of the latest co-training run
        self.last_probs = None

    def fit_views(self, views=("structural", "behavioral", "concat")) -> None:
        c = self.config
        for v in views:
            if v not in self.views:
                self.views[v], self.emb[v] = fit_view(self.cache, v, self.parts.nts, c.train, c.forest, c.seed)

    def _rows(self, keys):
        return self.cache.rows(keys)

    def _score(self, pred) -> MetricsReport:
        return metrics_from_arrays(np.asarray(pred, dtype=bool), self.actual)

    def single_view(self, view: str) -> MetricsReport:
        rows = self._rows(self.test)
        return self._score(anomaly_probability(self.views[view], self.emb[view][rows]) > 0.5)

    def unsupervised(self) -> MetricsReport:
        rows = self._rows(self.test)
        flags = [anomaly_probability(self.views[v], self.emb[v][rows]) > 0.5 for v in VIEW_PAIR]
        return self._score(flags[0] | flags[1])

    def supervised(self) -> MetricsReport:
        train_keys = self.ud
        x = np.hstack([self.emb[v] for v in VIEW_PAIR])
        truth = set(self.parts.mts)
        y = np.array([k in truth for k in train_keys], dtype=np.int64)
        clf = BaggedTrees(
            n_trees=self.config.cotrain.n_trees,
            max_depth=self.config.cotrain.max_depth,
            max_features="sqrt",
            seed=self.config.seed,
        )
        clf.fit(x[self._rows(train_keys)], y)
        return self._score(clf.predict(x[self._rows(self.test)]) == 1)

    def aptmcl(self, cotrain: CoTrainConfig | None = None) -> tuple[dict[str, MetricsReport], dict]:
        """Co-train on UD and score every fusion strategy on the test set."""
        cfg = cotrain or self.config.cotrain
        ud_rows = self._rows(self.ud)
        s, b = (self.emb[v] for v in VIEW_PAIR)
        usm = anomaly_probability(self.views["structural"], s[ud_rows])
        ubm = anomaly_probability(self.views["behavioral"], b[ud_rows])
        models = cotrain_models(self.ud, s[ud_rows], b[ud_rows], usm, ubm, cfg)
        t_rows = self._rows(self.test)
        p = models.probs(s[t_rows], b[t_rows])
        self.last_probs = p
        out = {st: self._score(verdicts(models, p, st)) for st in STRATEGIES}
        res = models.result
        notes = {
            "iterations": res.iterations,
            "stop_reason": res.stop_reason,
            "ld_size": len(res.state.ld),
            "ud_residual": len(res.state.ud),
            "meta_trained": models.meta.model is not None,
        }
        return out, notes

    def run(self) -> ExperimentReport:
        report = ExperimentReport(self.config_hash, len(self.test), int(self.actual.sum()))
        try:
            self.fit_views()
        except Exception as exc:  # noqa: BLE001 - partial report by design
            logger.exception("view fitting failed")
            report.results.append(VariantResult("views", error=f"{type(exc).__name__}: {exc}"))
            return report

        def attempt(name, fn):
            try:
                report.results.append(VariantResult(name, fn()))
            except Exception as exc:  # noqa: BLE001
                logger.warning("variant %s failed: %s", name, exc)
                report.results.append(VariantResult(name, error=f"{type(exc).__name__}: {exc}"))

        attempt("SFV", lambda: self.single_view("structural"))
        attempt("BFV", lambda: self.single_view("behavioral"))
        attempt("CON", lambda: self.single_view("concat"))
        try:
            fused, notes = self.aptmcl()
            for st in STRATEGIES:
                report.results.append(VariantResult(f"APT-MCL/{st}", fused[st]))
            report.notes["cotrain"] = notes
        except Exception as exc:  # noqa: BLE001
            logger.warning("co-training failed: %s", exc)
            for st in STRATEGIES:
                report.results.append(VariantResult(f"APT-MCL/{st}", error=f"{type(exc).__name__}: {exc}"))
        attempt("Unsupervised", self.unsupervised)
        attempt("Supervised", self.supervised)
        return report

    def sweep_batch_thres(self, values=(0.5, 0.65, 0.8), strategy: str = "st") -> dict[float, SweepPoint]:
        """Response of the fused detector to ``batch_thres``.

        A threshold no anomaly probability exceeds cannot seed co-training;
        that point is scored as a detector raising no alarms and marked
        ``cold_start``.
        """
        self.fit_views(VIEW_PAIR)
        base = self.config.cotrain.to_dict()
        out = {}
        for v in values:
            try:
                fused, notes = self.aptmcl(CoTrainConfig(**{**base, "batch_thres": v}))
                out[v] = SweepPoint(v, fused[strategy], False, notes)
            except ColdStartError as exc:
                logger.warning("batch_thres=%s: %s", v, exc)
                out[v] = SweepPoint(v, self._score(np.zeros(len(self.test), dtype=bool)), True, {})
        return out


def run_experiment(graph: ProvenanceGraph, truth: dict[str, str], config: PipelineConfig) -> ExperimentReport:
    return Experiment(graph, truth, config).run()
