"""End-to-end detection pipeline and its persisted artifacts.

Stages mirror the CLI: ``ingest`` builds the provenance graph, ``train``
fits one encoder and one isolation forest per view on benign training
processes, ``cotrain`` runs co-training over the unlabelled pool and fits
the stacking meta-model, and ``detect`` scores every process.

Each artifact is a JSON document carrying the hash of the configuration
that produced it; loading it under a different configuration fails.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from aptmcl import gnn, iforest
from aptmcl.cotrain import MALICIOUS, CoTrainConfig, CoTrainResult, run_cotraining
from aptmcl.errors import ArtifactError, ClassStarvationError, ConfigError
from aptmcl.evaluation import Split, SplitSpec, split
from aptmcl.features import BEHAVIORAL_LABELS, SensitivityConfig, view_matrix
from aptmcl.fusion import FusionStrategy, MetaModel, ProbPair, fuse, fuse_sv, train_stacking
from aptmcl.gnn import EncoderModel, TrainConfig
from aptmcl.iforest import IsolationForest
from aptmcl.provenance import EDGE_TYPES, NodeType, ProvenanceGraph, build_graph, read_events
from aptmcl.synth import ScenarioSpec, default_sensitivity
from aptmcl.trees import BaggedTrees

logger = logging.getLogger(__name__)

REPORT_DIR_ENV = "APTMCL_REPORT_DIR"
VIEW_PAIR = ("structural", "behavioral")
INPUT_TRANSFORM = {"structural": "log1p", "behavioral": "identity", "concat": "log1p"}
VIEW_CHOICES = ("structural", "behavioral", "both")
STRUCTURAL_NAMES = tuple(
    [f"in:{e.subject_type.value}_{e.action}" for e in EDGE_TYPES]
    + [f"out:{e.object_type.value}_{e.action}" for e in EDGE_TYPES]
)
# fields that change only what is reported, not what is learned
_UNHASHED = ("strategy", "view", "report_dir")


@dataclass
class ForestConfig:
    n_trees: int = 100
    subsample: int = 256


@dataclass
class PipelineConfig:
    """All knobs of one pipeline run.

    Paths are resolved relative to the working directory. ``seed`` is the
    single master seed; :meth:`resolved` pushes it into every component.
    """

    events: str = "events.jsonl"
    truth: str = "truth.jsonl"
    work_dir: str = "work"
    report_dir: str = "reports"
    sensitivity: str | None = None
    seed: int = 0
    strategy: str = "st"
    view: str = "both"
    train: TrainConfig = field(default_factory=TrainConfig)
    cotrain: CoTrainConfig = field(default_factory=CoTrainConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)

    def __post_init__(self) -> None:
        FusionStrategy(self.strategy)
        if self.view not in VIEW_CHOICES:
            raise ConfigError(f"view must be one of {VIEW_CHOICES}, got {self.view!r}")

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        sub = {
            "train": TrainConfig,
            "cotrain": CoTrainConfig,
            "forest": ForestConfig,
            "split": SplitSpec,
            "scenario": ScenarioSpec,
        }
        kwargs = {}
        for k, v in d.items():
            if k in sub:
                try:
                    v = sub[k](**v)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"bad {k!r} section: {exc}") from exc
            kwargs[k] = v
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.to_dict()
        d["train"]["neighbor_samples"] = list(self.train.neighbor_samples)
        d["train"]["betas"] = list(self.train.betas)
        return d

    def resolved(self) -> PipelineConfig:
        """Copy with the master seed pushed into every component seed."""
        d = self.to_dict()
        d["train"]["rng_seed"] = self.seed
        d["cotrain"]["seed"] = self.seed
        d["split"]["rng_seed"] = self.seed
        return PipelineConfig.from_dict(d)

    def hash(self) -> str:
        d = self.resolved().to_dict()
        for k in _UNHASHED:
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def report_path(self) -> Path:
        return Path(os.environ.get(REPORT_DIR_ENV) or self.report_dir)

    def load_sensitivity(self) -> SensitivityConfig:
        if self.sensitivity is None:
            return default_sensitivity()
        return SensitivityConfig.load(self.sensitivity)


# ---------------------------------------------------------------- per view


@dataclass
class ViewModel:
    view: str
    encoder: EncoderModel
    forest: IsolationForest

    def to_dict(self) -> dict:
        return {"view": self.view, "encoder": self.encoder.to_dict(), "forest": self.forest.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> ViewModel:
        return cls(d["view"], EncoderModel.from_dict(d["encoder"]), IsolationForest.from_dict(d["forest"]))


class FeatureCache:
    """Feature matrices and process embeddings of one graph, built lazily."""

    def __init__(self, graph: ProvenanceGraph, sensitivity: SensitivityConfig) -> None:
        self.graph = graph
        self.sensitivity = sensitivity
        self._mats: dict[str, np.ndarray] = {}
        code = list(NodeType).index(NodeType.PROCESS)
        self.process_rows = np.flatnonzero(graph.node_type_codes == code)
        self.process_keys = [graph.keys[i] for i in self.process_rows]
        self.process_index = {k: i for i, k in enumerate(self.process_keys)}

    def matrix(self, view: str) -> np.ndarray:
        if view not in self._mats:
            self._mats[view] = view_matrix(self.graph, view, self.sensitivity)[1]
        return self._mats[view]

    def process_matrix(self, view: str) -> np.ndarray:
        return self.matrix(view)[self.process_rows]

    def embed(self, encoder: EncoderModel) -> np.ndarray:
        """Embeddings of all process nodes, rows in ``process_keys`` order."""
        emb = gnn.forward(encoder, self.graph, self.matrix(encoder.view))
        return emb[self.process_rows]

    def rows(self, keys: list[str]) -> np.ndarray:
        return np.array([self.process_index[k] for k in keys], dtype=np.int64)


def fit_view(
    cache: FeatureCache,
    view: str,
    fit_keys: list[str],
    train: TrainConfig,
    forest: ForestConfig,
    seed: int,
) -> tuple[ViewModel, np.ndarray]:
    """Train the encoder on the whole graph and a forest on ``fit_keys``.

    Returns the model and the process embeddings it produces.
    """
    enc = gnn.train_encoder(
        cache.graph, cache.matrix(view), config=train, input_transform=INPUT_TRANSFORM[view], view=view
    )
    emb = cache.embed(enc)
    fst = iforest.fit(emb[cache.rows(fit_keys)], n_trees=forest.n_trees, subsample=forest.subsample, seed=seed)
    return ViewModel(view, enc, fst), emb


def anomaly_probability(vm: ViewModel, emb: np.ndarray) -> np.ndarray:
    return iforest.to_anomaly_probability(vm.forest.score_samples(emb))[0]


# ---------------------------------------------------------------- artifacts


class ArtifactStore:
    """JSON artifacts under ``work_dir`` stamped with the config hash."""

    PRODUCERS = {
        "graph": "ingest",
        "split": "train",
        "view_structural": "train",
        "view_behavioral": "train",
        "cotrain": "cotrain",
    }

    def __init__(self, config: PipelineConfig) -> None:
        self.config = config
        self.root = Path(config.work_dir)
        self.config_hash = config.hash()

    def path(self, name: str) -> Path:
        return self.root / f"{name}.json"

    def save(self, name: str, payload: dict) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.path(name)
        doc = {"artifact": name, "config_hash": self.config_hash, "payload": payload}
        tmp = p.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
        tmp.replace(p)
        return p

    def load(self, name: str) -> dict:
        p = self.path(name)
        if not p.exists():
            producer = self.PRODUCERS.get(name, "the producing subcommand")
            raise ArtifactError(f"missing artifact {p}; run {producer} first")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"corrupt artifact {p}: {exc}") from exc
        if doc.get("config_hash") != self.config_hash:
            raise ArtifactError(
                f"artifact {p} was produced under config hash {doc.get('config_hash')}, "
                f"current config hash is {self.config_hash}; rerun {self.PRODUCERS.get(name, 'it')}"
            )
        return doc["payload"]

    def graph_dir(self) -> Path:
        return self.root / "graph"


def ingest(config: PipelineConfig, store: ArtifactStore | None = None) -> ProvenanceGraph:
    store = store or ArtifactStore(config)
    graph = build_graph(read_events(config.events))
    graph.save(store.graph_dir())
    store.save("graph", {"n_nodes": graph.n_nodes, "n_edges": graph.n_edges, "events": str(config.events)})
    logger.info("ingested %d nodes, %d edges", graph.n_nodes, graph.n_edges)
    return graph


def load_graph(store: ArtifactStore) -> ProvenanceGraph:
    store.load("graph")
    return ProvenanceGraph.load(store.graph_dir())


def read_truth(path: str | Path) -> dict[str, str]:
    from aptmcl.synth import read_truth as _read

    if not Path(path).exists():
        raise ArtifactError(f"missing ground truth {path}; run synth first or set 'truth' in the config")
    return _read(path)


def split_processes(cache: FeatureCache, truth: dict[str, str], spec: SplitSpec) -> Split:
    keys = cache.process_keys
    missing = [k for k in keys if k not in truth]
    if missing:
        raise ArtifactError(f"{len(missing)} process keys lack ground truth, e.g. {missing[0]}")
    benign = [k for k in keys if truth[k] == "benign"]
    malicious = [k for k in keys if truth[k] == "malicious"]
    return split(benign, malicious, spec)


def train(config: PipelineConfig, store: ArtifactStore | None = None) -> dict[str, ViewModel]:
    cfg = config.resolved()
    store = store or ArtifactStore(config)
    graph = load_graph(store)
    cache = FeatureCache(graph, cfg.load_sensitivity())
    parts = split_processes(cache, read_truth(cfg.truth), cfg.split)
    store.save("split", asdict(parts))
    out = {}
    for view in VIEW_PAIR:
        vm, _ = fit_view(cache, view, parts.nts, cfg.train, cfg.forest, cfg.seed)
        store.save(f"view_{view}", vm.to_dict())
        out[view] = vm
    return out


@dataclass
class CoTrained:
    sm: BaggedTrees
    bm: BaggedTrees
    meta: MetaModel
    result: CoTrainResult | None = None

    def to_dict(self) -> dict:
        d = {"sm": self.sm.to_dict(), "bm": self.bm.to_dict(), "meta": self.meta.to_dict()}
        if self.result is not None:
            d["iterations"] = self.result.iterations
            d["stop_reason"] = self.result.stop_reason
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CoTrained:
        return cls(BaggedTrees.from_dict(d["sm"]), BaggedTrees.from_dict(d["bm"]), MetaModel.from_dict(d["meta"]))

    def probs(self, s_emb: np.ndarray, b_emb: np.ndarray) -> ProbPair:
        mp_s = self.sm.predict_proba(s_emb)[:, MALICIOUS]
        mp_b = self.bm.predict_proba(b_emb)[:, MALICIOUS]
        return ProbPair.from_malicious(mp_s, mp_b)


def _stacking_inputs(models: CoTrained, ud: list[str], s_emb: np.ndarray, b_emb: np.ndarray) -> ProbPair:
    # held-out votes; in-sample ones sit near 0/1 and teach the meta-model little
    if hasattr(models.sm, "oob_proba") and hasattr(models.bm, "oob_proba"):
        return ProbPair.from_malicious(models.sm.oob_proba()[:, MALICIOUS], models.bm.oob_proba()[:, MALICIOUS])
    rows = [ud.index(k) for k in models.result.state.ld]
    return models.probs(s_emb[rows], b_emb[rows])


def cotrain_models(
    ud: list[str],
    s_emb: np.ndarray,
    b_emb: np.ndarray,
    usm_prob: np.ndarray,
    ubm_prob: np.ndarray,
    config: CoTrainConfig,
) -> CoTrained:
    """Co-train SM/BM on the pool and fit the meta-model on its agreement set.

    The meta-model sees out-of-bag sub-model probabilities of the final
    pseudo-labelled pool. A single-class agreement set leaves it untrained,
    and stacking then falls back to soft voting.
    """
    res = run_cotraining(ud, s_emb, b_emb, usm_prob, ubm_prob, config)
    models = CoTrained(res.sm, res.bm, MetaModel(), res)
    try:
        models.meta = train_stacking(_stacking_inputs(models, ud, s_emb, b_emb))
    except ClassStarvationError as exc:
        logger.warning("stacking meta-model not trained (%s); stacking falls back to soft voting", exc)
    return models


def cotrain(config: PipelineConfig, store: ArtifactStore | None = None) -> CoTrained:
    cfg = config.resolved()
    store = store or ArtifactStore(config)
    graph = load_graph(store)
    parts = Split(**store.load("split"))
    vms = {v: ViewModel.from_dict(store.load(f"view_{v}")) for v in VIEW_PAIR}
    cache = FeatureCache(graph, cfg.load_sensitivity())
    ud = sorted(parts.nts + parts.mts)
    rows = cache.rows(ud)
    emb = {v: cache.embed(vms[v].encoder)[rows] for v in VIEW_PAIR}
    prob = {v: anomaly_probability(vms[v], emb[v]) for v in VIEW_PAIR}
    models = cotrain_models(ud, emb["structural"], emb["behavioral"], prob["structural"], prob["behavioral"], cfg.cotrain)
    store.save("cotrain", models.to_dict())
    store.root.mkdir(parents=True, exist_ok=True)
    models.result.write_audit(store.root / "cotrain_audit.jsonl")
    models.result.write_pseudo_labels(store.root / "pseudo_labels.jsonl")
    return models


# ---------------------------------------------------------------- detection


def verdicts(models: CoTrained, p: ProbPair, strategy: str, view: str = "both") -> np.ndarray:
    """Malicious flags under the selected view and fusion strategy."""
    if view == "structural":
        return p.sm_flags
    if view == "behavioral":
        return p.bm_flags
    if FusionStrategy(strategy) is FusionStrategy.ST and models.meta.model is None:
        return fuse_sv(p)[0]
    return fuse(strategy, p, models.meta)


def _evidence(struct_row: np.ndarray, behav_row: np.ndarray, top: int = 3) -> dict:
    order = sorted(np.flatnonzero(struct_row), key=lambda i: (-struct_row[i], i))[:top]
    return {
        "top_structural": [{"dim": STRUCTURAL_NAMES[i], "count": int(struct_row[i])} for i in order],
        "behavioral_labels": [BEHAVIORAL_LABELS[i] for i in np.flatnonzero(behav_row)],
    }


@dataclass
class DetectionReport:
    """Per-process scores and verdicts; ``rows`` are sorted by key."""

    strategy: str
    view: str
    config_hash: str
    rows: list[dict]

    def flags(self) -> dict[str, bool]:
        return {r["key"]: r["verdict"] == "malicious" for r in self.rows}

    def header(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "strategy": self.strategy,
            "view": self.view,
            "n_processes": len(self.rows),
            "n_malicious": sum(r["verdict"] == "malicious" for r in self.rows),
        }

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"report": self.header()}, sort_keys=True) + "\n")
            for r in self.rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> DetectionReport:
        with open(path, encoding="utf-8") as fh:
            lines = [json.loads(x) for x in fh if x.strip()]
        head = lines[0]["report"]
        return cls(head["strategy"], head["view"], head["config_hash"], lines[1:])


def detect_graph(
    graph: ProvenanceGraph,
    sensitivity: SensitivityConfig,
    vms: dict[str, ViewModel],
    models: CoTrained,
    strategy: str,
    view: str,
    config_hash: str,
) -> DetectionReport:
    cache = FeatureCache(graph, sensitivity)
    emb = {v: cache.embed(vms[v].encoder) for v in VIEW_PAIR}
    score = {v: vms[v].forest.score_samples(emb[v]) for v in VIEW_PAIR}
    p = models.probs(emb["structural"], emb["behavioral"])
    flags = verdicts(models, p, strategy, view)
    meta_p = models.meta.predict_proba(p) if models.meta.model is not None else None
    s_mat = cache.process_matrix("structural")
    b_mat = cache.process_matrix("behavioral")
    rows = []
    for i, key in enumerate(cache.process_keys):
        row = {
            "key": key,
            "usm_score": float(score["structural"][i]),
            "ubm_score": float(score["behavioral"][i]),
            "sm": [float(p.sm[i, 0]), float(p.sm[i, 1])],
            "bm": [float(p.bm[i, 0]), float(p.bm[i, 1])],
            "verdict": "malicious" if flags[i] else "benign",
            "evidence": _evidence(s_mat[i], b_mat[i]),
        }
        if meta_p is not None:
            row["meta"] = float(meta_p[i])
        rows.append(row)
    return DetectionReport(strategy, view, config_hash, rows)


def load_models(store: ArtifactStore) -> tuple[dict[str, ViewModel], CoTrained]:
    # co-training output first: it is the last stage, so its absence names the step to run
    models = CoTrained.from_dict(store.load("cotrain"))
    vms = {v: ViewModel.from_dict(store.load(f"view_{v}")) for v in VIEW_PAIR}
    return vms, models


def detect(config: PipelineConfig, graph: ProvenanceGraph | None = None, store: ArtifactStore | None = None) -> DetectionReport:
    cfg = config.resolved()
    store = store or ArtifactStore(config)
    vms, models = load_models(store)
    graph = graph if graph is not None else load_graph(store)
    return detect_graph(graph, cfg.load_sensitivity(), vms, models, cfg.strategy, cfg.view, store.config_hash)
