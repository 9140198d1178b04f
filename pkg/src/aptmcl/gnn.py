"""Two-layer GraphSAGE-mean encoder trained on node-type classification.

Each layer computes ``h_v <- ReLU([h_v || mean_{u in N(v)} h_u] W + b)`` where
``N(v)`` joins in- and out-neighbours; a node without neighbours aggregates a
zero vector. The final 15-dim embeddings feed a two-layer MLP whose softmax
output is trained against the four node types with negative log-likelihood.
Forward and backward passes are written out by hand in numpy, so training
is deterministic for a fixed seed.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from aptmcl.errors import DimensionError, DivergenceError, NotFittedError
from aptmcl.provenance import NODE_TYPE_INDEX, NodeType, ProvenanceGraph

logger = logging.getLogger(__name__)

N_CLASSES = len(NodeType)
PARAM_NAMES = ("W0", "b0", "W1", "b1", "C0", "c0", "C1", "c1")


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 30
    minibatch_nodes: int = 5000
    dropout: float = 0.5
    neighbor_samples: tuple[int, int] = (25, 10)
    full_neighborhood_limit: int = 50_000
    rng_seed: int = 0
    hidden_dim: int = 32
    embed_dim: int = 15
    classifier_hidden: int = 16
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self) -> None:
        self.neighbor_samples = tuple(self.neighbor_samples)
        self.betas = tuple(self.betas)
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.epochs < 1:
            raise ValueError("learning_rate and epochs must be positive, weight_decay >= 0")
        if self.minibatch_nodes < 1:
            raise ValueError("minibatch_nodes must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["neighbor_samples"] = list(self.neighbor_samples)
        d["betas"] = list(self.betas)
        return d


@dataclass
class EncoderModel:
    """Encoder weights plus the metadata needed to rebuild it.

    ``params`` holds ``W0``/``b0`` (layer 1, ``2*d_in x hidden``),
    ``W1``/``b1`` (layer 2, ``2*hidden x embed``) and the classifier head
    ``C0``/``c0``/``C1``/``c1`` (``embed -> classifier_hidden -> 4``).
    """

    d_in: int
    hidden_dim: int = 32
    embed_dim: int = 15
    classifier_hidden: int = 16
    input_transform: str = "identity"
    params: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    view: str = ""
    history: list[float] = field(default_factory=list)

    @classmethod
    def initialize(
        cls,
        d_in: int,
        seed: int = 0,
        hidden_dim: int = 32,
        embed_dim: int = 15,
        classifier_hidden: int = 16,
        input_transform: str = "identity",
        view: str = "",
    ) -> EncoderModel:
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        shapes = {
            "W0": (2 * d_in, hidden_dim),
            "W1": (2 * hidden_dim, embed_dim),
            "C0": (embed_dim, classifier_hidden),
            "C1": (classifier_hidden, N_CLASSES),
        }
        params: dict[str, np.ndarray] = {}
        for name, (fan_in, fan_out) in shapes.items():
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shapes[name])
        params["b0"] = np.zeros(hidden_dim)
        params["b1"] = np.zeros(embed_dim)
        params["c0"] = np.zeros(classifier_hidden)
        params["c1"] = np.zeros(N_CLASSES)
        return cls(
            d_in=d_in,
            hidden_dim=hidden_dim,
            embed_dim=embed_dim,
            classifier_hidden=classifier_hidden,
            input_transform=input_transform,
            params={k: params[k] for k in PARAM_NAMES},
            seed=seed,
            view=view,
        )

    def copy(self) -> EncoderModel:
        return EncoderModel(
            d_in=self.d_in,
            hidden_dim=self.hidden_dim,
            embed_dim=self.embed_dim,
            classifier_hidden=self.classifier_hidden,
            input_transform=self.input_transform,
            params={k: v.copy() for k, v in self.params.items()},
            seed=self.seed,
            view=self.view,
            history=list(self.history),
        )

    def to_dict(self) -> dict:
        return {
            "d_in": self.d_in,
            "hidden_dim": self.hidden_dim,
            "embed_dim": self.embed_dim,
            "classifier_hidden": self.classifier_hidden,
            "input_transform": self.input_transform,
            "seed": self.seed,
            "view": self.view,
            "history": list(self.history),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> EncoderModel:
        params = {
            k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()
        }
        return cls(
            d_in=d["d_in"],
            hidden_dim=d["hidden_dim"],
            embed_dim=d["embed_dim"],
            classifier_hidden=d["classifier_hidden"],
            input_transform=d["input_transform"],
            params=params,
            seed=d["seed"],
            view=d.get("view", ""),
            history=list(d.get("history", [])),
        )


def aggregation_matrix(graph: ProvenanceGraph) -> sp.csr_matrix:
    """Row-normalised adjacency over undirected, de-duplicated neighbours."""
    n = graph.n_nodes
    if graph.n_edges == 0:
        return sp.csr_matrix((n, n))
    src, dst, _, _ = graph.edge_arrays
    rows = np.concatenate([src, dst])
    cols = np.concatenate([dst, src])
    adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    adj.data[:] = 1.0  # duplicates summed by the constructor; keep sets
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return sp.csr_matrix(sp.diags(inv) @ adj)


def sampled_aggregation(agg: sp.csr_matrix, fanout: int, rng: np.random.Generator) -> sp.csr_matrix:
    """Mean over ``fanout`` sampled neighbours per node.

    Nodes with at least ``fanout`` neighbours sample without replacement,
    smaller neighbourhoods sample with replacement.
    """
    n = agg.shape[0]
    indptr, indices = agg.indptr, agg.indices
    rows, cols = [], []
    for v in range(n):
        nbrs = indices[indptr[v] : indptr[v + 1]]
        if nbrs.size == 0:
            continue
        pick = rng.choice(nbrs, size=fanout, replace=nbrs.size < fanout)
        rows.append(np.full(fanout, v))
        cols.append(pick)
    if not rows:
        return sp.csr_matrix((n, n))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    return sp.csr_matrix((np.full(r.size, 1.0 / fanout), (r, c)), shape=(n, n))


def _transform(model: EncoderModel, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.d_in:
        raise DimensionError(f"expected feature width {model.d_in}, got shape {x.shape}")
    if model.input_transform == "log1p":
        return np.log1p(x)
    return x


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _encode(params, x, aggs, masks=None, cache=None):
    ax = aggs[0] @ x
    in1 = np.hstack([x, ax])
    z1 = in1 @ params["W0"] + params["b0"]
    h1 = _relu(z1)
    if masks is not None:
        h1 = h1 * masks[0]
    ah1 = aggs[1] @ h1
    in2 = np.hstack([h1, ah1])
    z2 = in2 @ params["W1"] + params["b1"]
    h2 = _relu(z2)
    if cache is not None:
        cache.update(in1=in1, z1=z1, in2=in2, z2=z2, h2=h2)
    return h2


def _head(params, emb, mask=None, cache=None):
    u = emb @ params["C0"] + params["c0"]
    v = _relu(u)
    if mask is not None:
        v = v * mask
    logits = v @ params["C1"] + params["c1"]
    if cache is not None:
        cache.update(u=u, v=v, logits=logits)
    return logits


def forward(model: EncoderModel, graph: ProvenanceGraph, features: np.ndarray) -> np.ndarray:
    """Final-layer embeddings (n x embed_dim) for every node, dropout off."""
    if not model.params:
        raise NotFittedError("encoder has no parameters")
    x = _transform(model, features)
    if x.shape[0] != graph.n_nodes:
        raise DimensionError(f"{x.shape[0]} feature rows for {graph.n_nodes} nodes")
    agg = aggregation_matrix(graph)
    return _encode(model.params, x, (agg, agg))


def classify_types(model: EncoderModel, embeddings: np.ndarray) -> np.ndarray:
    """Softmax node-type distribution (n x 4) from embeddings."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != model.embed_dim:
        raise DimensionError(f"expected embedding width {model.embed_dim}, got shape {emb.shape}")
    return _softmax(_head(model.params, emb))


def loss_and_grads(
    params: dict[str, np.ndarray],
    x: np.ndarray,
    aggs: tuple[sp.spmatrix, sp.spmatrix],
    labels: np.ndarray,
    batch: np.ndarray,
    masks: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean NLL over ``batch`` rows and its gradient w.r.t. every parameter.

    ``x`` is the already-transformed input. ``masks`` are the (scaled)
    dropout masks for the layer-1 output and the classifier hidden layer;
    ``None`` disables dropout.
    """
    cache: dict[str, np.ndarray] = {}
    m1, m2 = masks if masks is not None else (None, None)
    emb = _encode(params, x, aggs, None if m1 is None else (m1,), cache)
    logits = _head(params, emb, m2, cache)

    probs = _softmax(logits[batch])
    y = labels[batch]
    nb = batch.size
    loss = float(-np.mean(np.log(np.clip(probs[np.arange(nb), y], 1e-300, None))))

    dlogits = np.zeros_like(logits)
    d = probs.copy()
    d[np.arange(nb), y] -= 1.0
    dlogits[batch] = d / nb

    g: dict[str, np.ndarray] = {}
    g["C1"] = cache["v"].T @ dlogits  # cached v already carries the mask
    g["c1"] = dlogits.sum(axis=0)
    dv = dlogits @ params["C1"].T
    if m2 is not None:
        dv = dv * m2
    du = dv * (cache["u"] > 0)
    g["C0"] = emb.T @ du
    g["c0"] = du.sum(axis=0)
    dh2 = du @ params["C0"].T
    dz2 = dh2 * (cache["z2"] > 0)
    g["W1"] = cache["in2"].T @ dz2
    g["b1"] = dz2.sum(axis=0)
    din2 = dz2 @ params["W1"].T
    hdim = params["b0"].size
    dh1 = din2[:, :hdim] + aggs[1].T @ din2[:, hdim:]
    if m1 is not None:
        dh1 = dh1 * m1
    dz1 = dh1 * (cache["z1"] > 0)
    g["W0"] = cache["in1"].T @ dz1
    g["b0"] = dz1.sum(axis=0)
    return loss, g


def _dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray | None:
    if p <= 0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


def train_encoder(
    graph: ProvenanceGraph,
    features: np.ndarray,
    node_types: np.ndarray | None = None,
    config: TrainConfig | None = None,
    input_transform: str = "identity",
    view: str = "",
) -> EncoderModel:
    """Fit an encoder with Adam on node-type classification.

    Args:
        graph: Provenance graph whose topology drives the aggregation.
        features: ``E^(0)`` rows in ``graph.keys`` order.
        node_types: Class index per row; defaults to the graph's node types.
        config: Hyperparameters; defaults to :class:`TrainConfig`.
        input_transform: ``"identity"`` or ``"log1p"`` applied to features.

    Returns:
        The trained model; ``model.history`` lists the mean loss per epoch.

    Raises:
        DivergenceError: If an epoch ends with a non-finite loss.
    """
    cfg = config or TrainConfig()
    labels = graph.node_type_codes if node_types is None else np.asarray(node_types, dtype=np.int64)
    model = EncoderModel.initialize(
        features.shape[1],
        seed=cfg.rng_seed,
        hidden_dim=cfg.hidden_dim,
        embed_dim=cfg.embed_dim,
        classifier_hidden=cfg.classifier_hidden,
        input_transform=input_transform,
        view=view,
    )
    x = _transform(model, features)
    n = x.shape[0]
    if n != graph.n_nodes or labels.shape != (n,):
        raise DimensionError("features and node_types must have one row per graph node")

    rng = np.random.default_rng(cfg.rng_seed + 1)
    full = aggregation_matrix(graph)
    sample = n > cfg.full_neighborhood_limit
    params = model.params
    m = {k: np.zeros_like(v) for k, v in params.items()}
    s = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2 = cfg.betas
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.minibatch_nodes):
            batch = np.sort(order[start : start + cfg.minibatch_nodes])
            if sample:
                aggs = tuple(sampled_aggregation(full, k, rng) for k in cfg.neighbor_samples[:2])
            else:
                aggs = (full, full)
            # dropout between the two message-passing layers only; the short
            # schedule cannot absorb a second noise source in the head
            masks = (_dropout_mask(rng, (n, cfg.hidden_dim), cfg.dropout), None)
            loss, grads = loss_and_grads(params, x, aggs, labels, batch, masks)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            total += loss * batch.size
            step += 1
            for k in PARAM_NAMES:
                grad = grads[k] + cfg.weight_decay * params[k]
                m[k] = b1 * m[k] + (1 - b1) * grad
                s[k] = b2 * s[k] + (1 - b2) * grad * grad
                mhat = m[k] / (1 - b1**step)
                shat = s[k] / (1 - b2**step)
                params[k] = params[k] - cfg.learning_rate * mhat / (np.sqrt(shat) + cfg.eps)
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise DivergenceError(epoch, epoch_loss)
        model.history.append(epoch_loss)
        logger.debug("encoder epoch %d loss %.5f", epoch, epoch_loss)
    logger.info(
        "trained %s encoder: loss %.4f -> %.4f over %d epochs",
        view or "view", model.history[0], model.history[-1], cfg.epochs,
    )
    return model


def type_accuracy(model: EncoderModel, graph: ProvenanceGraph, features: np.ndarray) -> float:
    probs = classify_types(model, forward(model, graph, features))
    return float(np.mean(probs.argmax(axis=1) == graph.node_type_codes))


def embed_processes(
    model: EncoderModel, graph: ProvenanceGraph, features: np.ndarray
) -> tuple[list[str], np.ndarray]:
    """Embeddings of process nodes only, keys in sorted order."""
    emb = forward(model, graph, features)
    code = NODE_TYPE_INDEX[NodeType.PROCESS]
    rows = np.flatnonzero(graph.node_type_codes == code)
    keys = [graph.keys[i] for i in rows]
    return keys, emb[rows].reshape(len(rows), model.embed_dim)
