from __future__ import annotations

import numpy as np
import pytest

from _oracles import softmax
from aptmcl import gnn
from aptmcl.errors import DimensionError, DivergenceError
from aptmcl.features import view_matrix
from aptmcl.gnn import EncoderModel, TrainConfig
from aptmcl.provenance import build_graph, iter_events


def _line(sub, act, obj, obj_t):
    return f'{{"ts":1,"sub":"{sub}","sub_t":"process","act":"{act}","obj":"{obj}","obj_t":"{obj_t}"}}'


def tiny_graph():
    """Nine nodes of all four types."""
    lines = [
        _line("p1", "launch", "p2", "process"),
        _line("p1", "read", "f1", "file"),
        _line("p2", "write", "f1", "file"),
        _line("p2", "write", "f2", "file"),
        _line("p2", "query", "r1", "registry"),
        _line("p3", "modify", "r1", "registry"),
        _line("p3", "send", "s1", "socket"),
        _line("p3", "connect", "s2", "socket"),
        _line("p1", "launch", "p3", "process"),
        _line("p1", "open", "r2", "registry"),
    ]
    return build_graph(iter_events(lines))


def grad_check(params, x, aggs, labels, batch, masks, h=1e-5):
    _, analytic = gnn.loss_and_grads(params, x, aggs, labels, batch, masks)
    worst = {}
    for name, p in params.items():
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            lp, _ = gnn.loss_and_grads(params, x, aggs, labels, batch, masks)
            p[i] = old - h
            lm, _ = gnn.loss_and_grads(params, x, aggs, labels, batch, masks)
            p[i] = old
            num[i] = (lp - lm) / (2 * h)
        denom = max(np.linalg.norm(analytic[name]), np.linalg.norm(num), 1e-12)
        worst[name] = np.linalg.norm(analytic[name] - num) / denom
    return worst


def test_gradient_check_with_and_without_dropout():
    g = tiny_graph()
    assert g.n_nodes <= 10
    _, feats = view_matrix(g, "structural")
    m = EncoderModel.initialize(42, seed=4, input_transform="log1p")
    x = np.log1p(feats)
    agg = gnn.aggregation_matrix(g)
    labels = g.node_type_codes
    batch = np.arange(g.n_nodes)
    rng = np.random.default_rng(0)
    masks = ((rng.random((g.n_nodes, 32)) >= 0.5) * 2.0, (rng.random((g.n_nodes, 16)) >= 0.5) * 2.0)
    for mk in (None, masks):
        errs = grad_check({k: v.copy() for k, v in m.params.items()}, x, (agg, agg), labels, batch, mk)
        assert set(errs) == set(gnn.PARAM_NAMES)
        assert max(errs.values()) < 1e-4, errs


def test_isolated_node_forward_closed_form():
    g = build_graph(iter_events([_line("p", "read", "f", "file")]))
    m = EncoderModel.initialize(3, seed=1)
    # drop the edge: two isolated nodes
    g._edges.clear()
    g._invalidate()
    x = np.array([[0.5, -1.0, 2.0], [1.0, 0.0, 0.0]])
    P = m.params
    h1 = np.maximum(np.hstack([x, np.zeros_like(x)]) @ P["W0"] + P["b0"], 0)
    h2 = np.maximum(np.hstack([h1, np.zeros_like(h1)]) @ P["W1"] + P["b1"], 0)
    np.testing.assert_allclose(gnn.forward(m, g, x), h2, atol=1e-12)


def test_three_node_path_hand_computed():
    # a - b - c with 1-dim features and scalar weights
    g = build_graph(iter_events([_line("a", "launch", "b", "process"), _line("b", "launch", "c", "process")]))
    m = EncoderModel(d_in=1, hidden_dim=1, embed_dim=1, classifier_hidden=1)
    m.params = {
        "W0": np.array([[0.5], [0.25]]), "b0": np.array([0.1]),
        "W1": np.array([[2.0], [-1.0]]), "b1": np.array([0.05]),
        "C0": np.ones((1, 1)), "c0": np.zeros(1), "C1": np.ones((1, 4)), "c1": np.zeros(4),
    }
    x = np.array([[1.0], [2.0], [3.0]])
    # layer 1: h = relu(0.5 x + 0.25 mean(nbrs) + 0.1)
    h1 = [0.5 * 1 + 0.25 * 2 + 0.1, 0.5 * 2 + 0.25 * 2 + 0.1, 0.5 * 3 + 0.25 * 2 + 0.1]
    h2 = [
        max(2 * h1[0] - h1[1] + 0.05, 0),
        max(2 * h1[1] - (h1[0] + h1[2]) / 2 + 0.05, 0),
        max(2 * h1[2] - h1[1] + 0.05, 0),
    ]
    np.testing.assert_allclose(gnn.forward(m, g, x)[:, 0], h2, atol=1e-9)


def test_symmetric_pair_identical_embeddings():
    g = build_graph(iter_events([_line("a", "launch", "b", "process"), _line("b", "launch", "a", "process")]))
    m = EncoderModel.initialize(4, seed=2)
    x = np.ones((2, 4))
    e = gnn.forward(m, g, x)
    np.testing.assert_array_equal(e[0], e[1])


def test_permutation_equivariance():
    g = tiny_graph()
    _, x = view_matrix(g, "structural")
    m = EncoderModel.initialize(42, seed=0)
    base = gnn.forward(m, g, x)
    agg = gnn.aggregation_matrix(g).toarray()
    perm = np.random.default_rng(1).permutation(g.n_nodes)
    P = np.eye(g.n_nodes)[perm]
    import scipy.sparse as sp

    a2 = sp.csr_matrix(P @ agg @ P.T)
    got = gnn._encode(m.params, (P @ x), (a2, a2))
    np.testing.assert_allclose(got, P @ base, atol=1e-12)


def test_classify_types():
    m = EncoderModel.initialize(5, seed=0)
    for k in ("C0", "c0", "C1", "c1"):
        m.params[k] = np.zeros_like(m.params[k])
    np.testing.assert_allclose(gnn.classify_types(m, np.zeros((3, 15))), 0.25)
    m2 = EncoderModel.initialize(5, seed=3)
    p = gnn.classify_types(m2, np.random.default_rng(0).normal(size=(50, 15)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert (p >= 0).all()
    with pytest.raises(DimensionError):
        gnn.classify_types(m2, np.zeros((2, 14)))


def test_softmax_of_unit_logit():
    want = softmax([1.0, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(gnn._softmax(np.array([[1.0, 0, 0, 0]]))[0], want, atol=1e-12)
    np.testing.assert_allclose(want, [0.4754, 0.1749, 0.1749, 0.1749], atol=5e-5)


def test_forward_shape_errors():
    g = tiny_graph()
    m = EncoderModel.initialize(42, seed=0)
    with pytest.raises(DimensionError):
        gnn.forward(m, g, np.zeros((g.n_nodes, 41)))
    with pytest.raises(DimensionError):
        gnn.forward(m, g, np.zeros((g.n_nodes - 1, 42)))


def test_training_reduces_loss_and_is_deterministic(small_scenario):
    _, _, g = small_scenario
    _, x = view_matrix(g, "structural")
    cfg = TrainConfig(rng_seed=7)
    a = gnn.train_encoder(g, x, config=cfg, input_transform="log1p")
    b = gnn.train_encoder(g, x, config=cfg, input_transform="log1p")
    assert len(a.history) == 30
    assert a.history[-1] < a.history[0]
    for k in gnn.PARAM_NAMES:
        assert np.array_equal(a.params[k], b.params[k])
    e1, e2 = gnn.forward(a, g, x), gnn.forward(a, g, x)
    assert np.array_equal(e1, e2)


def test_separable_types_fit():
    g = tiny_graph()
    x = np.eye(4)[g.node_type_codes]
    m = gnn.train_encoder(g, x, config=TrainConfig(epochs=100, dropout=0.0, rng_seed=0))
    assert gnn.type_accuracy(m, g, x) >= 0.99


def test_divergence_names_epoch():
    g = tiny_graph()
    x = np.eye(4)[g.node_type_codes] * 1e5
    with pytest.raises(DivergenceError) as info:
        gnn.train_encoder(g, x, config=TrainConfig(epochs=50, learning_rate=1e200, dropout=0.0))
    assert 1 <= info.value.epoch <= 50


def test_embed_processes_matches_forward(small_scenario):
    _, _, g = small_scenario
    _, x = view_matrix(g, "structural")
    m = EncoderModel.initialize(42, seed=0, input_transform="log1p")
    keys, emb = gnn.embed_processes(m, g, x)
    full = gnn.forward(m, g, x)
    assert keys == sorted(k for k in g.keys if k.startswith("proc:"))
    np.testing.assert_array_equal(emb, full[[g.key_index[k] for k in keys]])


def test_embed_processes_without_processes():
    g = tiny_graph()
    keep = [k for k in g.keys if k.startswith("f")]
    only_files = type(g)()
    for k in keep:
        only_files.nodes[k] = g.nodes[k]
    m = EncoderModel.initialize(42, seed=0)
    keys, emb = gnn.embed_processes(m, only_files, np.zeros((len(keep), 42)))
    assert keys == [] and emb.shape == (0, 15)


def test_sampled_aggregation_is_row_stochastic():
    g = tiny_graph()
    agg = gnn.aggregation_matrix(g)
    s = gnn.sampled_aggregation(agg, 3, np.random.default_rng(0))
    rows = np.asarray(s.sum(axis=1)).ravel()
    has_nbrs = np.diff(agg.indptr) > 0
    np.testing.assert_allclose(rows[has_nbrs], 1.0)
    assert not rows[~has_nbrs].any()
    assert set(zip(*s.nonzero())) <= set(zip(*agg.nonzero()))


def test_model_round_trip():
    m = EncoderModel.initialize(20, seed=5, view="behavioral")
    m.history = [1.0, 0.5]
    r = EncoderModel.from_dict(m.to_dict())
    assert r.view == "behavioral" and r.history == m.history and r.d_in == 20
    for k in gnn.PARAM_NAMES:
        assert np.array_equal(r.params[k], m.params[k])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(dropout=1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(minibatch_nodes=0)
