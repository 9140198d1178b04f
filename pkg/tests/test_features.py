from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import LABELS, behavioral_rules, random_events, sensitivity_dict, structural_tally, to_lines
from aptmcl.errors import AptMclError
from aptmcl.features import (
    BEHAVIORAL_DIM,
    BEHAVIORAL_LABELS,
    STRUCTURAL_DIM,
    SensitivityConfig,
    behavioral_matrix,
    command_name,
    extract_behavioral,
    extract_structural,
    load_matrix,
    save_matrix,
    structural_matrix,
    view_matrix,
)
from aptmcl.provenance import ProvenanceGraph, build_graph, edge_type_index, iter_events

CFG = SensitivityConfig.from_dict(sensitivity_dict())


def _graph(events):
    return build_graph(iter_events(to_lines(events)))


def test_dimensions_and_label_order():
    assert STRUCTURAL_DIM == 42
    assert BEHAVIORAL_DIM == 20
    assert list(BEHAVIORAL_LABELS) == LABELS


def test_isolated_node_structural_zero():
    g = _graph([{"ts": 1, "sub": "p", "sub_t": "process", "act": "read", "obj": "f", "obj_t": "file"}])
    g.nodes["lonely"] = type(g.nodes["p"])(g.nodes["p"].type)
    g._invalidate()
    assert not extract_structural(g, "lonely").any()


def test_unknown_node_lookup_error():
    g = _graph([{"ts": 1, "sub": "p", "sub_t": "process", "act": "read", "obj": "f", "obj_t": "file"}])
    with pytest.raises(KeyError):
        extract_structural(g, "nope")
    with pytest.raises(KeyError):
        extract_behavioral(g, "nope", CFG)


def test_six_distinct_edges_give_six_ones():
    # launched once; launches, writes, modifies, deletes and sends once each
    evs = [
        {"ts": 1, "sub": "explorer", "sub_t": "process", "act": "launch", "obj": "word", "obj_t": "process"},
        {"ts": 2, "sub": "word", "sub_t": "process", "act": "modify", "obj": "k", "obj_t": "registry"},
        {"ts": 3, "sub": "word", "sub_t": "process", "act": "send", "obj": "s", "obj_t": "socket"},
        {"ts": 4, "sub": "word", "sub_t": "process", "act": "launch", "obj": "child", "obj_t": "process"},
        {"ts": 5, "sub": "word", "sub_t": "process", "act": "write", "obj": "d", "obj_t": "file"},
        {"ts": 6, "sub": "word", "sub_t": "process", "act": "delete", "obj": "k2", "obj_t": "registry"},
    ]
    v = extract_structural(_graph(evs), "word")
    ones = sorted(np.flatnonzero(v) + 1)
    assert v.sum() == 6 and v.max() == 1
    expect = [
        edge_type_index("process", "process", "launch"),
        21 + edge_type_index("process", "process", "launch"),
        21 + edge_type_index("process", "file", "write"),
        21 + edge_type_index("process", "registry", "modify"),
        21 + edge_type_index("process", "registry", "delete"),
        21 + edge_type_index("process", "socket", "send"),
    ]
    assert ones == sorted(expect)


def test_process_without_edges_only_type_bit():
    evs = [{"ts": 1, "sub": "p", "sub_t": "process", "act": "launch", "obj": "q", "obj_t": "process"}]
    b = extract_behavioral(_graph(evs), "q", CFG)
    assert [LABELS[i] for i in np.flatnonzero(b)] == ["PL0"]


def test_whoami_and_socket_send():
    evs = [
        {"ts": 1, "sub": "p", "sub_t": "process", "act": "launch", "obj": "c", "obj_t": "process",
         "attrs": {"cmd": "whoami /all"}},
        {"ts": 2, "sub": "p", "sub_t": "process", "act": "send", "obj": "s", "obj_t": "socket",
         "attrs": {"addr": "10.0.0.1:80"}},
    ]
    b = extract_behavioral(_graph(evs), "p", CFG)
    assert [LABELS[i] for i in np.flatnonzero(b)] == ["PL0", "PL1", "PL9"]


def test_network_taint_one_hop():
    evs = [
        {"ts": 1, "sub": "dl", "sub_t": "process", "act": "receive", "obj": "s", "obj_t": "socket"},
        {"ts": 2, "sub": "dl", "sub_t": "process", "act": "write", "obj": "f", "obj_t": "file",
         "attrs": {"path": "/tmp/payload"}},
        {"ts": 3, "sub": "x", "sub_t": "process", "act": "read", "obj": "f", "obj_t": "file",
         "attrs": {"path": "/tmp/payload"}},
        {"ts": 4, "sub": "x", "sub_t": "process", "act": "launch", "obj": "run", "obj_t": "process",
         "attrs": {"image": "/tmp/payload"}},
    ]
    g = _graph(evs)
    lab = lambda k: {LABELS[i] for i in np.flatnonzero(extract_behavioral(g, k, CFG))}  # noqa: E731
    assert lab("f") == {"FL0", "FL3"}
    assert lab("x") == {"PL0", "PL2"}
    assert lab("run") == {"PL0", "PL4"}


@pytest.mark.parametrize(
    "cmd, name",
    [("whoami", "whoami"), ("/usr/bin/netstat -an", "netstat"), ('"C:\\Windows\\System32\\WHOAMI.EXE" /all', "whoami"), ("", "")],
)
def test_command_name(cmd, name):
    assert command_name(cmd) == name


def test_view_matrix_shapes_and_type_bits(small_scenario, sensitivity):
    _, _, g = small_scenario
    idx, s = view_matrix(g, "structural")
    _, b = view_matrix(g, "behavioral", sensitivity)
    _, c = view_matrix(g, "concat", sensitivity)
    n = g.n_nodes
    assert s.shape == (n, 42) and b.shape == (n, 20) and c.shape == (n, 62)
    assert list(idx) == sorted(idx)
    type_cols = [LABELS.index(x) for x in ("PL0", "FL0", "NL0", "RL0")]
    assert np.all(b[:, type_cols].sum(axis=1) == 1)
    np.testing.assert_array_equal(c, np.hstack([s, b]))


def test_view_matrix_errors(sensitivity):
    with pytest.raises(AptMclError):
        view_matrix(ProvenanceGraph(), "structural")
    g = _graph([{"ts": 1, "sub": "p", "sub_t": "process", "act": "read", "obj": "f", "obj_t": "file"}])
    with pytest.raises(AptMclError):
        view_matrix(g, "behavioral")
    with pytest.raises(ValueError):
        view_matrix(g, "spectral", sensitivity)


def test_reload_gives_identical_matrices(tmp_path, small_scenario, sensitivity):
    _, _, g = small_scenario
    g.save(tmp_path / "g")
    h = ProvenanceGraph.load(tmp_path / "g")
    for view in ("structural", "behavioral"):
        assert np.array_equal(view_matrix(g, view, sensitivity)[1], view_matrix(h, view, sensitivity)[1])


def test_matrix_jsonl_round_trip(tmp_path, small_scenario, sensitivity):
    _, _, g = small_scenario
    idx, mat = view_matrix(g, "behavioral", sensitivity)
    save_matrix(tmp_path / "m.jsonl", "behavioral", idx, mat)
    view, idx2, mat2 = load_matrix(tmp_path / "m.jsonl")
    assert view == "behavioral" and idx2 == idx
    np.testing.assert_array_equal(mat2, mat)


def test_sensitivity_config(tmp_path):
    with pytest.raises(AptMclError):
        SensitivityConfig.from_dict({"bogus": []})
    with pytest.raises(AptMclError):
        SensitivityConfig().validate()
    p = tmp_path / "s.json"
    p.write_text(json.dumps(sensitivity_dict()))
    assert SensitivityConfig.load(p).to_dict() == sensitivity_dict()


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 60))
def test_extractors_match_oracles(seed, n):
    events = random_events(np.random.default_rng(seed), n_events=n, n_entities=12)
    g = _graph(events)
    s = structural_matrix(g)
    b = behavioral_matrix(g, CFG)
    for k, i in g.key_index.items():
        assert s[i].tolist() == structural_tally(events, k)
        want = behavioral_rules(events, k)
        assert {LABELS[j] for j in np.flatnonzero(b[i])} == {x for x, v in want.items() if v}
    # degree identities
    src, dst, _, mult = g.edge_arrays
    np.testing.assert_array_equal(s[:, :21].sum(1), np.bincount(dst, mult, g.n_nodes))
    np.testing.assert_array_equal(s[:, 21:].sum(1), np.bincount(src, mult, g.n_nodes))
    # non-process nodes carry no process labels, and vice versa
    is_proc = b[:, 0] == 1
    assert not b[is_proc, 11:].any()
    assert not b[~is_proc, :11].any()
