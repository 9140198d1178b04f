from __future__ import annotations

import numpy as np
import pytest

from aptmcl.errors import AptMclError
from aptmcl.experiment import Experiment
from aptmcl.features import extract_behavioral, structural_matrix
from aptmcl.pipeline import PipelineConfig
from aptmcl.provenance import build_graph, edge_type_index, write_events
from aptmcl.synth import (
    ScenarioSpec,
    default_sensitivity,
    generate_scenario,
    process_kinds,
    read_truth,
    write_scenario,
)

LABELS = [f"PL{i}" for i in range(11)]


@pytest.fixture(scope="module")
def mixed():
    spec = ScenarioSpec(n_processes=400, rng_seed=3)
    events, labels = generate_scenario(spec)
    return labels, build_graph(events), process_kinds(spec)


def _benign_mean(graph, labels, cols):
    s = structural_matrix(graph)
    ben = [graph.key_index[k] for k, v in labels.items() if v == "benign"]
    return s, s[ben][:, cols].sum(axis=1).mean()


def test_exfiltration_plants_are_behavioral_deviants(mixed):
    labels, g, kinds = mixed
    cfg = default_sensitivity()
    s, mean_deg = _benign_mean(g, labels, slice(None))
    plants = [k for k, v in labels.items() if v == "malicious" and kinds[k] == "exfiltration"]
    assert plants
    for k in plants:
        b = extract_behavioral(g, k, cfg)
        on = {LABELS[i] for i in np.flatnonzero(b[:11])}
        assert {"PL1", "PL6", "PL9"} <= on
        assert s[g.key_index[k]].sum() <= 2 * mean_deg


def test_ransomware_plants_are_structural_deviants(mixed):
    labels, g, kinds = mixed
    cols = [21 + edge_type_index("process", "file", "write") - 1, 21 + edge_type_index("process", "registry", "modify") - 1]
    s, mean_wm = _benign_mean(g, labels, cols)
    plants = [k for k, v in labels.items() if v == "malicious" and kinds[k] == "ransomware"]
    assert plants
    for k in plants:
        assert s[g.key_index[k], cols].sum() >= 20 * mean_wm


def test_benign_background_has_no_plants():
    _, labels = generate_scenario(ScenarioSpec(scenario="benign_background", n_processes=100, rng_seed=0))
    assert "malicious" not in labels.values()


def test_plants_exist_in_stream():
    events, labels = generate_scenario(ScenarioSpec(n_processes=200, n_ransomware=2, n_exfiltration=3, rng_seed=1))
    mal = {k for k, v in labels.items() if v == "malicious"}
    assert len(mal) == 5
    assert mal <= {e.subject_id for e in events}


def test_byte_reproducible(tmp_path):
    spec = ScenarioSpec(n_processes=150, rng_seed=8)
    for d in ("a", "b"):
        (tmp_path / d).mkdir()
        write_scenario(spec, tmp_path / d / "ev.jsonl", tmp_path / d / "t.jsonl")
    for f in ("ev.jsonl", "t.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert read_truth(tmp_path / "a" / "t.jsonl") == generate_scenario(spec)[1]
    other = tmp_path / "c.jsonl"
    write_events(generate_scenario(ScenarioSpec(n_processes=150, rng_seed=9))[0], other)
    assert other.read_bytes() != (tmp_path / "a" / "ev.jsonl").read_bytes()


@pytest.mark.parametrize("kw", [{"scenario": "phishing"}, {"n_processes": 5}, {"n_ransomware": -1}])
def test_spec_errors(kw):
    with pytest.raises(AptMclError):
        ScenarioSpec(**kw)


def _single_views(scenario):
    events, labels = generate_scenario(ScenarioSpec(scenario=scenario, n_processes=600, rng_seed=0))
    ex = Experiment(build_graph(events), labels, PipelineConfig(seed=0))
    ex.fit_views(("structural", "behavioral"))
    return ex.single_view("structural").macro_f1, ex.single_view("behavioral").macro_f1


def test_structural_view_wins_on_ransomware():
    sfv, bfv = _single_views("ransomware_burst")
    assert sfv > bfv


def test_behavioral_view_wins_on_exfiltration():
    sfv, bfv = _single_views("collection_exfiltration")
    assert bfv > sfv
