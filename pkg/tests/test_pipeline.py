from __future__ import annotations

import json

import pytest

from aptmcl import cli
from aptmcl.errors import ArtifactError, ConfigError
from aptmcl.experiment import Experiment
from aptmcl.pipeline import REPORT_DIR_ENV, ArtifactStore, DetectionReport, PipelineConfig, ingest
from aptmcl.provenance import build_graph
from aptmcl.synth import ScenarioSpec, generate_scenario

SMALL = {"scenario": {"n_processes": 200, "rng_seed": 2}}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(REPORT_DIR_ENV, raising=False)
    (tmp_path / "cfg.json").write_text(json.dumps(SMALL))
    return tmp_path


def run(*argv):
    return cli.main([*argv, "--config", "cfg.json"])


class TestConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="bogus"):
            PipelineConfig.from_dict({"bogus": 1})
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"train": {"epochs": 3, "nope": 1}})

    def test_bad_values(self, tmp_path):
        with pytest.raises(ValueError):
            PipelineConfig(strategy="xx")
        with pytest.raises(ConfigError):
            PipelineConfig(view="spectral")
        (tmp_path / "c.json").write_text("{not json")
        with pytest.raises(ConfigError):
            PipelineConfig.load(tmp_path / "c.json")
        with pytest.raises(ConfigError):
            PipelineConfig.load(tmp_path / "absent.json")

    def test_round_trip_and_hash(self):
        c = PipelineConfig.from_dict({"seed": 3, "train": {"epochs": 5}})
        assert PipelineConfig.from_dict(c.to_dict()) == c
        assert c.hash() == PipelineConfig.from_dict(c.to_dict()).hash()
        assert c.hash() == PipelineConfig.from_dict({**c.to_dict(), "strategy": "bv", "view": "structural"}).hash()
        assert c.hash() != PipelineConfig.from_dict({**c.to_dict(), "seed": 4}).hash()

    def test_seed_propagates(self):
        r = PipelineConfig(seed=9).resolved()
        assert r.train.rng_seed == r.cotrain.seed == r.split.rng_seed == 9

    def test_report_dir_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(REPORT_DIR_ENV, str(tmp_path / "elsewhere"))
        assert PipelineConfig().report_path() == tmp_path / "elsewhere"
        monkeypatch.delenv(REPORT_DIR_ENV)
        assert str(PipelineConfig(report_dir="r").report_path()) == "r"


class TestArtifacts:
    def test_missing_and_stale(self, workdir):
        store = ArtifactStore(PipelineConfig())
        with pytest.raises(ArtifactError, match="run cotrain first"):
            store.load("cotrain")
        store.save("graph", {"x": 1})
        assert store.load("graph") == {"x": 1}
        with pytest.raises(ArtifactError, match="rerun ingest"):
            ArtifactStore(PipelineConfig(seed=1)).load("graph")
        store.path("split").write_text("{broken")
        with pytest.raises(ArtifactError, match="corrupt"):
            store.load("split")


class TestCli:
    def test_full_chain_and_reports(self, workdir, capsys, monkeypatch):
        assert run("synth") == 0
        for step in ("ingest", "train"):
            assert run(step) == 0
        assert run("detect") == 1
        assert "run cotrain first" in capsys.readouterr().err
        assert run("cotrain") == 0
        assert run("detect") == 0
        out = workdir / "reports" / "detections_st_both.jsonl"
        rep = DetectionReport.read(out)
        assert rep.header()["n_processes"] == len(rep.rows) > 200
        first = out.read_bytes()
        assert run("detect") == 0
        assert out.read_bytes() == first
        assert run("detect", "--strategy", "bv") == 0
        bv = DetectionReport.read(workdir / "reports" / "detections_bv_both.jsonl").flags()
        mv_path = workdir / "alt"
        monkeypatch.setenv(REPORT_DIR_ENV, str(mv_path))
        assert run("detect", "--strategy", "mv") == 0
        mv = DetectionReport.read(mv_path / "detections_mv_both.jsonl").flags()
        assert {k for k, v in bv.items() if v} <= {k for k, v in mv.items() if v}
        monkeypatch.delenv(REPORT_DIR_ENV)
        assert run("eval") == 0
        lines = (workdir / "reports" / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(x)["variant"] for x in lines] == ["bv", "mv", "sv", "st", "structural", "behavioral"]

    def test_report_rows_consistent_with_strategy(self, workdir):
        for step in ("synth", "ingest", "train", "cotrain"):
            assert run(step) == 0
        assert run("detect", "--strategy", "sv") == 0
        for r in DetectionReport.read(workdir / "reports" / "detections_sv_both.jsonl").rows:
            mp = (r["sm"][0] + r["bm"][0]) / 2
            bp = (r["sm"][1] + r["bm"][1]) / 2
            assert (r["verdict"] == "malicious") == (mp - bp > 1e-12)

    def test_seed_change_requires_reingest(self, workdir, capsys):
        assert run("synth") == 0 and run("ingest") == 0
        assert run("train", "--seed", "5") == 1
        assert "rerun ingest" in capsys.readouterr().err

    def test_usage_errors(self, workdir, capsys):
        (workdir / "bad.json").write_text(json.dumps({"oops": 1}))
        assert cli.main(["train", "--config", "bad.json"]) == 2
        assert "config error" in capsys.readouterr().err
        with pytest.raises(SystemExit):
            cli.main(["detect", "--strategy", "zz"])
        assert cli.main(["ingest", "--events", "missing.jsonl"]) == 1

    def test_synth_flags(self, workdir):
        assert run("synth", "--scenario", "benign_background", "--processes", "60", "--events", "e.jsonl", "--truth", "t.jsonl") == 0
        labels = [json.loads(x)["label"] for x in (workdir / "t.jsonl").read_text().splitlines()]
        assert set(labels) == {"benign"}


def test_experiment_annotates_failures():
    events, labels = generate_scenario(ScenarioSpec(n_processes=300, rng_seed=4))
    cfg = PipelineConfig.from_dict({"cotrain": {"batch_thres": 0.99}})
    report = Experiment(build_graph(events), labels, cfg).run()
    names = [r.name for r in report.results]
    assert names[:3] == ["SFV", "BFV", "CON"]
    failed = [r for r in report.results if r.error]
    assert {r.name for r in failed} == {f"APT-MCL/{s}" for s in ("bv", "mv", "sv", "st")}
    assert all("ColdStartError" in r.error for r in failed)
    assert "FAILED" in report.table()
    with pytest.raises(KeyError):
        report["APT-MCL/st"]
    assert 0 <= report.macro_f1("SFV") <= 1


def test_ingest_writes_reloadable_graph(workdir):
    events, _ = generate_scenario(ScenarioSpec(n_processes=60, rng_seed=0))
    from aptmcl.provenance import write_events

    write_events(events, "events.jsonl")
    g = ingest(PipelineConfig())
    store = ArtifactStore(PipelineConfig())
    assert store.load("graph")["n_nodes"] == g.n_nodes
