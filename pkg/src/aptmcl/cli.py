"""Command-line entry point.

Subcommands run one pipeline stage each; later stages read the artifacts
earlier ones left under ``work_dir``::

    aptmcl synth      # events.jsonl + truth.jsonl
    aptmcl ingest     # provenance graph
    aptmcl train      # encoders and isolation forests, one per view
    aptmcl cotrain    # SM/BM sub-models and the stacking meta-model
    aptmcl detect     # per-process report
    aptmcl eval       # metrics on the held-out split

Reports go to ``report_dir`` unless ``APTMCL_REPORT_DIR`` is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from aptmcl.errors import AptMclError, ConfigError
from aptmcl.evaluation import Split, format_table, metrics_from_arrays
from aptmcl.fusion import FusionStrategy
from aptmcl.pipeline import (
    REPORT_DIR_ENV,
    VIEW_CHOICES,
    ArtifactStore,
    PipelineConfig,
    cotrain,
    detect,
    detect_graph,
    ingest,
    load_graph,
    load_models,
    read_truth,
    train,
)
from aptmcl.provenance import build_graph, read_events
from aptmcl.synth import SCENARIOS, ScenarioSpec, write_scenario

logger = logging.getLogger("aptmcl")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2


def _config(args: argparse.Namespace) -> PipelineConfig:
    base = PipelineConfig.load(args.config).to_dict() if args.config else PipelineConfig().to_dict()
    for name in ("seed", "strategy", "view"):
        value = getattr(args, name, None)
        if value is not None:
            base[name] = value
    return PipelineConfig.from_dict(base)


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _report_dir(cfg: PipelineConfig) -> Path:
    d = cfg.report_path()
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_synth(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    spec = cfg.scenario.to_dict()
    if args.scenario:
        spec["scenario"] = args.scenario
        # plant counts follow the new scenario unless the config pins them
        pinned = _raw_section(args.config, "scenario") if args.config else {}
        for k in ("n_ransomware", "n_exfiltration"):
            if k not in pinned:
                spec[k] = None
    if args.processes is not None:
        spec["n_processes"] = args.processes
    if args.seed is not None:
        spec["rng_seed"] = args.seed
    try:
        scenario = ScenarioSpec.from_dict(spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scenario: {exc}") from exc
    events = args.events or cfg.events
    truth = args.truth or cfg.truth
    for p in (events, truth):
        Path(p).parent.mkdir(parents=True, exist_ok=True)
    labels = write_scenario(scenario, events, truth)
    n_mal = sum(v == "malicious" for v in labels.values())
    print(f"wrote {events} and {truth}: {len(labels)} processes, {n_mal} malicious")
    return EXIT_OK


def _raw_section(path: str, name: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh).get(name, {}) or {}


def cmd_ingest(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    if args.events:
        cfg.events = args.events
    graph = ingest(cfg)
    print(f"graph: {graph.n_nodes} nodes, {graph.n_edges} edges -> {ArtifactStore(cfg).graph_dir()}")
    return EXIT_OK


def cmd_train(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    vms = train(cfg)
    for view, vm in vms.items():
        hist = vm.encoder.history
        print(f"{view}: encoder loss {hist[0]:.4f} -> {hist[-1]:.4f}, forest of {vm.forest.n_trees} trees")
    return EXIT_OK


def cmd_cotrain(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    models = cotrain(cfg)
    res = models.result
    print(
        f"co-training: {res.iterations} rounds, stop={res.stop_reason}, "
        f"{len(res.state.ld)} pseudo-labelled, meta-model {'trained' if models.meta.model else 'untrained'}"
    )
    return EXIT_OK


def _detection_path(cfg: PipelineConfig) -> Path:
    return _report_dir(cfg) / f"detections_{cfg.strategy}_{cfg.view}.jsonl"


def cmd_detect(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    if args.events:
        store = ArtifactStore(cfg)
        vms, models = load_models(store)
        graph = build_graph(read_events(args.events))
        c = cfg.resolved()
        report = detect_graph(graph, c.load_sensitivity(), vms, models, c.strategy, c.view, store.config_hash)
    else:
        report = detect(cfg)
    out = _detection_path(cfg)
    report.write(out)
    head = report.header()
    print(f"{head['n_malicious']} of {head['n_processes']} processes flagged -> {out}")
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    if args.experiment:
        return _eval_experiment(cfg)
    store = ArtifactStore(cfg)
    parts = Split(**store.load("split"))
    truth = read_truth(cfg.truth)
    graph = load_graph(store)
    vms, models = load_models(store)
    test = sorted(parts.nes + parts.mes)
    actual = np.array([truth[k] == "malicious" for k in test])
    c = cfg.resolved()
    rows, records = [], []
    combos = [(s.value, "both") for s in FusionStrategy] + [("-", "structural"), ("-", "behavioral")]
    for strategy, view in combos:
        st = strategy if strategy != "-" else cfg.strategy
        rep = detect_graph(graph, c.load_sensitivity(), vms, models, st, view, store.config_hash)
        flags = rep.flags()
        m = metrics_from_arrays(np.array([flags[k] for k in test]), actual)
        name = strategy if view == "both" else view
        rows.append((name, m))
        records.append({"variant": name, "view": view, "strategy": strategy, "n_test": len(test), **m.to_dict()})
    d = _report_dir(cfg)
    _write_jsonl(d / "metrics.jsonl", records)
    table = format_table(rows)
    (d / "metrics.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def _eval_experiment(cfg: PipelineConfig) -> int:
    from aptmcl.experiment import Experiment

    store = ArtifactStore(cfg)
    ex = Experiment(load_graph(store), read_truth(cfg.truth), cfg)
    report = ex.run()
    sweep = ex.sweep_batch_thres(strategy=cfg.strategy)
    report.notes["batch_thres_sweep"] = {str(k): v.to_dict() for k, v in sweep.items()}
    d = _report_dir(cfg)
    report.write(d, "experiment")
    _write_jsonl(d / "sweep.jsonl", [v.to_dict() for v in sweep.values()])
    print(report.table())
    print("batch_thres sweep: " + ", ".join(f"{k}: {v.macro_f1:.4f}{' (cold start)' if v.cold_start else ''}" for k, v in sweep.items()))
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic event log and its ground truth"),
    "ingest": (cmd_ingest, "build the provenance graph from the event log"),
    "train": (cmd_train, "fit per-view encoders and isolation forests"),
    "cotrain": (cmd_cotrain, "co-train the view sub-models and the stacking meta-model"),
    "detect": (cmd_detect, "score every process and write a detection report"),
    "eval": (cmd_eval, "score detections on the held-out split"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config; defaults apply when omitted")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--strategy", choices=[s.value for s in FusionStrategy], help="fusion strategy")
    common.add_argument("--view", choices=VIEW_CHOICES, help="which view(s) decide the verdict")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")

    parser = argparse.ArgumentParser(
        prog="aptmcl",
        description="Multi-view provenance-graph APT detection",
        epilog=f"{REPORT_DIR_ENV} overrides the report directory.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "synth":
            p.add_argument("--scenario", choices=SCENARIOS, help="scenario kind")
            p.add_argument("--processes", type=int, help="number of benign processes")
            p.add_argument("--events", help="output event log (default: config 'events')")
            p.add_argument("--truth", help="output ground truth (default: config 'truth')")
        elif name in ("ingest", "detect"):
            p.add_argument("--events", help="event log to read instead of the configured one")
        elif name == "eval":
            p.add_argument("--experiment", action="store_true", help="run the ablation variants and the batch_thres sweep")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    fn = COMMANDS[args.command][0]
    try:
        cfg = _config(args)
        return fn(cfg, args)
    except ConfigError as exc:
        print(f"aptmcl {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AptMclError, OSError) as exc:
        print(f"aptmcl {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
