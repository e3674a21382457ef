"""Command-line operator surface.

Subcommands: synth (generate a benchmark graph), train, eval, ablate,
sweep, gradcheck. Every run writes a resolved config snapshot and
deterministic report files into the output directory; wall-clock timings go
to a separate run_meta.json so reports stay byte-identical across reruns.

The default data directory for relative dataset paths can be set with the
COLDLINK_DATA environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import graph as graph_mod
from . import meta as meta_mod
from . import synth as synth_mod
from .config import RunConfig, apply_overrides, load_config, save_config
from .encoder import init_encoder_params
from .graph import IngestSchema, TemporalGraph, load_csv, split
from .metrics import auc as auc_metric
from .metrics import metrics_report
from .predictor import init_predictor_params
from .tasks import build_test_tasks, build_train_tasks

SWEEP_AXES = {
    "N": "n_support",
    "span_size": "span_size",
    "batch": "batch_size",
    "d": "d",
    "k": "k",
    "inner_steps": "inner_steps",
}


def _data_path(path: str) -> str:
    base = os.environ.get("COLDLINK_DATA", "")
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def build_graph(cfg: RunConfig) -> TemporalGraph:
    if cfg.dataset:
        schema = IngestSchema(distinct_dst_space=cfg.bipartite,
                              node_feature_dim=cfg.node_feature_dim)
        g = load_csv(_data_path(cfg.dataset), schema)
        if cfg.node_features:
            g.node_features = synth_mod.load_node_features_csv(
                _data_path(cfg.node_features), g.num_nodes)
        return g
    return synth_mod.generate(cfg.synth_spec(), cfg.seed)


def init_theta(cfg: RunConfig, dims) -> ad.ParamSet:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    return init_encoder_params(dims, rng).merged(
        init_predictor_params(dims.d, dims.d_x, rng))


@dataclass
class RunData:
    graph: TemporalGraph
    chrono: object
    dims: object
    meta_cfg: object
    train_tasks: list
    val_tasks: list
    test_tasks: list


def prepare(cfg: RunConfig) -> RunData:
    g = build_graph(cfg)
    chrono = split(g, cfg.ratios())
    dims = cfg.encoder_dims(g.d_x, g.d_e)
    mc = cfg.meta_config()
    train_tasks = build_train_tasks(g, chrono, cfg.n_support, cfg.n_query, cfg.seed,
                                    new_only=cfg.train_new_only)
    if cfg.max_train_tasks:
        train_tasks = train_tasks[:cfg.max_train_tasks]
    val_tasks = build_test_tasks(g, chrono.val_new_nodes, cfg.n_support, cfg.seed)
    test_tasks = build_test_tasks(g, chrono.test_new_nodes, cfg.n_support, cfg.seed)
    return RunData(g, chrono, dims, mc, train_tasks, val_tasks, test_tasks)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def run_train(cfg: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config_resolved.txt")
    data = prepare(cfg)
    theta = init_theta(cfg, data.dims)
    epoch_times: list[float] = []
    t_start = time.perf_counter()
    last = {"t": t_start}

    with open(out / "epochs.jsonl", "w", encoding="utf-8") as log_file:

        def log_row(row):
            now = time.perf_counter()
            epoch_times.append(1000.0 * (now - last["t"]))
            last["t"] = now
            log_file.write(json.dumps(row, sort_keys=True) + "\n")
            log_file.flush()

        res = meta_mod.train(
            theta, data.graph, data.dims, data.meta_cfg,
            data.train_tasks, data.val_tasks, cfg.seed,
            log_fn=log_row,
            checkpoint_fn=lambda epoch, th: ad.save_params(th, out / "checkpoint_last.bin"))

    ad.save_params(res.theta, out / "checkpoint_best.bin")
    ad.save_params(res.final_theta, out / "checkpoint_final.bin")
    report = {
        "n_train_tasks": len(data.train_tasks),
        "n_val_tasks": len(data.val_tasks),
        "n_test_tasks": len(data.test_tasks),
        "epochs_run": len(res.history),
        "best_epoch": res.best_epoch,
        "best_val_auc": res.best_val_auc,
    }
    _write_json(out / "train_report.json", report)
    _write_json(out / "run_meta.json", {
        "wall_ms_total": 1000.0 * (time.perf_counter() - t_start),
        "per_epoch_ms": epoch_times,
    })
    return report


def run_eval(cfg: RunConfig, checkpoint, out_dir, which: str = "test") -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare(cfg)
    theta = ad.load_params(checkpoint)
    tasks = data.test_tasks if which == "test" else data.val_tasks
    t0 = time.perf_counter()
    preds, report = meta_mod.meta_test(theta, data.graph, data.dims, data.meta_cfg,
                                       tasks, per_task=cfg.per_task_metrics)
    _write_json(out / "eval_report.json", report)
    with open(out / "eval_per_task.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["task_id", "n_query", "auc"])
        for task in tasks:
            sub = [p for p in preds if p.task_id == task.node]
            w.writerow([task.node, len(task.query), repr(auc_metric(sub))])
    _write_json(out / "run_meta.json", {"wall_ms_total": 1000.0 * (time.perf_counter() - t0)})
    return report


def train_and_eval(cfg: RunConfig) -> dict:
    """Train then score the test tasks with the best-validation checkpoint
    (library path used by ablate/sweep; writes nothing)."""
    data = prepare(cfg)
    theta = init_theta(cfg, data.dims)
    res = meta_mod.train(theta, data.graph, data.dims, data.meta_cfg,
                         data.train_tasks, data.val_tasks, cfg.seed)
    _, report = meta_mod.meta_test(res.theta, data.graph, data.dims, data.meta_cfg,
                                   data.test_tasks, per_task=cfg.per_task_metrics)
    report["best_val_auc"] = res.best_val_auc
    report["epochs_run"] = len(res.history)
    return report


def run_ablate(cfg: RunConfig, out_dir, save_checkpoints: bool = False) -> list[dict]:
    """Train/evaluate the full model and its three ablations under one seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config_resolved.txt")
    variants = [
        ("full", {}),
        ("no_meta", {"no_meta": True}),
        ("no_span_adapt", {"no_span_adapt": True}),
        ("no_node_adapt", {"no_node_adapt": True}),
    ]
    rows = []
    timings = {}
    for name, flags in variants:
        vcfg = RunConfig(**{**cfg.__dict__, **flags})
        t0 = time.perf_counter()
        report = train_and_eval(vcfg)
        timings[name] = 1000.0 * (time.perf_counter() - t0)
        rows.append({"variant": name, "acc": report["acc"], "auc": report["auc"],
                     "macro_f1": report["macro_f1"]})
    _write_json(out / "ablate.json", rows)
    with open(out / "ablate.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["variant", "acc", "auc", "macro_f1"])
        for r in rows:
            w.writerow([r["variant"], repr(r["acc"]), repr(r["auc"]), repr(r["macro_f1"])])
    _write_json(out / "run_meta.json", {"wall_ms": timings})
    return rows


def run_sweep(cfg: RunConfig, axis: str, values, out_dir) -> list[dict]:
    """One train+eval per value of the chosen axis, shared seed.

    Sweeping N follows the evaluation protocol of the studies this mirrors:
    the aggregated-neighbor count k is set to the same value as N.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config_resolved.txt")
    rows = []
    timings = {}
    for value in values:
        vcfg = RunConfig(**dict(cfg.__dict__))
        setattr(vcfg, SWEEP_AXES[axis], int(value))
        if axis == "N":
            vcfg.k = int(value)
            if vcfg.span_size > int(value):
                vcfg.span_size = int(value)
        t0 = time.perf_counter()
        report = train_and_eval(vcfg)
        timings[str(value)] = 1000.0 * (time.perf_counter() - t0)
        rows.append({"value": int(value), "acc": report["acc"], "auc": report["auc"],
                     "macro_f1": report["macro_f1"]})
    _write_json(out / "sweep.json", {"axis": axis, "rows": rows})
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["value", "acc", "auc", "macro_f1"])
        for r in rows:
            w.writerow([r["value"], repr(r["acc"]), repr(r["auc"]), repr(r["macro_f1"])])
    _write_json(out / "run_meta.json", {"wall_ms": timings})
    return rows


def gradcheck_config() -> RunConfig:
    """Default toy setup for gradient verification: <= 20 nodes, two heads,
    two hops, a two-span support set."""
    cfg = RunConfig()
    cfg.synth_communities = 2
    cfg.synth_nodes_per_community = 8
    cfg.synth_events_per_node = 8
    cfg.synth_new_node_fraction = 0.0
    cfg.synth_noise = 0.2
    cfg.synth_horizon = 100.0
    cfg.synth_edge_dim = 2
    cfg.d = 6
    cfg.d_t = 4
    cfg.heads = 2
    cfg.hops = 2
    cfg.k = 3
    cfg.n_support = 4
    cfg.n_query = 2
    cfg.span_size = 2
    return cfg


def run_gradcheck(cfg: RunConfig, out_dir=None) -> dict:
    data = prepare(cfg)
    if not data.train_tasks:
        raise ValueError("gradcheck graph produced no eligible task")
    theta = init_theta(cfg, data.dims)
    report = meta_mod.gradient_check(theta, data.graph, data.dims, data.meta_cfg,
                                     data.train_tasks[0])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "gradcheck.json", report)
    return report


def run_synth(cfg: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = synth_mod.generate(cfg.synth_spec(), cfg.seed)
    synth_mod.write_csv(g, out / "events.csv")
    synth_mod.write_node_features_csv(g, out / "node_features.csv")
    graph_mod.write_summary(g, out / "summary.json")
    return g.summary()


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coldlink",
                                     description="Few-shot temporal link prediction for new nodes")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", default="runs/latest", help="output directory")
    parser.add_argument("--threads", type=int, help="worker threads for task processing")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="generate a synthetic benchmark graph")
    sub.add_parser("train", help="meta-train and checkpoint the best validation epoch")
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on new-node tasks")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--split", choices=("val", "test"), default="test")
    p_abl = sub.add_parser("ablate", help="train/evaluate the full model and its ablations")
    p_abl.add_argument("--save-checkpoints", action="store_true")
    p_sweep = sub.add_parser("sweep", help="train/evaluate across one hyperparameter axis")
    p_sweep.add_argument("axis", choices=sorted(SWEEP_AXES))
    p_sweep.add_argument("values", nargs="+", type=int)
    sub.add_parser("gradcheck", help="verify gradients against finite differences")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else (
        gradcheck_config() if args.command == "gradcheck" else RunConfig())
    apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    cfg = _resolve_config(args)
    if args.command == "synth":
        summary = run_synth(cfg, args.out)
        print(json.dumps(summary, sort_keys=True))
        return 0
    if args.command == "train":
        report = run_train(cfg, args.out)
        print(json.dumps(report, sort_keys=True))
        return 0
    if args.command == "eval":
        report = run_eval(cfg, args.checkpoint, args.out, which=args.split)
        print(json.dumps(report, sort_keys=True))
        return 0
    if args.command == "ablate":
        rows = run_ablate(cfg, args.out, save_checkpoints=args.save_checkpoints)
        for r in rows:
            print(json.dumps(r, sort_keys=True))
        return 0
    if args.command == "sweep":
        rows = run_sweep(cfg, args.axis, args.values, args.out)
        for r in rows:
            print(json.dumps(r, sort_keys=True))
        return 0
    if args.command == "gradcheck":
        report = run_gradcheck(cfg, args.out)
        for key, entry in report.items():
            if key == "all_ok":
                continue
            status = "ok" if entry["ok"] else "FAIL"
            print(f"{status}  {key}  max_rel_err={entry['max_rel_err']:.3e}")
        print("gradcheck:", "PASS" if report["all_ok"] else "FAIL")
        return 0 if report["all_ok"] else 1
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
