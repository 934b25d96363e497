"""Command-line surface: data generation, training, evaluation, grid search.

All randomness flows from a single --seed through per-subsystem generator
splits, so identical configs reproduce identical outputs bit for bit
(reports differ only in wall-clock fields).  Exit codes: 0 success,
1 runtime abort, 2 usage or config error.  DAGRL_OUT_DIR overrides the
default output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import datagen, graphs, pipeline, scoring
from .actor import SdgatConfig
from .critic import CriticConfig

_BIC_FLAGS = {"1": "separate", "2": "pooled"}

DEFAULT_EPSILONS = (0.1, 0.2)
DEFAULT_DELTAS = (0.02, 0.035, 0.05, 0.065, 0.08)


class ConfigError(ValueError):
    pass


def _from_dict(cls, payload: dict, section: str):
    """Build a config dataclass, rejecting unknown keys."""
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    return cls(**payload)


_SECTIONS = {
    "generation": datagen.GenConfig,
    "score": scoring.ScoreConfig,
    "encoder": SdgatConfig,
    "critic": CriticConfig,
    "procedure": pipeline.ProcedureConfig,
}


def parse_run_config(path) -> dict:
    """Load a full run-config bundle; unknown sections or keys are errors."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    known = set(_SECTIONS) | {"paths", "seed"}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    out = {}
    for name, cls in _SECTIONS.items():
        section = payload.get(name, {})
        if name == "generation" and not section:
            out[name] = None
            continue
        out[name] = _from_dict(cls, section, name)
    paths = payload.get("paths", {})
    if not isinstance(paths, dict):
        raise ConfigError("'paths' must be an object")
    out["paths"] = {str(k): str(v) for k, v in paths.items()}
    out["seed"] = payload.get("seed")
    return out


def serialize_run_config(config: dict) -> dict:
    out = {}
    for name in _SECTIONS:
        if config.get(name) is not None:
            out[name] = asdict(config[name])
    if config.get("paths"):
        out["paths"] = dict(config["paths"])
    if config.get("seed") is not None:
        out["seed"] = config["seed"]
    return out


def _out_dir(args) -> Path:
    out = args.out_dir or os.environ.get("DAGRL_OUT_DIR") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- generate ----------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = datagen.GenConfig(
        n=args.n, samples=args.samples, model_tag=args.model,
        edge_prob=args.edge_prob, seed=args.seed)
    try:
        ds = datagen.generate(cfg)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    out = _out_dir(args)
    name = args.name or f"{args.model}_n{args.n}_m{args.samples}_s{args.seed}"
    datagen.save_dataset(
        ds,
        out / f"{name}_data.csv",
        out / f"{name}_truth.json",
        out / f"{name}_meta.json",
    )
    print(json.dumps({
        "data": str(out / f"{name}_data.csv"),
        "truth": str(out / f"{name}_truth.json"),
        "meta": str(out / f"{name}_meta.json"),
        "n": ds.n, "samples": ds.samples,
        "edges": int(ds.truth.sum()),
    }))
    return 0


# -- train -------------------------------------------------------------------


def _resolve_train_configs(args):
    bundle = parse_run_config(args.config) if args.config else {
        name: (None if name == "generation" else cls())
        for name, cls in _SECTIONS.items()}
    if args.config is None:
        bundle["paths"], bundle["seed"] = {}, None
    proc: pipeline.ProcedureConfig = bundle["procedure"]
    score: scoring.ScoreConfig = bundle["score"]
    if args.algo:
        proc.algorithm = args.algo
    if args.iters is not None:
        proc.iterations = args.iters
    if args.seed is not None:
        proc.seed = args.seed
    elif bundle.get("seed") is not None:
        proc.seed = int(bundle["seed"])
    if args.bic:
        score.bic_variant = _BIC_FLAGS[args.bic]
    if args.regressor:
        score.regressor = args.regressor
    if args.batch is not None:
        proc.batch_size = args.batch
    if args.state_depth is not None:
        proc.state_depth = args.state_depth
    if args.eval_every is not None:
        proc.eval_every = args.eval_every
    if args.prune_threshold is not None:
        proc.threshold_prune = args.prune_threshold
    if args.clip_radius is not None:
        proc.clip_radius = args.clip_radius
    if args.kl_threshold is not None:
        proc.kl_threshold = args.kl_threshold
    proc.validate()
    score.validate()
    return bundle


def _final_graphs(record: pipeline.RunRecord, ds: datagen.Dataset,
                  proc: pipeline.ProcedureConfig, score_cfg: scoring.ScoreConfig):
    """Best recorded DAG plus its pruned version (greedy, then optional threshold)."""
    best = record.best_dag(ds.n)
    if best is None:
        return None, None
    pruned = pipeline.prune_greedy(best, ds, tolerance=proc.greedy_prune_tolerance,
                                   scorer=record.scorer)
    if proc.threshold_prune is not None and score_cfg.regressor != "gp":
        pruned = pipeline.prune_threshold(pruned, ds, score_cfg.regressor,
                                          proc.threshold_prune)
    return best, pruned


def _edge_list(a: np.ndarray | None):
    if a is None:
        return None
    return [[int(i), int(j)] for i, j in zip(*np.nonzero(a))]


def cmd_train(args) -> int:
    try:
        bundle = _resolve_train_configs(args)
    except (ConfigError, ValueError, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    proc: pipeline.ProcedureConfig = bundle["procedure"]
    score_cfg: scoring.ScoreConfig = bundle["score"]

    data_path = args.data or bundle["paths"].get("data")
    if not data_path:
        print("config error: no dataset given (--data or paths.data)", file=sys.stderr)
        return 2
    truth_path = args.truth or bundle["paths"].get("truth")
    try:
        ds = datagen.load_external(data_path, truth_path, normalize=args.normalize)
    except (datagen.ParseError, FileNotFoundError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    out = _out_dir(args)
    log_path = out / "log.jsonl"
    checkpoint_path = out / "checkpoint.npz"
    report_path = out / "report.json"
    try:
        record = pipeline.run_procedure(
            ds, proc, score_cfg, bundle["encoder"], bundle["critic"],
            log_path=log_path, checkpoint_path=checkpoint_path)
    except pipeline.RunAbort as err:
        diagnostics = {
            "aborted": str(err),
            "iterations_run": err.record.iterations_run,
            "config": serialize_run_config(bundle),
        }
        with open(out / "abort.json", "w", encoding="utf-8") as fh:
            json.dump(diagnostics, fh, indent=2)
        print(f"aborted: {err}", file=sys.stderr)
        return 1
    except scoring.DegenerateDataError as err:
        print(f"aborted: {err}", file=sys.stderr)
        return 1

    best, pruned = _final_graphs(record, ds, proc, score_cfg)
    report = {
        "config": serialize_run_config(bundle),
        "seed": proc.seed,
        "iterations": record.iterations_run,
        "anchors": {"lower": record.lower_anchor, "upper": record.upper_anchor},
        "final_weights": {"cycle": record.cycle_weight, "indicator": record.indicator_weight},
        "best_graph": _edge_list(best),
        "pruned_graph": _edge_list(pruned),
        "wall_clock": record.wall_clock,
    }
    if record.log and "clip_fraction" in record.log[-1]:
        tail = [e["clip_fraction"] for e in record.log if "clip_fraction" in e]
        report["clip_rate"] = {
            "mean": float(np.mean(tail)),
            "final": tail[-1],
        }
    if ds.truth is not None and best is not None:
        report["metrics_raw"] = graphs.graph_metrics(best, ds.truth).to_dict()
        report["metrics_pruned"] = graphs.graph_metrics(pruned, ds.truth).to_dict()
        report["shd"] = report["metrics_pruned"]["shd"]
        if record.best_history:
            series = pipeline.evaluate_periodic(record, ds.truth)
            pipeline.evaluation_to_csv(series, out / "eval.csv")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    print(json.dumps({"report": str(report_path),
                      "shd": report.get("shd"),
                      "iterations": record.iterations_run}))
    return 0


# -- eval ----------------------------------------------------------------------


def cmd_eval(args) -> int:
    try:
        estimated = graphs.load_graph(args.estimated)
        truth = graphs.load_graph(args.truth)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    if estimated.shape != truth.shape:
        print(f"error: size mismatch {estimated.shape} vs {truth.shape}", file=sys.stderr)
        return 2
    if args.prune:
        if not args.data:
            print("error: --prune needs --data", file=sys.stderr)
            return 2
        ds = datagen.load_external(args.data)
        cfg = scoring.ScoreConfig(regressor=args.regressor)
        estimated = pipeline.prune_greedy(estimated, ds, cfg)
    print(json.dumps(graphs.graph_metrics(estimated, truth).to_dict()))
    return 0


# -- gridsearch -------------------------------------------------------------------


def cmd_gridsearch(args) -> int:
    try:
        ds = datagen.load_external(args.data, args.truth, normalize=args.normalize)
    except (datagen.ParseError, FileNotFoundError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    epsilons = [float(v) for v in args.eps.split(",")] if args.eps else list(DEFAULT_EPSILONS)
    deltas = [float(v) for v in args.deltas.split(",")] if args.deltas else list(DEFAULT_DELTAS)
    out = _out_dir(args)
    table_path = out / "gridsearch.csv"
    rows = []
    for eps in sorted(epsilons):
        for delta in sorted(deltas):
            cell = {"epsilon": eps, "delta": delta, "mean_reward": np.nan,
                    "reward_std": np.nan, "mean_shd": np.nan, "failures": 0}
            rewards, shds = [], []
            for k in range(args.seeds):
                proc = pipeline.ProcedureConfig(
                    iterations=args.iters, algorithm="trc",
                    clip_radius=eps, kl_threshold=delta, seed=args.seed + k,
                    eval_every=0)
                try:
                    record = pipeline.run_procedure(ds, proc, scoring.ScoreConfig(
                        bic_variant=_BIC_FLAGS[args.bic]))
                    tail = record.log[-min(len(record.log), max(1, args.iters // 2)):]
                    rewards.extend(e["reward_mean"] for e in tail)
                    if ds.truth is not None:
                        best = record.best_dag(ds.n)
                        if best is not None:
                            pruned = pipeline.prune_greedy(best, ds, scorer=record.scorer)
                            shds.append(graphs.graph_metrics(pruned, ds.truth).shd)
                except Exception:  # noqa: BLE001 -- a failed cell must not kill the sweep
                    cell["failures"] += 1
            if rewards:
                cell["mean_reward"] = float(np.mean(rewards))
                cell["reward_std"] = float(np.std(rewards))
            if shds:
                cell["mean_shd"] = float(np.mean(shds))
            rows.append(cell)
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write("epsilon,delta,mean_reward,reward_std,mean_shd,failures\n")
        for cell in rows:
            fh.write("{epsilon},{delta},{mean_reward},{reward_std},{mean_shd},{failures}\n"
                     .format(**cell))
    print(json.dumps({"table": str(table_path), "cells": len(rows)}))
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dagrl",
                                     description="Causal DAG discovery by policy-gradient search")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset with its true graph")
    gen.add_argument("--model", required=True, choices=[t for t in datagen.MODEL_TAGS if t != "external"])
    gen.add_argument("--n", type=int, required=True, help="number of variables")
    gen.add_argument("--samples", type=int, required=True, help="number of observations")
    gen.add_argument("--edge-prob", type=float, default=0.5)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--name", default=None)
    gen.add_argument("--out-dir", default=None)
    gen.set_defaults(func=cmd_generate)

    train = sub.add_parser("train", help="search for the best-scoring DAG")
    train.add_argument("--data", default=None, help="dataset CSV (rows = observations)")
    train.add_argument("--truth", default=None, help="true graph (.json edge list or .csv matrix)")
    train.add_argument("--config", default=None, help="run-config JSON bundle")
    train.add_argument("--algo", choices=pipeline.ALGORITHMS, default=None)
    train.add_argument("--bic", choices=sorted(_BIC_FLAGS), default=None)
    train.add_argument("--regressor", choices=scoring.REGRESSORS, default=None)
    train.add_argument("--iters", type=int, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--batch", type=int, default=None)
    train.add_argument("--state-depth", type=int, default=None)
    train.add_argument("--eval-every", type=int, default=None)
    train.add_argument("--prune-threshold", type=float, default=None)
    train.add_argument("--clip-radius", type=float, default=None)
    train.add_argument("--kl-threshold", type=float, default=None)
    train.add_argument("--normalize", action="store_true", help="z-score each variable")
    train.add_argument("--out-dir", default=None)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="metrics of an estimated graph against the truth")
    ev.add_argument("--estimated", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--prune", action="store_true")
    ev.add_argument("--data", default=None)
    ev.add_argument("--regressor", choices=scoring.REGRESSORS, default="linear")
    ev.set_defaults(func=cmd_eval)

    grid = sub.add_parser("gridsearch",
                          help="sweep clip radius x KL threshold for the trust-region learner")
    grid.add_argument("--data", required=True)
    grid.add_argument("--truth", default=None)
    grid.add_argument("--eps", default=None, help="comma-separated clip radii")
    grid.add_argument("--deltas", default=None, help="comma-separated KL thresholds")
    grid.add_argument("--seeds", type=int, default=1)
    grid.add_argument("--seed", type=int, default=0)
    grid.add_argument("--iters", type=int, default=2000)
    grid.add_argument("--bic", choices=sorted(_BIC_FLAGS), default="2")
    grid.add_argument("--normalize", action="store_true")
    grid.add_argument("--out-dir", default=None)
    grid.set_defaults(func=cmd_gridsearch)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
