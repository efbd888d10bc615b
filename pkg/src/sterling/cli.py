"""Command-line entry point: ``sterling <verb> [options] [dot.path=value ...]``.

Exit codes: 0 success, 1 validation or input error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .bigraph import EmptyGraphError, GraphParseError, write_id_map
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, apply_override, load_config
from .datasets import Dataset, load_dataset
from .evalkit import (cocluster_score, link_prediction_auc, make_pairs, mi_bound_diagnostic,
                      rank_items, recommend_metrics, sample_negatives)
from .objectives import DegenerateDistributionError
from .trainer import TrainingError, TrainRun, emit_embeddings, global_distributions, infer, train

VERBS = ("train", "embed", "eval-rec", "eval-lp", "eval-cc", "diag-mi", "gradcheck")
CHECKPOINT = "model.ckpt"
EPOCH_LOG = "epochs.jsonl"

log = logging.getLogger("sterling")


class UsageError(ValueError):
    """Bad invocation: missing files, clobbered outputs, unusable data."""


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sterling", description="Bipartite graph embedding and co-clustering.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                   help="dot-path config overrides, e.g. model.d=256")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="seed for every random draw (overrides config)")
    p.add_argument("--threads", type=int, help="BLAS thread cap (default: all cores)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--ablate", default="", help="comma-separated ablation switches, e.g. no-glb,no-u")
    return p


def resolve_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    for item in args.overrides:
        apply_override(cfg, item)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.precision is not None:
        cfg.precision = args.precision
    cfg.ablate.enable(args.ablate.split(","))
    return cfg.validate()


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- training


def run_training(cfg: RunConfig, ds: Dataset, out: Path, force: bool) -> TrainRun:
    """Train from scratch, checkpointing after every epoch."""
    out.mkdir(parents=True, exist_ok=True)
    ckpt, epochs = out / CHECKPOINT, out / EPOCH_LOG
    _guard(ckpt, force)
    _guard(epochs, force)
    epochs.write_text("", encoding="utf-8")
    ids = out / f"{ds.name}.ids.tsv"
    write_id_map(ds.graph, ids)

    run = TrainRun.create(cfg, ds.graph)
    run.id_map = ids.name

    def on_epoch(r: TrainRun, line: dict) -> None:
        with open(epochs, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(line) + "\n")
        save_checkpoint(ckpt, r)

    save_checkpoint(ckpt, run)
    return train(run, on_epoch=on_epoch)


def trained_run(cfg: RunConfig, ds: Dataset, out: Path, force: bool) -> TrainRun:
    """Reuse a finished checkpoint for this exact config, otherwise train."""
    ckpt = out / CHECKPOINT
    if ckpt.exists() and not force:
        run = load_checkpoint(ckpt, ds.graph)
        if run.config.config_hash() != cfg.config_hash():
            raise UsageError(f"{ckpt} was trained with a different config; pass --force to retrain")
        if run.epoch < cfg.model.epochs:
            raise UsageError(f"{ckpt} holds an unfinished run (epoch {run.epoch}); pass --force to retrain")
        return run
    return run_training(cfg, ds, out, force=True)


# -------------------------------------------------------------- evaluation


def eval_rec(cfg: RunConfig, ds: Dataset, run: TrainRun) -> dict:
    if len(ds.test_edges) == 0:
        raise UsageError("eval-rec needs held-out edges: set data.test_path or data.split")
    emb = infer(run.model, ds.graph)
    lists = rank_items(emb.U, emb.V, ds.graph, ds.test_edges, top=max(cfg.eval.k_values))
    return recommend_metrics(lists, cfg.eval.k_values)


def eval_lp(cfg: RunConfig, ds: Dataset, run: TrainRun) -> dict:
    if len(ds.test_edges) == 0:
        raise UsageError("eval-lp needs held-out edges: set data.test_path or data.split=random")
    rng = np.random.default_rng([cfg.seed, 7])
    g = ds.graph
    train_pos = np.asarray(g.edges)
    test_pos = np.asarray(ds.test_edges)
    train_neg = sample_negatives(g, len(train_pos), rng, exclude=test_pos)
    test_neg = sample_negatives(g, len(test_pos), rng, exclude=np.concatenate([test_pos, train_neg]))
    emb = infer(run.model, g)
    auc = link_prediction_auc(emb.U, emb.V, make_pairs(train_pos, train_neg), make_pairs(test_pos, test_neg))
    return {"AUC": 100.0 * auc}


def eval_cc(cfg: RunConfig, ds: Dataset, run: TrainRun) -> dict:
    if ds.labels_u is None and ds.labels_v is None:
        raise UsageError("eval-cc needs class labels: set data.labels_u_path or data.labels_v_path")
    emb = infer(run.model, ds.graph)
    out = {}
    for side, probs, labels in (("u", emb.P_u, ds.labels_u), ("v", emb.P_v, ds.labels_v)):
        if labels is not None:
            score = cocluster_score(probs, labels)
            out[f"NMI_{side}"] = 100.0 * score.nmi
            out[f"ACC_{side}"] = 100.0 * score.acc
    return out


def diag_mi(cfg: RunConfig, ds: Dataset, run: TrainRun) -> dict:
    emb = infer(run.model, ds.graph)
    p_uv, joint = global_distributions(run)
    bins = cfg.eval.diag_bins or cfg.model.n_clusters
    return mi_bound_diagnostic(emb.U, emb.V, p_uv.matrix.data, joint.joint.data, bins, seed=cfg.seed)


EVALUATORS = {"eval-rec": eval_rec, "eval-lp": eval_lp, "eval-cc": eval_cc, "diag-mi": diag_mi}


# -------------------------------------------------------------------- main


def _configure_logging() -> None:
    level = os.environ.get("STERLING_LOG", "info").lower()
    if level not in ("error", "info", "debug"):
        raise ConfigError(f"STERLING_LOG must be error|info|debug, got {level!r}")
    logging.basicConfig(level=getattr(logging, level.upper()), stream=sys.stderr,
                        format="%(message)s", force=True)


def execute(args) -> int:
    if args.verb == "gradcheck":
        from .gradcheck import main as gradcheck_main

        return gradcheck_main()

    cfg = resolve_config(args)
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), flush=True)
    ds = load_dataset(cfg.data, seed=cfg.seed)
    out = Path(cfg.out)

    if args.verb == "train":
        run = run_training(cfg, ds, out, args.force)
        emit_embeddings(run.model, ds.graph, out)
        print(json.dumps(run.epoch_log[-1] if run.epoch_log else {}), flush=True)
        return 0
    if args.verb == "embed":
        run = trained_run(cfg, ds, out, args.force)
        paths = emit_embeddings(run.model, ds.graph, out)
        print(json.dumps({k: str(v) for k, v in paths.items()}), flush=True)
        return 0

    result_path = out / f"results_{args.verb}.json"
    _guard(result_path, args.force)
    run = trained_run(cfg, ds, out, args.force)
    metrics = EVALUATORS[args.verb](cfg, ds, run)
    result = {"dataset": ds.name, "split": ds.split, "metrics": metrics,
              "config_hash": cfg.config_hash(), "seed": cfg.seed}
    _write_json(result_path, result)
    print(json.dumps(result, sort_keys=True), flush=True)
    return 0


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_intermixed_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; the contract reserves 2 for runtime failures
        return 0 if exc.code == 0 else 1
    try:
        _configure_logging()
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return execute(args)
        return execute(args)
    except (ConfigError, UsageError, FileNotFoundError, GraphParseError, EmptyGraphError,
            CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, DegenerateDistributionError, FloatingPointError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
