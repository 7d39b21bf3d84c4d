"""Command-line entry point: ``cfisac {gen-data,train,ceilings,evaluate,benchmark}``.

Exit codes: 0 success, 2 usage, 3 data/config mismatch, 4 numeric failure.
Outputs go to ``--out``; when omitted, a directory named after the command
under ``$CFISAC_OUTPUT_ROOT`` (default ``./runs``).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import baselines, metrics, persistence, training
from .errors import ConfigError, DataMismatchError, NumericError
from .model import predict_beams
from .persistence import RunConfig
from .scenario import generate_dataset

log = logging.getLogger("cfisac")

EXIT_OK, EXIT_USAGE, EXIT_MISMATCH, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "CFISAC_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _out_dir(args, command: str) -> Path:
    out = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_overrides(args) -> dict:
    keys = {"epochs": "max_epochs", "batch_size": "batch_size", "lr": "initial_lr",
            "patience": "patience", "init_seed": "init_seed", "shuffle_seed": "shuffle_seed",
            "lambda0": "lambda0", "epsilon": "epsilon", "dtype": "dtype"}
    return {field: getattr(args, k) for k, field in keys.items() if getattr(args, k, None) is not None}


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.size < 1:
        raise UsageError("--size must be >= 1")
    cfg = persistence.load_config(args.config)
    started = _now()
    ds = generate_dataset(cfg.system, args.size, args.train_fraction, args.seed)
    out = _out_dir(args, "gen-data")
    path = out / "dataset.json"
    persistence.save_dataset(ds, path)
    persistence.write_manifest(
        out, "gen-data", vars_clean(args), config=cfg, seeds={"data": args.seed},
        artifacts={"dataset": path.name}, started=started, finished=_now())
    print(f"wrote {path}: {len(ds)} scenes, {ds.split} train / {len(ds) - ds.split} validation")
    return EXIT_OK


def _load_data_and_config(args):
    cfg = persistence.load_config(args.config)
    ds = persistence.load_dataset(args.dataset)
    if args.config is not None and cfg.system != ds.config:
        raise DataMismatchError("config file system section differs from the dataset header")
    return cfg, ds


def cmd_train(args) -> int:
    if args.from_manifest:
        return _rerun_from_manifest(args)
    cfg, ds = _load_data_and_config(args)
    system = ds.config
    train_cfg = dataclasses.replace(cfg.train, **_train_overrides(args))
    arch = persistence.resolve_arch(args.arch) if args.arch else cfg.arch
    if arch is None:
        raise UsageError("no architecture: pass --arch or set 'arch' in the config file")
    run_cfg = RunConfig(system, train_cfg, arch)
    ceilings = None
    if args.role == "student":
        ceilings = _student_ceilings(args, ds)
    started = _now()
    if args.role == "student":
        model, record = training.train_student(ds, arch, system, ceilings, train_cfg)
    else:
        beta = 0 if args.role == "ssnr-teacher" else 1
        model, record = training.train_teacher(ds, arch, system, beta, train_cfg)
    out = _out_dir(args, f"train-{args.role}")
    best = record.rows[record.best_epoch - 1]
    meta = {"role": args.role, "epoch": best.epoch, "lambda": best.lam,
            "val_g1": best.val_g1, "val_g2": best.val_g2, "stopped_early": record.stopped_early}
    if ceilings is not None:
        meta["ceilings"] = {"g1_max": ceilings.g1_max, "g2_max": ceilings.g2_max}
    persistence.save_checkpoint(model, out / "checkpoint.pt", meta)
    (out / "curves.csv").write_text(record.to_csv())
    if record.lambda_steps:
        (out / "lambda_steps.csv").write_text("step,lambda\n" + "".join(
            f"{i + 1},{v!r}\n" for i, v in enumerate(record.lambda_steps)))
    inputs = {"dataset": str(args.dataset), "dataset_sha256": persistence.file_sha256(args.dataset)}
    for k in ("ssnr_teacher", "sinr_teacher", "ceilings"):
        if getattr(args, k, None):
            inputs[k] = str(getattr(args, k))
    persistence.write_manifest(
        out, "train", vars_clean(args), config=run_cfg,
        seeds={"data": ds.seed, "init": train_cfg.init_seed, "shuffle": train_cfg.shuffle_seed},
        ceilings=ceilings, inputs=inputs,
        artifacts={"checkpoint": "checkpoint.pt", "curves": "curves.csv"},
        started=started, finished=_now())
    print(f"{args.role}: {len(record)} epochs, best epoch {best.epoch} "
          f"(val g1 {best.val_g1:.4f}, val g2 {best.val_g2:.4f}) -> {out}")
    return EXIT_OK


def _student_ceilings(args, ds):
    if args.ceilings:
        return persistence.load_ceilings(args.ceilings)
    missing = [flag for flag, v in (("--ssnr-teacher", args.ssnr_teacher),
                                    ("--sinr-teacher", args.sinr_teacher)) if not v]
    if missing:
        raise UsageError(f"role 'student' needs teacher checkpoints; missing {' and '.join(missing)} "
                         "(or pass --ceilings)")
    t1, _ = persistence.load_checkpoint(args.ssnr_teacher, ds.config)
    t2, _ = persistence.load_checkpoint(args.sinr_teacher, ds.config)
    return training.estimate_ceilings(t1, t2, ds)


def _rerun_from_manifest(args) -> int:
    man = persistence.read_manifest(args.from_manifest)
    if man.get("command") != "train":
        raise UsageError(f"{args.from_manifest} is not a train manifest")
    saved = man["args"]
    cfg_path = Path(_out_dir(args, "rerun")) / "config.json"
    cfg_path.write_text(persistence.dump_config(RunConfig.from_dict(man["config"])))
    ns = argparse.Namespace(**{**saved, "config": str(cfg_path), "out": args.out,
                               "from_manifest": None, "arch": None})
    for k in ("epochs", "batch_size", "lr", "patience", "init_seed", "shuffle_seed",
              "lambda0", "epsilon", "dtype"):
        setattr(ns, k, None)
    return cmd_train(ns)


def cmd_ceilings(args) -> int:
    ds = persistence.load_dataset(args.dataset)
    t1, _ = persistence.load_checkpoint(args.ssnr_teacher, ds.config)
    t2, _ = persistence.load_checkpoint(args.sinr_teacher, ds.config)
    c = training.estimate_ceilings(t1, t2, ds)
    out = _out_dir(args, "ceilings")
    persistence.save_ceilings(c, out / "ceilings.json")
    persistence.write_manifest(out, "ceilings", vars_clean(args), ceilings=c,
                               artifacts={"ceilings": "ceilings.json"}, finished=_now())
    print(f"g1_max {c.g1_max:.6f}  g2_max {c.g2_max:.6f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ds = persistence.load_dataset(args.dataset)
    model, meta = persistence.load_checkpoint(args.checkpoint, ds.config)
    idx = {"train": ds.train_indices, "val": ds.val_indices,
           "all": np.arange(len(ds))}[args.split]
    if idx.size == 0:
        raise UsageError(f"split '{args.split}' is empty")
    H, A = ds.channel_arrays(idx)
    W = predict_beams(model, H, A)
    system = ds.config
    reports = [(int(i), metrics.evaluate(ds.scene(int(i)), W[k], system)) for k, i in enumerate(idx)]
    out = _out_dir(args, "evaluate")
    with open(out / "metrics.csv", "w") as fh:
        metrics.write_metric_csv(fh, reports, system.num_ues)
    g1 = np.array([r.ssnr for _, r in reports])
    g2 = np.array([r.min_sinr for _, r in reports])
    bound = baselines.ssnr_upper_bound(system)
    summary = {"split": args.split, "n": int(idx.size), "mean_g1": float(g1.mean()),
               "mean_g2": float(g2.mean()), "ssnr_upper_bound": bound,
               "g1_fraction_of_bound": float(g1.mean() / bound)}
    print(f"{args.split}: mean g1 {g1.mean():.4f} ({100 * g1.mean() / bound:.1f}% of bound {bound:.4f}), "
          f"mean g2 {g2.mean():.4f}")
    if args.curves:
        rec = training.TrainingRecord.from_csv(Path(args.curves).read_text())
        chosen = training.select_model(rec, args.threshold)
        summary["selected_epoch"] = chosen
        print(f"selected epoch {chosen} at threshold {args.threshold}")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    persistence.write_manifest(out, "evaluate", vars_clean(args),
                               artifacts={"metrics": "metrics.csv", "summary": "summary.json"},
                               finished=_now())
    return EXIT_OK


def cmd_benchmark(args) -> int:
    ds = persistence.load_dataset(args.dataset)
    model, _ = persistence.load_checkpoint(args.checkpoint, ds.config)
    report = baselines.benchmark_compare(ds, model, ds.config, args.n_points, seed=args.seed,
                                         rho=args.rho, single_thread=args.single_thread)
    out = _out_dir(args, "benchmark")
    (out / "comparison.csv").write_text(report.to_csv())
    (out / "summary.json").write_text(json.dumps(report.summary, indent=2) + "\n")
    persistence.write_manifest(out, "benchmark", vars_clean(args), seeds={"points": args.seed},
                               artifacts={"comparison": "comparison.csv", "summary": "summary.json"},
                               finished=_now())
    s = report.summary
    print(f"student  g1 {s['student_mean_g1']:.4f} g2 {s['student_mean_g2']:.4f} "
          f"{s['student_mean_seconds'] * 1e3:.2f} ms/scene")
    print(f"{baselines.BASELINE_LABEL} g1 {s['baseline_mean_g1']:.4f} g2 {s['baseline_mean_g2']:.4f} "
          f"{s['baseline_mean_seconds'] * 1e3:.2f} ms/scene  (speedup x{s['speedup']:.0f})")
    return EXIT_OK


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "log_level")}


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfisac", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap torch worker threads")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a seeded scene dataset")
    g.add_argument("--config")
    g.add_argument("--size", type=int, default=20000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-fraction", type=float, default=0.97)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a teacher or the student")
    t.add_argument("--dataset")
    t.add_argument("--role", choices=training.ROLES)
    t.add_argument("--arch", choices=sorted(persistence.PRESETS))
    t.add_argument("--config")
    t.add_argument("--ssnr-teacher")
    t.add_argument("--sinr-teacher")
    t.add_argument("--ceilings")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--init-seed", type=int)
    t.add_argument("--shuffle-seed", type=int)
    t.add_argument("--lambda0", type=float)
    t.add_argument("--epsilon", type=float)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--from-manifest", help="re-run a previous train command from its manifest")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("ceilings", help="compute teacher ceilings on the training split")
    c.add_argument("--dataset", required=True)
    c.add_argument("--ssnr-teacher", required=True)
    c.add_argument("--sinr-teacher", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_ceilings)

    e = sub.add_parser("evaluate", help="per-scene metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=("train", "val", "all"), default="val")
    e.add_argument("--curves", help="curves CSV to run model selection on")
    e.add_argument("--threshold", type=float, default=0.94)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("benchmark", help="student vs surrogate-CVX quality and run time")
    b.add_argument("--dataset", required=True)
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--n-points", type=int, default=200)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--rho", type=float, default=0.5)
    b.add_argument("--single-thread", action=argparse.BooleanOptionalAction, default=True)
    b.add_argument("--out")
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    if args.command == "train" and not args.from_manifest:
        missing = [f"--{k}" for k in ("dataset", "role") if getattr(args, k) is None]
        if missing:
            parser.error(f"train requires {', '.join(missing)}")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"cfisac: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataMismatchError as exc:
        print(f"cfisac: mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except NumericError as exc:
        print(f"cfisac: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
