"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 missing or unreadable
input artifact, 4 runtime failure during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import aggregators as ag
from . import encoder as enc
from . import experiments as ex
from . import metrics as mt
from . import pipeline as pl
from . import plotting
from .data import SynthConfig, gen_synthetic, load_dataset, realized_witness_rate, save_dataset
from .errors import (BatchError, ConfigError, DataError, FormatError, MilError, MissingArtifactError,
                     NumericError, StateError, UndefinedMetricError)

log = logging.getLogger("milab")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ------------------------------------------------------------ helpers

def _read_json(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def _git_describe():
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write_manifest(out_dir, command, config, seed, inputs, outputs, started, extra=None):
    man = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "git_describe": _git_describe(),
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    if extra:
        man.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(man, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_data(path):
    if path is None:
        raise UsageError("--data is required")
    if not os.path.exists(os.path.join(path, "features.milf")):
        raise MissingArtifactError(f"no dataset at {path} (expected features.milf and manifest.json)")
    try:
        return load_dataset(path)
    except (FormatError, OSError) as exc:
        raise MissingArtifactError(f"cannot read dataset {path}: {exc}") from None


def _load_encoder(path):
    if path is None or not os.path.exists(path):
        raise MissingArtifactError(f"encoder checkpoint {path} not found; run `train --mode pretrain` first")
    try:
        return enc.load_checkpoint(path)
    except FormatError as exc:
        raise MissingArtifactError(f"cannot read encoder checkpoint {path}: {exc}") from None


def _train_config(args):
    cfg = _read_json(args.config)
    return pl.TrainConfig.from_dict(cfg)


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


# ------------------------------------------------------------ commands

def cmd_synth(args):
    started = time.time()
    d = _read_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = SynthConfig.from_dict(d)
    ds = gen_synthetic(cfg)
    save_dataset(ds, args.out)
    for split in ("train", "val", "test"):
        wr = realized_witness_rate(ds, split)
        print(f"{split}\trealized_witness_rate\t{wr:.6f}")
    return EXIT_OK


def cmd_train(args):
    started = time.time()
    cfg = _train_config(args)
    mode = args.mode
    if mode == "ce" and args.iterative:
        mode = "ce-iter"
    ds = _load_data(args.data)
    seed = args.seed if args.seed is not None else 0
    os.makedirs(args.out, exist_ok=True)
    inputs = {"data": os.path.abspath(args.data)}
    outputs = []

    if mode == "pretrain":
        params, history = pl.run_cssl_pretrain(ds, cfg, seed)
        os.makedirs(os.path.join(args.out, "checkpoints"), exist_ok=True)
        enc.save_checkpoint(params, os.path.join(args.out, "checkpoints", "encoder.mile"))
        with open(os.path.join(args.out, "pretrain_loss.csv"), "w") as fh:
            fh.write("epoch,loss\n")
            for i, v in enumerate(history, 1):
                fh.write(f"{i},{v!r}\n")
        with open(os.path.join(args.out, "config.json"), "w") as fh:
            json.dump(cfg.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        outputs = ["checkpoints/encoder.mile", "pretrain_loss.csv", "config.json"]
        _write_manifest(args.out, "train --mode pretrain", cfg.to_dict(), seed, inputs, outputs, started)
        return EXIT_OK

    if mode == "gt" and not ds.has_instance_labels:
        raise MissingArtifactError("ground-truth finetuning needs instance labels, which this dataset lacks")
    pre_path = args.pretrained
    pre = _load_encoder(pre_path)
    inputs["pretrained"] = os.path.abspath(pre_path)
    pseudo_path = os.path.join(args.out, "pseudo_labels.csv")
    writes = []

    def on_update(rnd, state):
        pl.write_pseudo_labels(pseudo_path, state)
        writes.append(rnd)

    hook = on_update if mode in ("its2clr", "ce", "ce-iter", "gt") else None
    art = pl.run_mode(mode, ds, cfg, seed, pre, on_pseudo_update=hook)
    pl.write_run_dir(art, args.out)
    outputs = ["curves.csv", "report.csv", "config.json", "checkpoints/"] + (["pseudo_labels.csv"] if writes else [])
    _write_manifest(args.out, f"train --mode {mode}", cfg.to_dict(), seed, inputs, outputs, started,
                    {"mode": mode, "best_round": art.best_round, "pseudo_label_writes": writes,
                     "pretrained_sha256": pl.checkpoint_hash(enc.to_bytes(pre))})
    print(f"best_round\t{art.best_round}")
    for k in ("bag_auc_val", "bag_auc_test", "instance_auc_test"):
        if k in art.report:
            print(f"{k}\t{art.report[k]:.6f}")
    return EXIT_OK


def _encoder_from_run(run_dir):
    for name in ("encoder_best.mile", "encoder.mile"):
        path = os.path.join(run_dir, "checkpoints", name)
        if os.path.exists(path):
            return _load_encoder(path), path
    raise MissingArtifactError(f"run directory {run_dir} has no encoder checkpoint")


def eval_frozen(ds, params, kinds, n_retrains=5, agg_config=None, linear_eval=False, seed=0):
    """Retrain each aggregator ``n_retrains`` times on frozen features; long-format rows with mean and std."""
    agg_config = dict(agg_config or {})
    h = enc.embed(params, ds.features)
    splits = {s: ds.split_bags(s) for s in ("train", "val", "test")}
    lab = {s: np.array([b.label for b in bags]) for s, bags in splits.items()}
    bags = {s: [h[b.start:b.end] for b in bs] for s, bs in splits.items()}
    true = ds.instance_labels() if ds.has_instance_labels else None
    test_ids = ds.instance_index("test")
    rows = []
    for kind in kinds:
        cfg = ag.AggConfig.from_dict({**agg_config, "kind": kind})
        vals = {}
        for r in range(n_retrains):
            model = ag.train_aggregator(bags["train"], lab["train"], config=cfg, seed=seed * 1000 + r,
                                        val_bags=bags["val"] or None, val_labels=lab["val"] if bags["val"] else None)
            res = {"bag_auc_test": mt.roc_auc(lab["test"], ag.bag_scores(model, bags["test"]))}
            if true is not None and model.has_instance_classifier:
                s = np.concatenate([ag.instance_scores(model, b) for b in bags["test"]])
                res["instance_auc_test"] = mt.roc_auc(true[test_ids], s)
                res["instance_auprc_test"] = mt.aupr(true[test_ids], s)
            for k, v in res.items():
                vals.setdefault(k, []).append(v)
        rows += _summary_rows(kind, vals)
    if linear_eval:
        if true is None:
            raise MissingArtifactError("linear evaluation needs instance labels")
        tr = ds.instance_index("train")
        vals = {}
        for r in range(n_retrains):
            w, b = ag.fit_logistic(h[tr], true[tr], seed=seed * 1000 + r)
            s = 1.0 / (1.0 + np.exp(-((h[test_ids] @ w)[:, 0] + b[0])))
            vals.setdefault("instance_auc_test", []).append(mt.roc_auc(true[test_ids], s))
            vals.setdefault("instance_auprc_test", []).append(mt.aupr(true[test_ids], s))
            vals.setdefault("instance_max_f1_test", []).append(mt.max_f1(true[test_ids], s)[0])
        rows += _summary_rows("linear", vals)
    return rows


def _summary_rows(kind, vals):
    return [{"aggregator": kind, "metric": k, "mean": float(np.mean(v)), "std": float(np.std(v)), "n_runs": len(v)}
            for k, v in sorted(vals.items())]


def cmd_eval(args):
    started = time.time()
    kinds = [k.strip() for k in args.aggregators.split(",") if k.strip()]
    bad = [k for k in kinds if k not in ag.KINDS]
    if bad or not kinds:
        raise ConfigError(f"unknown aggregator kind(s) {bad}; choose from {ag.KINDS}")
    ds = _load_data(args.data)
    params, path = _encoder_from_run(args.run)
    agg_cfg = _train_config(args).aggregator
    rows = eval_frozen(ds, params, kinds, args.n_retrains, agg_cfg, args.linear_eval, args.seed or 0)
    out = args.out or args.run
    os.makedirs(out, exist_ok=True)
    name = "eval_report.csv"
    with open(os.path.join(out, name), "w") as fh:
        fh.write(pl.report_rows_csv(rows))
    for r in rows:
        print(f"{r['aggregator']}\t{r['metric']}\t{r['mean']:.6f}\t{r['std']:.6f}")
    if out != args.run:
        _write_manifest(out, "eval", {"aggregators": kinds, "n_retrains": args.n_retrains}, args.seed,
                        {"run": os.path.abspath(args.run), "encoder": path}, [name], started)
    return EXIT_OK


def cmd_plot(args):
    runs = []
    for d in args.runs:
        path = os.path.join(d, "curves.csv")
        if not os.path.exists(path):
            raise ConfigError(f"{d} has no curves.csv")
        runs.append((os.path.basename(os.path.normpath(d)), plotting.read_curves(path)))
    svg = args.out
    tsv = os.path.splitext(svg)[0] + ".tsv"
    os.makedirs(os.path.dirname(os.path.abspath(svg)), exist_ok=True)
    plotting.plot_curves(runs, svg, tsv, split=args.split)
    print(f"wrote\t{svg}")
    print(f"wrote\t{tsv}")
    return EXIT_OK


def cmd_sweep_wr(args):
    started = time.time()
    cfg = _train_config(args)
    rates = [float(v) for v in args.rates.split(",")]
    seeds = list(range(args.n_seeds)) if args.seeds is None else [int(s) for s in args.seeds.split(",")]
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for wr in rates:
        res = ex.multi_seed(seeds, synth=ex.reference_synth(wr), config=cfg, variants=("its2clr", "ce-iter"),
                            cache_dir=args.cache, workers=args.workers)
        for r in res:
            for v in ("its2clr", "ce-iter"):
                rows.append((wr, r["seed"], v, r[v]["report"]["bag_auc_test"]))
    with open(os.path.join(args.out, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("witness_rate", "seed", "mode", "bag_auc_test"))
        w.writerows(rows)
    print("witness_rate\tits2clr\tce_iter\tmargin")
    for wr in rates:
        a = np.mean([r[3] for r in rows if r[0] == wr and r[2] == "its2clr"])
        b = np.mean([r[3] for r in rows if r[0] == wr and r[2] == "ce-iter"])
        print(f"{wr}\t{a:.4f}\t{b:.4f}\t{a - b:+.4f}")
    _write_manifest(args.out, "sweep-wr", cfg.to_dict(), seeds, {}, ["sweep.csv"], started, {"witness_rates": rates})
    return EXIT_OK


# ------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="milab", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default $MILAB_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    s = sub.add_parser("synth", help="generate a synthetic MIL dataset")
    common(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="pretrain or finetune")
    common(s)
    s.add_argument("--mode", required=True, choices=pl.MODES)
    s.add_argument("--data", required=True)
    s.add_argument("--pretrained", help="encoder checkpoint from `train --mode pretrain`")
    s.add_argument("--iterative", type=_bool, default=False, help="refresh pseudo labels in mode ce (true/false)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="retrain aggregators on a frozen encoder")
    common(s, out_required=False)
    s.add_argument("--run", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--aggregators", default=",".join(ag.KINDS))
    s.add_argument("--n-retrains", type=int, default=5)
    s.add_argument("--linear-eval", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", help="learning curves to SVG and TSV")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train", choices=("train", "val", "test"))
    s.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("sweep-wr", help="ItS2CLR vs CE-iterative across witness rates")
    common(s)
    s.add_argument("--rates", default="0.05,0.45")
    s.add_argument("--seeds", default=None, help="comma-separated seeds")
    s.add_argument("--n-seeds", type=int, default=5)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--cache", default=None, help="directory for cached per-seed results")
    s.set_defaults(func=cmd_sweep_wr)
    return p


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("MILAB_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"MILAB_THREADS must be an integer, got {env!r}") from None
    return 1


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        n = _threads(args)
        if n < 1:
            raise ConfigError("--threads must be at least 1")
        with threadpool_limits(limits=n):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (BatchError, StateError, NumericError, DataError, UndefinedMetricError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except MilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
