"""Multi-seed studies on the reference synthetic data.

One :func:`seed_study` call pretrains an encoder and runs every finetuning
variant from it, returning a flat JSON-able summary.  Results can be cached on
disk keyed by the configuration and source hashes, so repeated callers share the work.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import encoder as enc
from . import pipeline as pl
from .data import SynthConfig, gen_synthetic

log = logging.getLogger(__name__)

VARIANTS = ("its2clr", "no_spl", "no_iter", "ce", "ce-iter", "gt", "e2e", "agg-only")


def reference_synth(witness_rate=None, seed=0):
    cfg = SynthConfig(seed=seed)
    if witness_rate is not None:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), "witness_rate": float(witness_rate)})
    return cfg


def variant_config(config, variant):
    """The ablations: fixed r = 1 (no self-paced schedule) and no pseudo-label refresh."""
    if variant == "no_spl":
        return config.replace(r0=1.0, rT=1.0)
    if variant == "no_iter":
        return config.replace(iterative=False)
    return config


def run_variant(ds, config, variant, seed, pretrained):
    cfg = variant_config(config, variant)
    mode = "its2clr" if variant in ("no_spl", "no_iter") else variant
    return pl.run_mode(mode, ds, cfg, seed, pretrained)


def final_accepted_auc(artifacts):
    """(round-0, last-accepted-round) train-split instance AUC."""
    curve = artifacts.curve("train")
    last = artifacts.pseudo.last_accepted_round if artifacts.pseudo else len(curve) - 1
    return curve[0].inst_auc, curve[last].inst_auc


def seed_study(seed, synth=None, config=None, variants=("its2clr",)):
    """Pretrain once and run each variant; returns a flat summary dict."""
    synth = synth or reference_synth()
    config = config or pl.TrainConfig()
    ds = gen_synthetic(synth)
    pre, _ = pl.run_cssl_pretrain(ds, config, seed)
    out = {"seed": seed, "witness_rate": synth.witness_rate, "pretrain": pl.representation_stats(ds, pre)}
    base = pl.run_aggregator_only(ds, config, seed, pre)
    out["cssl_bag_auc_test"] = base.report["bag_auc_test"]
    for v in variants:
        art = run_variant(ds, config, v, seed, pre)
        rec = {"report": art.report, "val_aucs": art.val_aucs, "best_round": art.best_round}
        if art.pseudo is not None:
            r0, rl = final_accepted_auc(art)
            rec.update(round0_inst_auc=r0, accepted_inst_auc=rl,
                       last_accepted_round=art.pseudo.last_accepted_round)
        final = enc.from_bytes(art.encoder_checkpoints[-1])
        rec["final_stats"] = pl.representation_stats(ds, final)
        rec["curves"] = [[r.round, r.split, r.bag_auc, r.inst_auc] for r in art.curves]
        out[v] = rec
        log.info("seed %d wr %.2f %s: test bag AUC %.4f", seed, synth.witness_rate, v, art.report["bag_auc_test"])
    return _jsonable(out)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def source_hash():
    """Digest of the package sources, so cached studies expire when the code changes."""
    h = hashlib.sha256()
    here = os.path.dirname(os.path.abspath(__file__))
    for name in sorted(os.listdir(here)):
        if name.endswith(".py"):
            with open(os.path.join(here, name), "rb") as fh:
                h.update(name.encode() + fh.read())
    return h.hexdigest()[:16]


def study_key(seed, synth, config, variants):
    blob = json.dumps({"seed": seed, "synth": synth.to_dict(), "train": config.to_dict(), "variants": list(variants),
                       "source": source_hash()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _cached(args):
    seed, synth, config, variants, cache_dir = args
    path = None
    if cache_dir:
        path = os.path.join(cache_dir, f"study_{study_key(seed, synth, config, variants)}.json")
        if os.path.exists(path):
            with open(path) as fh:
                return json.load(fh)
    res = seed_study(seed, synth, config, variants)
    if path:
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(res, fh, sort_keys=True)
        os.replace(tmp, path)
    return res


def multi_seed(seeds, synth=None, config=None, variants=("its2clr",), cache_dir=None, workers=1):
    """seed_study over several seeds, optionally in parallel processes and cached on disk."""
    synth = synth or reference_synth()
    config = config or pl.TrainConfig()
    jobs = [(s, synth, config, tuple(variants), cache_dir) for s in seeds]
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_cached, jobs))
    return [_cached(j) for j in jobs]
