"""Training pipelines: contrastive pretraining, the iterative pseudo-label loop with
self-paced supervised contrastive finetuning, and the baselines it is compared to.

Every pipeline returns a :class:`RunArtifacts`.  One learning-curve row is
produced per refresh round; round 0 happens before any finetuning and later
rounds follow every ``refresh_period`` finetuning epochs.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import aggregators as ag
from . import encoder as enc
from . import losses
from . import metrics as mt
from . import numcore as nc
from . import sampler as sp
from .data import augment
from .errors import ConfigError, DataError, StateError

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("round", "epoch", "split", "bag_auc", "inst_auc", "inst_max_f1", "pseudo_precision", "pseudo_recall")
REPORT_COLUMNS = ("aggregator", "metric", "mean", "std", "n_runs")

# RNG stream tags
_PRETRAIN, _FINETUNE, _AGG, _AUG, _INIT = 1, 2, 3, 4, 5


def _rng(seed, *tags):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(t) for t in tags]]))


@dataclass
class TrainConfig:
    eta: float = 0.3
    r0: float = 0.2
    rT: float = 0.8
    T: int = 50
    T_warmup: int | None = None  # None -> 10% of T
    p_plus: float = 0.2
    tau_pretrain: float = 0.5
    tau_finetune: float = 0.5
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.03
    pretrain_batch: int = 128
    finetune_lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    refresh_period: int = 5
    n_anchors: int = 128
    n_same: int = 8
    n_diff: int = 8
    steps_per_epoch: int | None = None  # None -> ceil(train instances / n_anchors)
    augment_strength: float = 0.1
    embed_dim: int = 32
    proj_dim: int = 16
    hidden: tuple = (64, 64)
    ce_batch: int = 128
    aggregator: dict = field(default_factory=lambda: {"kind": "ds_mil", "lr": 5e-3, "max_epochs": 40, "step_size": 20, "n_restarts": 3})
    iterative: bool = True

    def __post_init__(self):
        if not 0 < self.eta < 1:
            raise ConfigError(f"eta must lie in (0, 1), got {self.eta}")
        if self.refresh_period < 1:
            raise ConfigError("refresh_period must be at least 1")
        if self.T < self.refresh_period:
            raise ConfigError("finetune epochs T must be at least refresh_period")
        self.hidden = tuple(self.hidden)
        self.schedule()  # validates the self-paced fields
        self.agg_config()

    @property
    def warmup(self):
        return int(round(0.1 * self.T)) if self.T_warmup is None else int(self.T_warmup)

    def schedule(self):
        return sp.SpsSchedule(self.r0, self.rT, self.warmup, self.T, self.p_plus)

    def batch_spec(self):
        return sp.BatchSpec(self.n_anchors, self.n_same, self.n_diff)

    def agg_config(self):
        return ag.AggConfig.from_dict(self.aggregator)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return TrainConfig.from_dict(d)


@dataclass
class PseudoLabelState:
    scores: np.ndarray
    labels: np.ndarray
    auc_history: list = field(default_factory=list)
    last_accepted_round: int = -1
    accepted_rounds: list = field(default_factory=list)


@dataclass
class CurveRow:
    round: int
    epoch: int
    split: str
    bag_auc: float
    inst_auc: float
    inst_max_f1: float
    pseudo_precision: float
    pseudo_recall: float


@dataclass
class RunArtifacts:
    mode: str
    config: dict
    seed: int
    encoder_checkpoints: list  # bytes per round
    aggregator_checkpoints: list
    round_reports: list  # dict per round: split -> MetricsReport
    curves: list  # CurveRow, one per (round, split)
    best_round: int
    report: dict  # final metrics of the selected round
    pseudo: PseudoLabelState | None = None
    val_aucs: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def curve(self, split="train"):
        return [r for r in self.curves if r.split == split]


# ------------------------------------------------------------ small operations

def binarize(scores, eta, bag_labels=None):
    """1{score > eta}; instances of negative bags are forced to 0."""
    labels = (np.asarray(scores, dtype=np.float64) > eta).astype(np.int64)
    if bag_labels is not None:
        labels[np.asarray(bag_labels) == 0] = 0
    return labels


def update_gate(auc_history, auc_now):
    """True iff the new validation AUC is at least every earlier one."""
    return not auc_history or auc_now >= max(auc_history)


def model_select(checkpoints, val_bag_aucs):
    """Index of the best validation AUC; earliest on ties."""
    if len(checkpoints) == 0 or len(checkpoints) != len(val_bag_aucs):
        raise StateError("model selection needs equally long nonempty lists")
    aucs = np.asarray(val_bag_aucs, dtype=np.float64)
    return int(np.flatnonzero(aucs == np.max(aucs))[0])


def checkpoint_hash(blob):
    return hashlib.sha256(blob).hexdigest()


# ------------------------------------------------------------ dataset views

class _View:
    """Split-level index bookkeeping for a dataset."""

    def __init__(self, ds):
        self.ds = ds
        self.x = ds.features
        self.bag_label_of = ds.instance_bag_labels()
        self.true = ds.instance_labels() if ds.has_instance_labels else None
        self.splits = {}
        for split in ("train", "val", "test"):
            bags = ds.split_bags(split)
            self.splits[split] = bags
        self.train_ids = ds.instance_index("train")
        if not self.splits["train"]:
            raise DataError("dataset has no training bags")

    def bag_labels(self, split):
        return np.array([b.label for b in self.splits[split]], dtype=np.int64)

    def has_both(self, split):
        lab = self.bag_labels(split)
        return len(lab) and lab.min() == 0 and lab.max() == 1


def _embed_all(params, view):
    return enc.embed(params, view.x)


def _train_agg(view, h, cfg, seed, round_idx):
    tr = view.splits["train"]
    va = view.splits["val"]
    return ag.train_aggregator(
        [h[b.start:b.end] for b in tr], view.bag_labels("train"), config=cfg, seed=int(_rng(seed, _AGG, round_idx).integers(2**31)),
        val_bags=[h[b.start:b.end] for b in va] if va else None,
        val_labels=view.bag_labels("val") if va else None,
    )


def _instance_scores_all(model, h, view):
    """phi scores for every instance of the table (probe-free kinds only)."""
    out = np.zeros(len(h))
    for b in view.ds.bags:
        out[b.start:b.end] = ag.instance_scores(model, h[b.start:b.end])
    return out


def _evaluate_round(model, h, view, inst_scores):
    """Per-split bag AUC and instance metrics."""
    res = {}
    for split, bags in view.splits.items():
        rep = mt.MetricsReport()
        if bags and view.has_both(split):
            scores = ag.bag_scores(model, [h[b.start:b.end] for b in bags])
            rep.bag_auc = mt.roc_auc(view.bag_labels(split), scores)
        if bags and view.true is not None and inst_scores is not None:
            ids = np.concatenate([np.arange(b.start, b.end) for b in bags])
            y = view.true[ids]
            if y.min() == 0 and y.max() == 1:
                rep.instance_auc = mt.roc_auc(y, inst_scores[ids])
                rep.instance_auprc = mt.aupr(y, inst_scores[ids])
                rep.instance_max_f1 = mt.max_f1(y, inst_scores[ids])[0]
        res[split] = rep
    return res


def _class_stats_dict(h, y):
    """Collision statistics on direction-normalised features, raw-feature values alongside."""
    if len(y) == 0 or y.min() == y.max():
        return {}
    out = {}
    for suffix, feats in (("", _row_normalize(h)), ("_raw", h)):
        inter, dp, dn = mt.class_stats(feats, y)
        out["inter_class_distance" + suffix] = inter
        out["intra_class_deviation_pos" + suffix] = dp
        out["intra_class_deviation_neg" + suffix] = dn
    return out


def _row_normalize(h):
    n = np.linalg.norm(h, axis=1, keepdims=True)
    return h / np.maximum(n, 1e-12)


def representation_stats(ds, params, split="train"):
    """Inter-class distance and intra-class deviations of an encoder's features on one split.

    Features are scaled to unit length first: finetuning changes their overall
    scale, which would otherwise dominate the comparison between encoders.
    Raw-feature values are returned under ``*_raw`` keys.
    """
    if not ds.has_instance_labels:
        raise DataError("representation statistics need instance labels")
    ids = ds.instance_index(split)
    return _class_stats_dict(enc.embed(params, ds.features[ids]), ds.instance_labels()[ids])


def _logit(p, eps=1e-12):
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


def _final_report(view, h, model, inst_scores, round_reports, best):
    """Test-split metrics of the selected round plus representation statistics."""
    rep = round_reports[best]
    out = {
        "best_round": best,
        "bag_auc_train": rep["train"].bag_auc,
        "bag_auc_val": rep["val"].bag_auc,
        "bag_auc_test": rep["test"].bag_auc,
        "instance_auc_train": rep["train"].instance_auc,
        "instance_auc_test": rep["test"].instance_auc,
        "instance_auprc_test": rep["test"].instance_auprc,
        "instance_max_f1_test": rep["test"].instance_max_f1,
        "pseudo_precision": rep["train"].pseudo_label_precision,
        "pseudo_recall": rep["train"].pseudo_label_recall,
    }
    if view.true is not None:
        val_ids = view.ds.instance_index("val")
        test_ids = view.ds.instance_index("test")
        tr_ids = view.train_ids
        for name, ids in (("train", tr_ids), ("test", test_ids)):
            out.update({f"{k}_{name}": v for k, v in _class_stats_dict(h[ids], view.true[ids]).items()})
        if inst_scores is not None and len(val_ids) and view.true[val_ids].max() == 1 and len(test_ids):
            # calibrate on log-odds: with b >= 0.1 a probability-valued s keeps every p above 1/2
            logit = _logit(inst_scores)
            dice, cal, _ = mt.dice_calibrated(view.true[test_ids], logit[test_ids],
                                              view.true[val_ids], logit[val_ids])
            _, thr = mt.max_f1(view.true[val_ids], inst_scores[val_ids])
            out["dice_test"] = dice
            out["dice_a"], out["dice_b"] = cal.a, cal.b
            out["iou_test"] = mt.iou(view.true[test_ids], inst_scores[test_ids] >= thr)
    return out


# ------------------------------------------------------------ pretraining

def run_cssl_pretrain(ds, config=None, seed=0):
    """InfoNCE pretraining over training-split instances with in-batch negatives.

    Returns ``(EncoderParams, per-epoch mean losses)``.
    """
    config = config or TrainConfig()
    view = _View(ds)
    ids = view.train_ids
    if len(ids) < 2:
        raise DataError("pretraining needs at least two instances")
    params = enc.init_params((ds.m, config.embed_dim, config.proj_dim), config.hidden, seed=int(_rng(seed, _INIT).integers(2**31)))
    flat = params.flat()
    n_feat = len(params.feature_layers)
    state = enc.SgdState(config.pretrain_lr, config.momentum, config.weight_decay)
    rng = _rng(seed, _PRETRAIN)
    bs = min(config.pretrain_batch, len(ids))
    history = []
    for epoch in range(config.pretrain_epochs):
        state.learning_rate = enc.cosine_lr(epoch, config.pretrain_epochs, config.pretrain_lr)
        if state.learning_rate <= 0:
            break
        perm = rng.permutation(ids)
        total = 0.0
        n_steps = len(perm) // bs
        for s in range(n_steps):
            batch = view.x[perm[s * bs:(s + 1) * bs]]
            v = augment(np.concatenate([batch, batch]), config.augment_strength, rng)
            tape = nc.Tape()
            vars_ = tape.params(flat)
            q = enc.EncoderParams.from_flat(vars_, n_feat, params.dims)
            z = enc.forward_projection(params, enc.forward_features(params, v, q.feature_layers), q.projection_layers)
            loss = losses.info_nce_batch(nc.index(z, slice(0, bs)), nc.index(z, slice(bs, 2 * bs)), config.tau_pretrain)
            enc.sgd_step(flat, tape.backward(loss), state)
            total += float(loss.value)
        history.append(total / max(n_steps, 1))
    return params, history


# ------------------------------------------------------------ finetuning epochs

def _steps(config, view):
    return config.steps_per_epoch or math.ceil(len(view.train_ids) / config.n_anchors)


def _supcon_epoch(params, flat, state, view, pools, sched, t, config, rng, context):
    spec = config.batch_spec()
    n_feat = len(params.feature_layers)
    warm = t <= sched.T_warmup
    total, replaced = 0.0, 0
    for _ in range(_steps(config, view)):
        batch = sp.draw_batch(pools, sched, t, spec, rng, context)
        replaced += batch.replacement_draws
        members = np.concatenate([batch.same, batch.diff], axis=1)
        n, k = members.shape
        rows = np.concatenate([batch.anchors, members.reshape(-1)])
        xb = augment(view.x[rows], config.augment_strength, rng)
        tape = nc.Tape()
        q = enc.EncoderParams.from_flat(tape.params(flat), n_feat, params.dims)
        z = enc.forward_projection(params, enc.forward_features(params, xb, q.feature_layers), q.projection_layers)
        za = nc.index(z, slice(0, n))
        zm = nc.reshape(nc.index(z, slice(n, None)), (n, k, -1))
        loss = losses.sup_con_batch(za, zm, spec.n_same, config.tau_finetune)
        enc.sgd_step(flat, tape.backward(loss), state)
        total += float(loss.value)
    if replaced:
        log.debug("%s: %d draws fell back to sampling with replacement", context, replaced)
    return total, warm, replaced


def _ce_epoch(params, flat, head, state, view, labels, config, rng):
    """One pass of instance cross-entropy over the training instances."""
    n_feat = len(params.feature_layers)
    ids = rng.permutation(view.train_ids)
    bs = config.ce_batch
    total = 0.0
    for s in range(0, len(ids), bs):
        idx = ids[s:s + bs]
        xb = augment(view.x[idx], config.augment_strength, rng)
        tape = nc.Tape()
        vars_ = tape.params(flat + head)
        q = enc.EncoderParams.from_flat(vars_[:len(flat)], n_feat, params.dims)
        hb = enc.forward_features(params, xb, q.feature_layers)
        logit = nc.reshape(nc.add(nc.matmul(hb, vars_[len(flat)]), vars_[len(flat) + 1]), (len(idx),))
        loss = nc.mean(nc.bce_logits(logit, labels[idx]))
        enc.sgd_step(flat + head, tape.backward(loss), state)
        total += float(loss.value)
    return total


# ------------------------------------------------------------ the iterative loop

def _selected_ids(pools, t, sched):
    if t <= sched.T_warmup:
        return np.concatenate([pools.neg_bag_ids, pools.pos_pseudo_ids])
    return np.concatenate([pools.neg_bag_ids, pools.pos_confident_ids, pools.neg_confident_ids])


def _iterative(ds, config, seed, pretrained, mode, on_pseudo_update=None):
    """Shared driver for its2clr / ablations / ce / ce-iter / gt."""
    view = _View(ds)
    if mode == "gt" and view.true is None:
        raise DataError("ground-truth finetuning needs instance labels")
    params = pretrained.copy()
    flat = params.flat()
    sched = config.schedule()
    agg_cfg = config.agg_config()
    state = enc.SgdState(config.finetune_lr, config.momentum, config.weight_decay)
    rng = _rng(seed, _FINETUNE)
    train_mask = np.zeros(ds.n_instances, dtype=bool)
    train_mask[view.train_ids] = True
    head = [np.zeros((config.embed_dim, 1)), np.zeros(1)]
    use_gate = mode != "gt"
    iterative = config.iterative and mode != "gt"

    n_rounds = config.T // config.refresh_period
    pseudo = None
    enc_ckpts, agg_ckpts, round_reports, curves, val_aucs = [], [], [], [], []
    for rnd in range(n_rounds + 1):
        epoch = rnd * config.refresh_period
        h = _embed_all(params, view)
        model = _train_agg(view, h, agg_cfg, seed, rnd)
        inst_scores = _instance_scores_all(model, h, view) if model.has_instance_classifier else None
        reports = _evaluate_round(model, h, view, inst_scores)
        auc_val = reports["val"].bag_auc if not math.isnan(reports["val"].bag_auc) else reports["train"].bag_auc
        val_aucs.append(auc_val)

        if mode == "gt":
            if pseudo is None:
                pseudo = PseudoLabelState(view.true.astype(np.float64), view.true.copy(), [], 0, [0])
                if on_pseudo_update:
                    on_pseudo_update(rnd, pseudo)
            pseudo.auc_history.append(auc_val)
        else:
            if inst_scores is None:
                raise StateError(f"aggregator kind {model.kind!r} has no instance classifier for pseudo labels")
            accept = pseudo is None or (iterative and use_gate and update_gate(pseudo.auc_history, auc_val))
            if accept:
                labels = binarize(inst_scores, config.eta, view.bag_label_of)
                labels[~train_mask] = 0
                if pseudo is None:
                    pseudo = PseudoLabelState(inst_scores.copy(), labels)
                else:
                    pseudo.scores, pseudo.labels = inst_scores.copy(), labels
                pseudo.last_accepted_round = rnd
                pseudo.accepted_rounds.append(rnd)
                if on_pseudo_update:
                    on_pseudo_update(rnd, pseudo)
            pseudo.auc_history.append(auc_val)

        # pools for this round's first finetuning epoch (also used for pseudo-label quality)
        t_next = min(epoch + 1, config.T)
        pools = sp.partition_instances(view.train_ids, view.bag_label_of[view.train_ids], pseudo.labels[view.train_ids])
        r_now = 1.0 if (mode == "gt" or t_next <= sched.T_warmup) else sp.rate_schedule(t_next, sched)
        sp.select_confident(pools, pseudo.scores, r_now)
        if view.true is not None:
            sel = _selected_ids(pools, t_next, sched)
            prec, rec = mt.pseudo_quality(view.true, pseudo.labels, sel)
            reports["train"].pseudo_label_precision = prec
            reports["train"].pseudo_label_recall = rec

        enc_ckpts.append(enc.to_bytes(params))
        agg_ckpts.append(ag.to_bytes(model))
        round_reports.append(reports)
        for split in ("train", "val", "test"):
            r = reports[split]
            curves.append(CurveRow(rnd, epoch, split, r.bag_auc, r.instance_auc, r.instance_max_f1,
                                   r.pseudo_label_precision if split == "train" else float("nan"),
                                   r.pseudo_label_recall if split == "train" else float("nan")))
        log.info("%s seed %d round %d: val bag AUC %.4f, train inst AUC %.4f", mode, seed, rnd, auc_val, reports["train"].instance_auc)
        if rnd == n_rounds:
            break

        for t in range(epoch + 1, epoch + config.refresh_period + 1):
            ctx = f"round {rnd}"
            if mode in ("ce", "ce-iter"):
                _ce_epoch(params, flat, head, state, view, pseudo.labels, config, rng)
                continue
            if t > sched.T_warmup and mode != "gt":
                sp.select_confident(pools, pseudo.scores, sp.rate_schedule(t, sched))
            elif mode == "gt":
                sp.select_confident(pools, pseudo.scores, 1.0)
            _supcon_epoch(params, flat, state, view, pools, sched, t, config, rng, ctx)

    best = model_select(enc_ckpts, val_aucs)
    best_params = enc.from_bytes(enc_ckpts[best])
    best_model = ag.from_bytes(agg_ckpts[best])
    h = _embed_all(best_params, view)
    inst = _instance_scores_all(best_model, h, view) if best_model.has_instance_classifier else None
    report = _final_report(view, h, best_model, inst, round_reports, best)
    return RunArtifacts(mode, config.to_dict(), seed, enc_ckpts, agg_ckpts, round_reports, curves, best, report,
                        pseudo, val_aucs)


def run_its2clr(ds, config, seed, pretrained, on_pseudo_update=None):
    """Iterative self-paced supervised contrastive finetuning with a validation-gated pseudo-label refresh."""
    return _iterative(ds, config, seed, pretrained, "its2clr", on_pseudo_update)


def run_ce_finetune(ds, config, iterative, seed, pretrained, on_pseudo_update=None):
    """Instance cross-entropy finetuning on pseudo labels, fixed or refreshed through the gate."""
    config = config.replace(iterative=bool(iterative))
    return _iterative(ds, config, seed, pretrained, "ce-iter" if iterative else "ce", on_pseudo_update)


def run_groundtruth_finetune(ds, config, seed, pretrained, on_pseudo_update=None):
    """Supervised contrastive finetuning with pools built from true instance labels (r = 1, no gate)."""
    return _iterative(ds, config, seed, pretrained, "gt", on_pseudo_update)


def run_end2end(ds, config, seed, pretrained):
    """Encoder and aggregator trained jointly on bag-level cross-entropy, one bag per step."""
    view = _View(ds)
    agg_cfg = config.agg_config()
    params = pretrained.copy()
    flat = params.flat()
    n_feat = len(params.feature_layers)
    rng = _rng(seed, _FINETUNE)
    model = ag.init_model(agg_cfg.kind, config.embed_dim, agg_cfg, seed=int(_rng(seed, _AGG, 0).integers(2**31)))
    names = list(model.params)
    agg_params = [model.params[n] for n in names]
    adam = ag.Adam(agg_params, agg_cfg.lr, agg_cfg.betas, agg_cfg.eps, agg_cfg.weight_decay)
    state = enc.SgdState(config.finetune_lr, config.momentum, config.weight_decay)
    tr = view.splits["train"]
    labels = view.bag_labels("train")

    enc_ckpts, agg_ckpts, round_reports, curves, val_aucs = [], [], [], [], []
    n_rounds = config.T // config.refresh_period
    for rnd in range(n_rounds + 1):
        epoch = rnd * config.refresh_period
        h = _embed_all(params, view)
        inst = _instance_scores_all(model, h, view) if model.has_instance_classifier else None
        reports = _evaluate_round(model, h, view, inst)
        auc_val = reports["val"].bag_auc if not math.isnan(reports["val"].bag_auc) else reports["train"].bag_auc
        val_aucs.append(auc_val)
        enc_ckpts.append(enc.to_bytes(params))
        agg_ckpts.append(ag.to_bytes(model))
        round_reports.append(reports)
        for split in ("train", "val", "test"):
            r = reports[split]
            curves.append(CurveRow(rnd, epoch, split, r.bag_auc, r.instance_auc, r.instance_max_f1, float("nan"), float("nan")))
        if rnd == n_rounds:
            break
        for t in range(epoch + 1, epoch + config.refresh_period + 1):
            adam.lr = agg_cfg.lr * agg_cfg.gamma ** ((t - 1) // agg_cfg.step_size)
            for i in rng.permutation(len(tr)):
                b = tr[i]
                xb = augment(view.x[b.start:b.end], config.augment_strength, rng)
                tape = nc.Tape()
                vars_ = tape.params(flat + agg_params)
                q = enc.EncoderParams.from_flat(vars_[:len(flat)], n_feat, params.dims)
                hb = enc.forward_features(params, xb, q.feature_layers)
                order = ag._canonical_order(nc.value_of(hb))
                P = dict(zip(names, vars_[len(flat):]))
                _, _, _, loss = ag._forward(model, P, nc.index(hb, order), y=float(labels[i]))
                grads = tape.backward(loss)
                enc.sgd_step(flat, grads[:len(flat)], state)
                adam.step(agg_params, grads[len(flat):])

    best = model_select(enc_ckpts, val_aucs)
    best_params = enc.from_bytes(enc_ckpts[best])
    best_model = ag.from_bytes(agg_ckpts[best])
    h = _embed_all(best_params, view)
    inst = _instance_scores_all(best_model, h, view) if best_model.has_instance_classifier else None
    report = _final_report(view, h, best_model, inst, round_reports, best)
    return RunArtifacts("e2e", config.to_dict(), seed, enc_ckpts, agg_ckpts, round_reports, curves, best, report,
                        None, val_aucs)


def run_aggregator_only(ds, config, seed, pretrained):
    """Frozen encoder; a single aggregator fit (the SimCLR + aggregator baseline)."""
    cfg = config.replace(T=config.refresh_period, refresh_period=config.refresh_period)
    view = _View(ds)
    h = _embed_all(pretrained, view)
    model = _train_agg(view, h, cfg.agg_config(), seed, 0)
    inst = _instance_scores_all(model, h, view) if model.has_instance_classifier else None
    reports = _evaluate_round(model, h, view, inst)
    curves = [CurveRow(0, 0, s, r.bag_auc, r.instance_auc, r.instance_max_f1, float("nan"), float("nan"))
              for s, r in reports.items()]
    report = _final_report(view, h, model, inst, [reports], 0)
    return RunArtifacts("agg-only", config.to_dict(), seed, [enc.to_bytes(pretrained)], [ag.to_bytes(model)],
                        [reports], curves, 0, report, None, [reports["val"].bag_auc])


MODES = ("pretrain", "its2clr", "ce", "ce-iter", "gt", "e2e", "agg-only")


def run_mode(mode, ds, config, seed, pretrained, on_pseudo_update=None):
    if mode == "its2clr":
        return run_its2clr(ds, config, seed, pretrained, on_pseudo_update)
    if mode in ("ce", "ce-iter"):
        return run_ce_finetune(ds, config, mode == "ce-iter", seed, pretrained, on_pseudo_update)
    if mode == "gt":
        return run_groundtruth_finetune(ds, config, seed, pretrained, on_pseudo_update)
    if mode == "e2e":
        return run_end2end(ds, config, seed, pretrained)
    if mode == "agg-only":
        return run_aggregator_only(ds, config, seed, pretrained)
    raise ConfigError(f"unknown mode {mode!r}")


# ------------------------------------------------------------ run directory

def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(round(v, 12))
    return str(v)


def curves_csv(curves):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for r in curves:
        w.writerow([_fmt(getattr(r, c)) for c in CURVE_COLUMNS])
    return buf.getvalue()


def report_rows_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def report_rows(artifacts, kind):
    return [{"aggregator": kind, "metric": k, "mean": float(v), "std": 0.0, "n_runs": 1}
            for k, v in sorted(artifacts.report.items())]


def write_run_dir(artifacts, out_dir):
    """Checkpoints, curves.csv, report.csv and config.json (manifest is written by the caller)."""
    ck = os.path.join(out_dir, "checkpoints")
    os.makedirs(ck, exist_ok=True)
    for r, blob in enumerate(artifacts.encoder_checkpoints):
        with open(os.path.join(ck, f"encoder_round{r:02d}.mile"), "wb") as fh:
            fh.write(blob)
    for r, blob in enumerate(artifacts.aggregator_checkpoints):
        with open(os.path.join(ck, f"aggregator_round{r:02d}.mila"), "wb") as fh:
            fh.write(blob)
    with open(os.path.join(ck, "encoder_best.mile"), "wb") as fh:
        fh.write(artifacts.encoder_checkpoints[artifacts.best_round])
    with open(os.path.join(ck, "aggregator_best.mila"), "wb") as fh:
        fh.write(artifacts.aggregator_checkpoints[artifacts.best_round])
    with open(os.path.join(out_dir, "curves.csv"), "w") as fh:
        fh.write(curves_csv(artifacts.curves))
    kind = artifacts.config.get("aggregator", {}).get("kind", "ds_mil")
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write(report_rows_csv(report_rows(artifacts, kind)))
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(artifacts.config, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_pseudo_labels(path, state):
    with open(path, "w") as fh:
        fh.write("instance,score,label\n")
        for i, (s, l) in enumerate(zip(state.scores, state.labels)):
            fh.write(f"{i},{s!r},{int(l)}\n")
