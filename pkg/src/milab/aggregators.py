"""MIL aggregators (max, top-k, attention, dual-stream, transformer), their trainer
and the MILA1 checkpoint format.

All forwards work on a canonical ordering of the bag (rows sorted
lexicographically), which makes every bag score exactly invariant to the
order in which instances are supplied.  Instance-level outputs are mapped
back to the caller's order.

Checkpoint layout (little-endian)::

    magic   6 bytes  b"MILA1\\0"
    kind    u8 length + ASCII tag
    config  u32 length + UTF-8 JSON of the scalar settings
    blocks  u32 count, then per block: u16 name length, name,
            u32 ndim, ndim x u32 dims, f64 data in row-major order
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import CapabilityError, ConfigError, DataError, FormatError, ShapeError
from .metrics import roc_auc

KINDS = ("max", "topk", "attention", "ds_mil", "transformer")
TOPK_GRID = (0.001, 0.01, 0.03, 0.1, 0.2)
MAGIC = b"MILA1\0"


@dataclass
class AggregatorModel:
    kind: str
    params: dict
    topk_ratio: float = 0.1
    stream_weight: float = 1.0
    attention_mode: str = "embedding"
    n_heads: int = 4
    aux_phi: dict | None = None

    @property
    def has_instance_classifier(self):
        if self.kind == "attention":
            return self.attention_mode == "instance"
        return self.kind in ("max", "topk", "ds_mil")

    def copy(self):
        aux = None if self.aux_phi is None else {k: v.copy() for k, v in self.aux_phi.items()}
        return AggregatorModel(self.kind, {k: v.copy() for k, v in self.params.items()}, self.topk_ratio,
                               self.stream_weight, self.attention_mode, self.n_heads, aux)


@dataclass
class BagPrediction:
    bag_score: float
    instance_scores: np.ndarray | None = None
    attention_weights: np.ndarray | None = None


@dataclass
class AggConfig:
    kind: str = "ds_mil"
    lr: float = 2e-4
    step_size: int = 75
    gamma: float = 0.5
    max_epochs: int = 350
    eval_every: int = 1
    patience: int | None = None
    weight_decay: float = 0.0
    topk_ratio: float = 0.1
    stream_weight: float = 1.0
    attention_mode: str = "embedding"
    hidden: int | None = None  # attention width l; None means l = d
    n_heads: int = 4
    n_layers: int = 2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    n_restarts: int = 1  # independent inits; the best by validation wins

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown aggregator kind {self.kind!r}; choose from {KINDS}")
        if self.attention_mode not in ("embedding", "instance"):
            raise ConfigError(f"attention_mode must be 'embedding' or 'instance'")
        if not 0 < self.topk_ratio <= 1:
            raise ConfigError("topk_ratio must lie in (0, 1]")
        if self.max_epochs < 1 or self.lr <= 0:
            raise ConfigError("need max_epochs >= 1 and lr > 0")
        if self.n_restarts < 1:
            raise ConfigError("n_restarts must be >= 1")
        self.betas = tuple(self.betas)

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown aggregator config keys: {sorted(extra)}")
        return cls(**d)


# ------------------------------------------------------------ construction

def _glorot(rng, fan_in, fan_out):
    return rng.normal(0.0, math.sqrt(1.0 / fan_in), size=(fan_in, fan_out))


def init_model(kind, d, cfg=None, seed=0):
    cfg = cfg or AggConfig(kind=kind)
    if kind not in KINDS:
        raise ConfigError(f"unknown aggregator kind {kind!r}")
    rng = np.random.default_rng(seed)
    l = cfg.hidden or d
    p = {}
    if kind in ("max", "topk", "ds_mil") or (kind == "attention" and cfg.attention_mode == "instance"):
        p["phi_w"] = _glorot(rng, d, 1)
        p["phi_b"] = np.zeros(1)
    if kind == "transformer":
        if d % cfg.n_heads:
            raise ConfigError(f"embedding width {d} is not divisible by {cfg.n_heads} heads")
        for i in range(cfg.n_layers):
            for name in ("wq", "wk", "wv", "wo"):
                p[f"l{i}_{name}"] = _glorot(rng, d, d) * 0.5
            p[f"l{i}_mlp1_w"] = _glorot(rng, d, 2 * d) * 0.5
            p[f"l{i}_mlp1_b"] = np.zeros(2 * d)
            p[f"l{i}_mlp2_w"] = _glorot(rng, 2 * d, d) * 0.5
            p[f"l{i}_mlp2_b"] = np.zeros(d)
    if kind in ("attention", "transformer"):
        p["att_v"] = _glorot(rng, d, l)
        p["att_w"] = _glorot(rng, l, 1)
    if kind == "ds_mil":
        p["q_w"] = _glorot(rng, d, l)
        p["q_b"] = np.zeros(l)
    if kind in ("ds_mil", "transformer") or (kind == "attention" and cfg.attention_mode == "embedding"):
        p["cls_w"] = _glorot(rng, d, 1)
        p["cls_b"] = np.zeros(1)
    mode = cfg.attention_mode if kind == "attention" else "embedding"
    return AggregatorModel(kind, p, cfg.topk_ratio, cfg.stream_weight, mode, cfg.n_heads)


# ------------------------------------------------------------ forwards

def _canonical_order(h):
    return np.lexsort(h.T[::-1])


def _linear(h, w, b):
    return nc.add(nc.matmul(h, w), b)


def _attention_weights(h, P):
    s = nc.matmul(nc.tanh(nc.matmul(h, P["att_v"])), P["att_w"])  # (K, 1)
    return nc.softmax(s, axis=0)


def _topm(k, ratio):
    return max(1, math.ceil(ratio * k - 1e-12))


def _msa(h, P, i, n_heads):
    k, d = nc.value_of(h).shape
    dh = d // n_heads

    def heads(x):
        return nc.permute(nc.reshape(x, (k, n_heads, dh)), (1, 0, 2))

    q = heads(nc.matmul(h, P[f"l{i}_wq"]))
    kk = heads(nc.matmul(h, P[f"l{i}_wk"]))
    v = heads(nc.matmul(h, P[f"l{i}_wv"]))
    att = nc.softmax(nc.scale(nc.bmm(q, nc.permute(kk, (0, 2, 1))), 1.0 / math.sqrt(dh)), axis=-1)
    out = nc.reshape(nc.permute(nc.bmm(att, v), (1, 0, 2)), (k, d))
    return nc.matmul(out, P[f"l{i}_wo"])


def transformer_blocks(h, P, n_heads=4):
    """H'(l) = MSA(H(l-1)) + H(l-1);  H(l) = MLP(H'(l)) + H'(l)."""
    n_layers = sum(1 for name in P if name.endswith("_wq"))
    for i in range(n_layers):
        h = nc.add(_msa(h, P, i, n_heads), h)
        mlp = _linear(nc.relu(_linear(h, P[f"l{i}_mlp1_w"], P[f"l{i}_mlp1_b"])), P[f"l{i}_mlp2_w"], P[f"l{i}_mlp2_b"])
        h = nc.add(mlp, h)
    return h


def _forward(model, P, h, y=None):
    """Bag score, instance scores and attention on canonical-order ``h``.

    When ``y`` is given also returns the training loss.
    """
    kind = model.kind
    k = nc.value_of(h).shape[0]
    inst = att = loss = None
    if kind in ("max", "topk"):
        logits = nc.reshape(_linear(h, P["phi_w"], P["phi_b"]), (k,))
        inst = nc.sigmoid(logits)
        if kind == "max":
            j = int(np.argmax(nc.value_of(logits)))
            top = nc.index(logits, j)
            bag = nc.sigmoid(top)
            if y is not None:
                loss = nc.bce_logits(top, y)
        else:
            m = _topm(k, model.topk_ratio)
            order = np.argsort(-nc.value_of(inst), kind="stable")[:m]
            bag = nc.mean(nc.index(inst, order))
            if y is not None:
                loss = nc.bce_prob(bag, y)
    elif kind == "attention":
        a = _attention_weights(h, P)
        att = nc.value_of(a)[:, 0]
        if model.attention_mode == "instance":
            inst_col = nc.sigmoid(_linear(h, P["phi_w"], P["phi_b"]))
            inst = nc.reshape(inst_col, (k,))
            bag = nc.sum_(nc.mul(a, inst_col))
            if y is not None:
                loss = nc.bce_prob(bag, y)
        else:
            z = nc.reshape(nc.matmul(nc.transpose(a), h) @ P["cls_w"], ()) + P["cls_b"][0]
            bag = nc.sigmoid(z)
            if y is not None:
                loss = nc.bce_logits(z, y)
    elif kind == "ds_mil":
        logits = nc.reshape(_linear(h, P["phi_w"], P["phi_b"]), (k,))
        inst = nc.sigmoid(logits)
        c = int(np.argmax(nc.value_of(logits)))
        q = nc.tanh(_linear(h, P["q_w"], P["q_b"]))  # (K, l)
        l = nc.value_of(q).shape[1]
        qc = nc.index(q, slice(c, c + 1))  # (1, l)
        a = nc.softmax(nc.scale(nc.matmul(q, nc.transpose(qc)), 1.0 / math.sqrt(l)), axis=0)  # (K, 1)
        att = nc.value_of(a)[:, 0]
        emb = nc.matmul(nc.transpose(a), h)
        z_bag = nc.reshape(_linear(emb, P["cls_w"], P["cls_b"]), ())
        z_inst = nc.index(logits, c)
        w = model.stream_weight
        bag = nc.scale(nc.add(nc.scale(nc.sigmoid(z_inst), w), nc.sigmoid(z_bag)), 1.0 / (1.0 + w))
        if y is not None:
            loss = nc.scale(nc.add(nc.scale(nc.bce_logits(z_inst, y), w), nc.bce_logits(z_bag, y)), 1.0 / (1.0 + w))
    elif kind == "transformer":
        hl = transformer_blocks(h, P, model.n_heads)
        a = _attention_weights(hl, P)
        att = nc.value_of(a)[:, 0]
        z = nc.reshape(nc.matmul(nc.matmul(nc.transpose(a), hl), P["cls_w"]), ()) + P["cls_b"][0]
        bag = nc.sigmoid(z)
        if y is not None:
            loss = nc.bce_logits(z, y)
    else:
        raise ConfigError(f"unknown aggregator kind {kind!r}")
    return bag, inst, att, loss


def _check_bag(h, d=None):
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ShapeError(f"a bag must be a nonempty (K, d) matrix, got shape {h.shape}")
    if d is not None and h.shape[1] != d:
        raise ShapeError(f"bag width {h.shape[1]} does not match model width {d}")
    return h


def _model_width(model):
    for name in ("phi_w", "att_v", "q_w", "cls_w"):
        if name in model.params:
            return model.params[name].shape[0]
    return None


def predict(model, h):
    """Full :class:`BagPrediction` for one bag of embeddings."""
    h = _check_bag(h, _model_width(model))
    order = _canonical_order(h)
    bag, inst, att, _ = _forward(model, model.params, h[order])
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    inst = None if inst is None else np.asarray(inst)[inv]
    att = None if att is None else np.asarray(att)[inv]
    return BagPrediction(float(bag), inst, att)


def max_pool(h, model):
    if model.kind != "max":
        model = AggregatorModel("max", {"phi_w": model.params["phi_w"], "phi_b": model.params["phi_b"]})
    return predict(model, h)


def topk_pool(h, model, ratio=None):
    ratio = model.topk_ratio if ratio is None else ratio
    m = AggregatorModel("topk", {"phi_w": model.params["phi_w"], "phi_b": model.params["phi_b"]}, topk_ratio=ratio)
    return predict(m, h)


def attention_mil(h, model, mode=None):
    if mode is not None and mode != model.attention_mode:
        model = AggregatorModel("attention", model.params, attention_mode=mode)
    if model.kind != "attention":
        model = AggregatorModel("attention", model.params, attention_mode=model.attention_mode)
    return predict(model, h)


def ds_mil(h, model):
    return predict(model, h)


def transformer_agg(h, model):
    return predict(model, h)


def instance_scores(model, h):
    """phi(h_k) for every instance; embedding-only kinds need an attached probe."""
    h = _check_bag(h)
    if model.has_instance_classifier:
        w, b = model.params["phi_w"], model.params["phi_b"]
    elif model.aux_phi is not None:
        w, b = model.aux_phi["phi_w"], model.aux_phi["phi_b"]
    else:
        raise CapabilityError(
            f"aggregator kind {model.kind!r} ({model.attention_mode}) has no instance classifier; "
            "attach an auxiliary linear probe with attach_linear_probe()"
        )
    return nc.sigmoid((h @ w + b)[:, 0])


# ------------------------------------------------------------ training

class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def dsmil_step(P, h, y, w=1.0):
    """Hand-derived DS-MIL forward and backward on a canonical-order bag.

    Returns ``(bag_score, loss, grads)`` with grads keyed like ``P``.  Used by
    the training loop for speed; it agrees with the tape to rounding error.
    """
    z = h @ P["phi_w"][:, 0] + P["phi_b"][0]
    c = int(np.argmax(z))
    q = np.tanh(h @ P["q_w"] + P["q_b"])
    l = q.shape[1]
    s = q @ q[c] / math.sqrt(l)
    a = np.exp(s - s.max())
    a /= a.sum()
    emb = a @ h
    z_bag = float(emb @ P["cls_w"][:, 0] + P["cls_b"][0])
    z_c = float(z[c])
    bag = (w * _sig(z_c) + _sig(z_bag)) / (1.0 + w)
    loss = (w * (_softplus(z_c) - y * z_c) + (_softplus(z_bag) - y * z_bag)) / (1.0 + w)
    dz_c = w * (_sig(z_c) - y) / (1.0 + w)
    dz_bag = (_sig(z_bag) - y) / (1.0 + w)
    demb = P["cls_w"][:, 0] * dz_bag
    da = h @ demb
    ds = a * (da - a @ da)
    dq = np.outer(ds, q[c]) / math.sqrt(l)
    dq[c] += ds @ q / math.sqrt(l)
    dpre = dq * (1.0 - q * q)
    grads = {
        "phi_w": (h[c] * dz_c)[:, None],
        "phi_b": np.array([dz_c]),
        "q_w": h.T @ dpre,
        "q_b": dpre.sum(axis=0),
        "cls_w": (emb * dz_bag)[:, None],
        "cls_b": np.array([dz_bag]),
    }
    return bag, float(loss), grads


def _fast_bag_scores(model, canon_bags):
    if model.kind == "ds_mil":
        return np.array([dsmil_step(model.params, h, 0.0, model.stream_weight)[0] for h in canon_bags])
    return np.array([float(_forward(model, model.params, h)[0]) for h in canon_bags])


def bag_scores(model, bags):
    return np.array([predict(model, h).bag_score for h in bags])


def bag_loss_and_grads(model, h, y):
    """Loss of one bag and the adjoints of every parameter (dict order)."""
    h = _check_bag(h)
    order = _canonical_order(h)
    tape = nc.Tape()
    names = list(model.params)
    P = dict(zip(names, tape.params([model.params[n] for n in names])))
    _, _, _, loss = _forward(model, P, h[order], y=float(y))
    grads = tape.backward(loss)
    return float(loss.value), grads


def _mean_bce(scores, labels):
    s = np.clip(scores, 1e-12, 1 - 1e-12)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(y * np.log(s) + (1 - y) * np.log(1 - s))))


def train_aggregator(bags, bag_labels, kind=None, config=None, seed=0, val_bags=None, val_labels=None):
    """Per-bag Adam with step decay; returns the checkpoint with the best validation bag AUC.

    Ties in validation AUC are broken by lower validation cross-entropy.
    Without a validation set the training bags are used for selection.
    """
    config = config or AggConfig(kind=kind or "ds_mil")
    if kind is not None and kind != config.kind:
        config = AggConfig(**{**config.__dict__, "kind": kind})
    labels = np.asarray(bag_labels, dtype=np.int64)
    if len(bags) != len(labels):
        raise DataError(f"{len(bags)} bags but {len(labels)} labels")
    if not (np.any(labels == 1) and np.any(labels == 0)):
        raise DataError("training needs at least one positive and one negative bag")
    bags = [_check_bag(b) for b in bags]
    if val_bags is None or len(val_bags) == 0 or len(set(np.asarray(val_labels).tolist())) < 2:
        val_bags, val_labels = bags, labels
    val_bags = [_check_bag(b) for b in val_bags]
    val_labels = np.asarray(val_labels, dtype=np.int64)
    canon = [b[_canonical_order(b)] for b in bags]
    val_canon = [b[_canonical_order(b)] for b in val_bags]
    best, best_key = None, None
    for r in range(config.n_restarts):
        model, key = _fit_once(canon, labels, val_canon, val_labels, config, seed + 104729 * r)
        if best_key is None or key > best_key:
            best, best_key = model, key
    return best


def _fit_once(canon, labels, val_canon, val_labels, config, seed):
    d = canon[0].shape[1]
    model = init_model(config.kind, d, config, seed)
    names = list(model.params)
    params = [model.params[n] for n in names]
    opt = Adam(params, config.lr, config.betas, config.eps, config.weight_decay)
    rng = np.random.default_rng(seed + 7919)

    best_key, best = None, model.copy()
    since_best = 0
    history = []
    for epoch in range(1, config.max_epochs + 1):
        opt.lr = config.lr * config.gamma ** ((epoch - 1) // config.step_size)
        for i in rng.permutation(len(canon)):
            if model.kind == "ds_mil":
                g = dsmil_step(model.params, canon[i], float(labels[i]), model.stream_weight)[2]
                opt.step(params, [g[n] for n in names])
                continue
            tape = nc.Tape()
            P = dict(zip(names, tape.params(params)))
            _, _, _, loss = _forward(model, P, canon[i], y=float(labels[i]))
            opt.step(params, tape.backward(loss))
        if epoch % config.eval_every and epoch != config.max_epochs:
            continue
        vs = _fast_bag_scores(model, val_canon)
        auc = roc_auc(val_labels, vs)
        key = (auc, -_mean_bce(vs, val_labels))
        history.append((epoch, auc))
        if best_key is None or key > best_key:
            best_key, best = key, model.copy()
            since_best = 0
        else:
            since_best += 1
            if config.patience is not None and since_best >= config.patience:
                break
    best.history = history
    return best, best_key


def attach_linear_probe(model, bags, instance_labels, epochs=200, lr=0.1, l2=1e-4, seed=0):
    """Fit a logistic instance classifier on frozen embeddings and attach it as ``aux_phi``.

    ``instance_labels`` supplies one 0/1 vector per bag (pseudo or true labels).
    """
    x = np.concatenate([np.asarray(b, dtype=np.float64) for b in bags])
    y = np.concatenate([np.asarray(v, dtype=np.float64) for v in instance_labels])
    w, b = fit_logistic(x, y, epochs=epochs, lr=lr, l2=l2, seed=seed)
    model.aux_phi = {"phi_w": w, "phi_b": b}
    return model


def fit_logistic(x, y, epochs=200, lr=0.1, l2=1e-4, seed=0):
    """Full-batch Adam on the mean logistic loss with a small ridge penalty."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-12
    xs = (x - mu) / sd
    rng = np.random.default_rng(seed)
    w = rng.normal(0, 0.01, size=(x.shape[1], 1))
    b = np.zeros(1)
    opt = Adam([w, b], lr)
    pos = max(y.mean(), 1e-6)
    weights = np.where(y == 1, 0.5 / pos, 0.5 / max(1 - pos, 1e-6))
    for _ in range(epochs):
        p = nc.sigmoid((xs @ w)[:, 0] + b[0])
        g = weights * (p - y) / len(y)
        opt.step([w, b], [xs.T @ g[:, None] + l2 * w, np.array([g.sum()])])
    # fold the standardisation into the weights
    w_raw = w / sd[:, None]
    b_raw = b - (mu / sd) @ w[:, 0]
    return w_raw, b_raw


# ------------------------------------------------------------ checkpoints

def to_bytes(model):
    tag = model.kind.encode("ascii")
    cfg = json.dumps({"topk_ratio": model.topk_ratio, "stream_weight": model.stream_weight,
                      "attention_mode": model.attention_mode, "n_heads": model.n_heads}, sort_keys=True).encode()
    blocks = dict(model.params)
    if model.aux_phi is not None:
        blocks.update({f"aux_{k}": v for k, v in model.aux_phi.items()})
    parts = [MAGIC, struct.pack("<B", len(tag)), tag, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        nb = name.encode("ascii")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<I", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def from_bytes(buf):
    if buf[:6] != MAGIC:
        raise FormatError("bad aggregator checkpoint magic", 0)
    try:
        off = 6
        (n,) = struct.unpack_from("<B", buf, off)
        off += 1
        kind = buf[off:off + n].decode("ascii")
        off += n
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        cfg = json.loads(buf[off:off + n])
        off += n
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        params, aux = {}, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("ascii")
            off += n
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(buf):
                raise FormatError("truncated parameter block", len(buf))
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
            if name.startswith("aux_"):
                aux[name[4:]] = arr
            else:
                params[name] = arr
    except struct.error as exc:
        raise FormatError(f"truncated aggregator checkpoint ({exc})", len(buf)) from None
    if off != len(buf):
        raise FormatError("trailing bytes after aggregator checkpoint", off)
    if kind not in KINDS:
        raise FormatError(f"unknown aggregator kind tag {kind!r}", 7)
    return AggregatorModel(kind, params, cfg["topk_ratio"], cfg["stream_weight"], cfg["attention_mode"],
                           cfg["n_heads"], aux or None)


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
