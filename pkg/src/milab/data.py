"""Synthetic MIL datasets, witness-rate and sub-bag transforms, augmentation and file I/O.

On disk a dataset is a directory with two files:

``features.milf``
    magic ``b"MILF1\\0"``, u32 N, u32 m, then N*m float32 little-endian values
    in row-major order.
``manifest.json``
    ``{"format": "MILF1", "n_instances": N, "m": m, "metadata": {...},
    "bags": [{"id", "label", "start", "end", "split", "instance_labels"?}]}``
    written with sorted keys and two-space indentation.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, FormatError

MAGIC = b"MILF1\0"
SPLITS = ("train", "val", "test")


@dataclass
class Bag:
    id: int
    label: int
    start: int
    end: int
    split: str = "train"
    instance_labels: np.ndarray | None = None

    @property
    def size(self):
        return self.end - self.start


@dataclass
class Dataset:
    features: np.ndarray  # (N, m) float64 holding float32-representable values
    bags: list
    metadata: dict = field(default_factory=dict)

    @property
    def m(self):
        return self.features.shape[1]

    @property
    def n_instances(self):
        return self.features.shape[0]

    @property
    def has_instance_labels(self):
        return all(b.instance_labels is not None for b in self.bags)

    def split_bags(self, split):
        return [b for b in self.bags if b.split == split]

    def instance_index(self, split=None):
        """Row ids of instances, optionally restricted to one split."""
        return np.concatenate(
            [np.arange(b.start, b.end) for b in self.bags if split is None or b.split == split]
            or [np.zeros(0, dtype=np.int64)]
        ).astype(np.int64)

    def instance_bag_labels(self):
        out = np.zeros(self.n_instances, dtype=np.int64)
        for b in self.bags:
            out[b.start:b.end] = b.label
        return out

    def instance_labels(self):
        """Ground-truth instance labels over the whole table (-1 where unknown)."""
        out = np.full(self.n_instances, -1, dtype=np.int64)
        for b in self.bags:
            if b.instance_labels is not None:
                out[b.start:b.end] = b.instance_labels
        return out

    def validate(self):
        n = self.n_instances
        spans = sorted((b.start, b.end) for b in self.bags)
        pos = 0
        for s, e in spans:
            if s != pos or e <= s:
                raise DataError(f"bag ranges must tile [0, {n}) without gaps or overlap (at {s}:{e})")
            pos = e
        if pos != n:
            raise DataError(f"bag ranges cover [0, {pos}) but the table has {n} rows")
        for b in self.bags:
            if b.split not in SPLITS:
                raise DataError(f"bag {b.id}: unknown split {b.split!r}")
            if b.instance_labels is not None:
                lab = np.asarray(b.instance_labels)
                if len(lab) != b.size:
                    raise DataError(f"bag {b.id}: {len(lab)} instance labels for {b.size} instances")
                if int(lab.max(initial=0) > 0) != b.label:
                    raise DataError(f"bag {b.id}: label {b.label} contradicts its instance labels")
        return self


@dataclass
class SynthConfig:
    m: int = 32
    bags_per_split: dict = field(default_factory=lambda: {"train": 100, "val": 30, "test": 30})
    positive_fraction: float = 0.5
    bag_size: int = 50
    bag_size_jitter: int = 0
    witness_rate: float = 0.10
    n_neg_components: int = 3
    class_separation: float = 2.0
    component_spread: float = 4.0
    noise_scale: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.witness_rate <= 1:
            raise ConfigError(f"witness_rate must lie in (0, 1], got {self.witness_rate}")
        if self.bag_size - self.bag_size_jitter < 1:
            raise ConfigError("bag size must be at least 1")
        if self.m < 2 or self.n_neg_components < 1:
            raise ConfigError("need m >= 2 and at least one negative component")
        if not 0 <= self.positive_fraction <= 1:
            raise ConfigError("positive_fraction must lie in [0, 1]")
        unknown = set(self.bags_per_split) - set(SPLITS)
        if unknown:
            raise ConfigError(f"unknown splits {sorted(unknown)}")

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown synth config keys: {sorted(extra)}")
        return cls(**d)


def _mixture_geometry(cfg, rng):
    """Negative component centres and the positive centre.

    Components sit on a sphere of radius ``component_spread``; the positive
    class mean is offset by ``class_separation`` from the negative centroid
    along a direction orthogonal to the span of the component centres.
    """
    m = cfg.m
    basis, _ = np.linalg.qr(rng.normal(size=(m, m)))
    k = cfg.n_neg_components
    if k + 1 > m:
        raise ConfigError("need m > n_neg_components")
    centres = rng.normal(size=(k, k))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    centres = centres @ basis[:, :k].T * cfg.component_spread
    centroid = centres.mean(axis=0)
    pos_centre = centroid + cfg.class_separation * basis[:, k]
    return centres, pos_centre


def gen_synthetic(cfg):
    """Bags of Gaussian-mixture negatives with ceil(WR * K) shifted-Gaussian positives per positive bag."""
    rng = np.random.default_rng(cfg.seed)
    centres, pos_centre = _mixture_geometry(cfg, rng)
    feats, bags = [], []
    start = 0
    bag_id = 0
    for split in SPLITS:
        n_bags = int(cfg.bags_per_split.get(split, 0))
        n_pos = int(round(cfg.positive_fraction * n_bags))
        labels = np.array([1] * n_pos + [0] * (n_bags - n_pos))
        rng.shuffle(labels)
        for label in labels:
            k = cfg.bag_size
            if cfg.bag_size_jitter:
                k += int(rng.integers(-cfg.bag_size_jitter, cfg.bag_size_jitter + 1))
            n_witness = math.ceil(cfg.witness_rate * k - 1e-12) if label else 0
            inst = np.zeros(k, dtype=np.int64)
            inst[:n_witness] = 1
            rng.shuffle(inst)
            comp = rng.integers(0, len(centres), size=k)
            x = centres[comp] + cfg.noise_scale * rng.normal(size=(k, cfg.m))
            x[inst == 1] = pos_centre + cfg.noise_scale * rng.normal(size=(n_witness, cfg.m))
            feats.append(x)
            bags.append(Bag(bag_id, int(label), start, start + k, split, inst))
            start += k
            bag_id += 1
    table = np.concatenate(feats) if feats else np.zeros((0, cfg.m))
    table = table.astype(np.float32).astype(np.float64)
    meta = {"m": cfg.m, "config_hash": cfg.config_hash(), "synth_config": cfg.to_dict()}
    return Dataset(table, bags, meta).validate()


def realized_witness_rate(ds, split=None):
    """Fraction of positive instances over all instances of positive bags."""
    pos = tot = 0
    for b in ds.bags:
        if b.label == 1 and (split is None or b.split == split) and b.instance_labels is not None:
            pos += int(np.sum(b.instance_labels))
            tot += b.size
    return pos / tot if tot else float("nan")


def _rebuild(ds, groups, extra_meta):
    """Assemble a new dataset from (template bag, row ids, instance labels) groups."""
    rows, bags, start = [], [], 0
    for new_id, (bag, ids, labels) in enumerate(groups):
        rows.append(ids)
        bags.append(Bag(new_id, bag.label, start, start + len(ids), bag.split, labels))
        start += len(ids)
    idx = np.concatenate(rows).astype(np.int64) if rows else np.zeros(0, dtype=np.int64)
    meta = dict(ds.metadata)
    meta.update(extra_meta)
    return Dataset(ds.features[idx], bags, meta).validate()


def set_witness_rate(ds, keep_fraction, which="positives", seed=0):
    """Keep ceil(keep_fraction * count) instances of the targeted class in each positive bag."""
    if not ds.has_instance_labels:
        raise DataError("witness-rate manipulation needs ground-truth instance labels")
    if not 0 < keep_fraction <= 1:
        raise ConfigError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if which not in ("positives", "negatives"):
        raise ConfigError(f"which must be 'positives' or 'negatives', got {which!r}")
    target = 1 if which == "positives" else 0
    rng = np.random.default_rng(seed)
    groups = []
    for b in ds.bags:
        ids = np.arange(b.start, b.end)
        lab = np.asarray(b.instance_labels)
        if b.label == 1 and keep_fraction < 1:
            hit = np.flatnonzero(lab == target)
            keep_n = math.ceil(keep_fraction * len(hit) - 1e-12)
            kept = np.sort(rng.choice(hit, size=keep_n, replace=False)) if keep_n else hit[:0]
            mask = lab != target
            mask[kept] = True
            if not mask.any():
                raise DataError(f"bag {b.id} would become empty")
            if target == 1 and len(hit) and not lab[mask].any():
                raise DataError(f"bag {b.id} would lose its last positive")
            ids, lab = ids[mask], lab[mask]
        groups.append((b, ids, lab.copy()))
    return _rebuild(ds, groups, {"witness_transform": {"keep_fraction": keep_fraction, "which": which, "seed": seed}})


def partition_subbags(ds, max_size, seed=0):
    """Split bags larger than ``max_size`` into sub-bags that inherit the parent label.

    Negative bags become ceil(K / max_size) random near-equal sub-bags.  For
    positive bags the sub-bag count is capped at the number of positives, the
    positives are spread round-robin after shuffling, and negatives are shared
    out in proportion to each sub-bag's positive count so every sub-bag keeps
    roughly the parent's witness rate.
    """
    if max_size < 1:
        raise ConfigError("max_size must be at least 1")
    rng = np.random.default_rng(seed)
    groups = []
    for b in ds.bags:
        ids = np.arange(b.start, b.end)
        lab = None if b.instance_labels is None else np.asarray(b.instance_labels)
        if b.size <= max_size:
            groups.append((b, ids, None if lab is None else lab.copy()))
            continue
        n_sub = math.ceil(b.size / max_size)
        if b.label == 0 or lab is None:
            if b.label == 1 and lab is None:
                raise DataError(f"positive bag {b.id} needs instance labels to be partitioned")
            perm = rng.permutation(b.size)
            for part in np.array_split(perm, n_sub):
                part = np.sort(part)
                groups.append((b, ids[part], None if lab is None else lab[part]))
            continue
        pos = rng.permutation(np.flatnonzero(lab == 1))
        neg = rng.permutation(np.flatnonzero(lab == 0))
        n_sub = min(n_sub, len(pos))
        pos_parts = np.array_split(pos, n_sub)
        counts = np.array([len(p) for p in pos_parts], dtype=np.float64)
        neg_counts = _apportion(len(neg), counts)
        edges = np.concatenate([[0], np.cumsum(neg_counts)])
        for i, pp in enumerate(pos_parts):
            part = np.sort(np.concatenate([pp, neg[edges[i]:edges[i + 1]]]))
            groups.append((b, ids[part], lab[part]))
    return _rebuild(ds, groups, {"subbag_transform": {"max_size": max_size, "seed": seed}})


def _apportion(total, weights):
    """Largest-remainder split of ``total`` proportional to ``weights``."""
    quota = total * weights / weights.sum()
    base = np.floor(quota).astype(np.int64)
    rest = total - base.sum()
    order = np.argsort(-(quota - base), kind="stable")
    base[order[:rest]] += 1
    return base


def augment(x, strength, rng):
    """x' = s (x + eps), eps ~ N(0, strength^2 I), s ~ U[1 - strength, 1 + strength]."""
    if strength < 0:
        raise ConfigError("augmentation strength must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    if strength == 0:
        return x.copy()
    eps = rng.normal(0.0, strength, size=x.shape)
    lead = x.shape[:-1] + (1,) if x.ndim > 1 else ()
    s = rng.uniform(1.0 - strength, 1.0 + strength, size=lead)
    return s * (x + eps)


# ---------------------------------------------------------------- file I/O

def features_to_bytes(features):
    n, m = features.shape
    data = np.ascontiguousarray(features, dtype="<f4")
    return MAGIC + struct.pack("<2I", n, m) + data.tobytes()


def features_from_bytes(buf):
    if len(buf) < 6 or buf[:6] != MAGIC:
        raise FormatError("bad feature-file magic", 0)
    if len(buf) < 14:
        raise FormatError("truncated feature header", len(buf))
    n, m = struct.unpack_from("<2I", buf, 6)
    need = 14 + 4 * n * m
    if len(buf) < need:
        raise FormatError(f"truncated feature data: expected {need} bytes", len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after feature data", need)
    return np.frombuffer(buf, dtype="<f4", count=n * m, offset=14).reshape(n, m).astype(np.float64)


def manifest_dict(ds):
    bags = []
    for b in ds.bags:
        entry = {"id": int(b.id), "label": int(b.label), "start": int(b.start), "end": int(b.end), "split": b.split}
        if b.instance_labels is not None:
            entry["instance_labels"] = [int(v) for v in b.instance_labels]
        bags.append(entry)
    return {"format": "MILF1", "n_instances": ds.n_instances, "m": ds.m, "metadata": ds.metadata, "bags": bags}


def manifest_bytes(ds):
    return (json.dumps(manifest_dict(ds), sort_keys=True, indent=2) + "\n").encode()


def save_dataset(ds, path):
    """Write ``features.milf`` and ``manifest.json`` into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    feats = features_to_bytes(ds.features)
    man = manifest_bytes(ds)
    for name, blob in (("features.milf", feats), ("manifest.json", man)):
        tmp = os.path.join(path, name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, os.path.join(path, name))


def load_dataset(path):
    with open(os.path.join(path, "features.milf"), "rb") as fh:
        features = features_from_bytes(fh.read())
    try:
        with open(os.path.join(path, "manifest.json"), "rb") as fh:
            man = json.loads(fh.read())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg}", exc.pos) from None
    if man.get("format") != "MILF1":
        raise FormatError("manifest format tag is not MILF1", 0)
    if man.get("n_instances") != features.shape[0] or man.get("m") != features.shape[1]:
        raise FormatError("manifest dimensions disagree with the feature file", 6)
    bags = []
    for e in man["bags"]:
        lab = e.get("instance_labels")
        bags.append(Bag(e["id"], e["label"], e["start"], e["end"], e["split"],
                        None if lab is None else np.asarray(lab, dtype=np.int64)))
    ds = Dataset(features, bags, man.get("metadata", {}))
    try:
        ds.validate()
    except DataError as exc:
        raise FormatError(f"invalid manifest: {exc}") from None
    return ds
