"""Instance pools, confidence selection, the self-paced rate schedule and batch drawing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BatchError, ConfigError, ContractError, StateError

NEG_BAG = "X-neg"
POS_PSEUDO = "X+pos"
NEG_PSEUDO = "X-pos"
POS_CONF = "X+pos(r)"
NEG_CONF = "X-pos(r)"


@dataclass
class InstancePools:
    """Instance ids (sorted int arrays) grouped by bag label and pseudo label."""

    neg_bag_ids: np.ndarray
    pos_pseudo_ids: np.ndarray
    neg_pseudo_ids: np.ndarray
    pos_confident_ids: np.ndarray = None
    neg_confident_ids: np.ndarray = None

    def check(self):
        a, p, n = set(self.neg_bag_ids), set(self.pos_pseudo_ids), set(self.neg_pseudo_ids)
        ok = not (a & p) and not (a & n) and not (p & n)
        if self.pos_confident_ids is not None:
            ok &= set(self.pos_confident_ids) <= p
        if self.neg_confident_ids is not None:
            ok &= set(self.neg_confident_ids) <= n
        if not ok:
            raise StateError("instance pools violate their disjointness/subset invariants")
        return True


@dataclass(frozen=True)
class SpsSchedule:
    r0: float = 0.2
    rT: float = 0.8
    T_warmup: int = 5
    T: int = 50
    p_plus: float = 0.2

    def __post_init__(self):
        if not 0 <= self.r0 <= self.rT <= 1:
            raise ConfigError(f"need 0 <= r0 <= rT <= 1, got r0={self.r0}, rT={self.rT}")
        if not 0 <= self.T_warmup < self.T:
            raise ConfigError(f"need 0 <= T_warmup < T, got {self.T_warmup}, {self.T}")
        if not 0 <= self.p_plus <= 1:
            raise ConfigError(f"p_plus must lie in [0, 1], got {self.p_plus}")


@dataclass
class ContrastiveBatch:
    anchors: np.ndarray  # (n,)
    same: np.ndarray  # (n, |S_x|)
    diff: np.ndarray  # (n, |D_x|)
    positive: np.ndarray  # (n,) bool, anchor drawn as a positive
    replacement_draws: int = 0


@dataclass(frozen=True)
class BatchSpec:
    n_anchors: int = 128
    n_same: int = 8
    n_diff: int = 8


def partition_instances(instance_ids, bag_labels, pseudo_labels):
    """Split instances into X-neg, X+pos and X-pos.

    ``bag_labels`` gives each instance's bag label; ``pseudo_labels`` may hold
    -1 (missing) for negative-bag instances only.
    """
    ids = np.asarray(instance_ids, dtype=np.int64)
    bag = np.asarray(bag_labels)
    pseudo = np.asarray(pseudo_labels)
    in_pos = bag == 1
    if np.any(in_pos & ~np.isin(pseudo, (0, 1))):
        raise StateError("instance in a positive bag has no pseudo label")
    return InstancePools(
        neg_bag_ids=np.sort(ids[~in_pos]),
        pos_pseudo_ids=np.sort(ids[in_pos & (pseudo == 1)]),
        neg_pseudo_ids=np.sort(ids[in_pos & (pseudo == 0)]),
    )


def rate_schedule(t, sched):
    """r = r0 + (rT - r0) (t - T_warmup) / (T - T_warmup) for T_warmup < t <= T."""
    if t <= sched.T_warmup:
        raise ContractError(f"epoch {t} is inside warm-up; no confidence pools requested")
    if t > sched.T:
        raise ContractError(f"epoch {t} beyond T={sched.T}")
    if t == sched.T:
        return sched.rT
    alpha = (sched.rT - sched.r0) / (sched.T - sched.T_warmup)
    return min(sched.r0 + alpha * (t - sched.T_warmup), sched.rT)


def select_confident(pools, scores, r):
    """Attach X+pos(r) (highest scores) and X-pos(r) (lowest scores).

    ``scores`` maps instance id -> probability (array indexed by id or dict).
    Ties are broken by ascending instance id.
    """
    if not 0 <= r <= 1:
        raise ContractError(f"rate r must lie in [0, 1], got {r}")

    def take(ids, highest):
        if len(ids) == 0:
            return ids.copy()
        s = np.asarray([scores[i] for i in ids], dtype=np.float64)
        k = math.ceil(r * len(ids) - 1e-12)
        key = -s if highest else s
        order = np.lexsort((ids, key))
        return np.sort(ids[order[:k]])

    pools.pos_confident_ids = take(pools.pos_pseudo_ids, highest=True)
    pools.neg_confident_ids = take(pools.neg_pseudo_ids, highest=False)
    return pools


class _Source:
    __slots__ = ("name", "ids")

    def __init__(self, name, ids):
        self.name = name
        self.ids = np.asarray(ids, dtype=np.int64)


def _draw_members(rng, src, anchors, k, context):
    """k ids per anchor from ``src`` minus that anchor.

    Rows are drawn without replacement whenever the pool allows it.  Each such
    row keeps the first k distinct values of an iid uniform stream, which is a
    uniform draw without replacement.  Returns ``(ids (A, k), rows replaced)``.
    """
    ids = src.ids
    n = len(ids)
    a_n = len(anchors)
    pos = np.searchsorted(ids, anchors)
    has = (pos < n) & (ids[np.minimum(pos, max(n - 1, 0))] == anchors) if n else np.zeros(a_n, dtype=bool)
    avail = n - has.astype(np.int64)
    if a_n and avail.min() <= 0:
        raise BatchError(src.name, context)
    out = np.empty((a_n, k), dtype=np.int64)
    if k == 0 or a_n == 0:
        return out, 0
    full = avail >= k
    # local index j in [0, avail) maps past the anchor's position
    rows = np.flatnonzero(full)
    if len(rows):
        c = 2 * k + 8
        cand = np.floor(rng.random((len(rows), c)) * avail[rows, None]).astype(np.int64)
        order = np.argsort(cand, axis=1, kind="stable")
        srt = np.take_along_axis(cand, order, axis=1)
        dup = np.zeros_like(cand, dtype=bool)
        np.put_along_axis(dup, order[:, 1:], srt[:, 1:] == srt[:, :-1], axis=1)
        first = np.argsort(dup, axis=1, kind="stable")[:, :k]
        pick = np.take_along_axis(cand, first, axis=1)
        short = np.flatnonzero((~dup).sum(axis=1) < k)
        for r in short:
            pick[r] = rng.choice(avail[rows[r]], size=k, replace=False)
        out[rows] = pick
    rows_r = np.flatnonzero(~full)
    for r in rows_r:
        out[r] = rng.integers(0, avail[r], size=k)
    out += (has[:, None] & (out >= pos[:, None])).astype(np.int64)
    return ids[out], len(rows_r)


def _contains(sorted_ids, x):
    j = np.searchsorted(sorted_ids, x)
    return j < len(sorted_ids) and sorted_ids[j] == x


def _draw_anchors(rng, src, k, context):
    if k == 0:
        return np.zeros(0, dtype=np.int64), False
    n = len(src.ids)
    if n == 0:
        raise BatchError(src.name, context)
    if n >= k:
        return src.ids[rng.choice(n, size=k, replace=False)], False
    return src.ids[rng.integers(0, n, size=k)], True


def draw_batch(pools, sched, t, spec, rng, context=""):
    """Draw anchors with their same-label and different-label sets for epoch ``t``.

    Warm-up (t <= T_warmup): anchors and S_x from X-neg, D_x from X+pos.
    Afterwards ceil(p_plus * n) anchors come from X+pos(r) and the rest from
    X-neg u X-pos(r); S_x/D_x follow the anchor's pseudo class.
    """
    where = f"epoch {t}" + (f", {context}" if context else "")
    replaced = 0
    if t <= sched.T_warmup:
        neg = _Source(NEG_BAG, pools.neg_bag_ids)
        pos = _Source(POS_PSEUDO, pools.pos_pseudo_ids)
        if len(pos.ids) == 0:
            raise BatchError(pos.name, where)
        n_pos = 0
        pos_src = pos
        neg_src = neg
    else:
        if pools.pos_confident_ids is None or pools.neg_confident_ids is None:
            raise StateError("confidence pools have not been selected")
        pos_src = _Source(POS_CONF, pools.pos_confident_ids)
        neg_ids = np.union1d(pools.neg_bag_ids, pools.neg_confident_ids)
        neg_src = _Source(f"{NEG_BAG} u {NEG_CONF}", neg_ids)
        n_pos = math.ceil(sched.p_plus * spec.n_anchors - 1e-12)
        if len(pos_src.ids) == 0:
            raise BatchError(pos_src.name, where)
        if len(neg_src.ids) == 0:
            raise BatchError(neg_src.name, where)

    pos_anchors, rep = _draw_anchors(rng, pos_src, n_pos, where)
    replaced += rep
    neg_anchors, rep = _draw_anchors(rng, neg_src, spec.n_anchors - n_pos, where)
    replaced += rep
    anchors = np.concatenate([pos_anchors, neg_anchors])
    positive = np.zeros(len(anchors), dtype=bool)
    positive[:n_pos] = True

    same = np.empty((len(anchors), spec.n_same), dtype=np.int64)
    diff = np.empty((len(anchors), spec.n_diff), dtype=np.int64)
    for mask, s_src, d_src in ((positive, pos_src, neg_src), (~positive, neg_src, pos_src)):
        if not mask.any():
            continue
        same[mask], rep = _draw_members(rng, s_src, anchors[mask], spec.n_same, where)
        replaced += rep
        diff[mask], rep = _draw_members(rng, d_src, anchors[mask], spec.n_diff, where)
        replaced += rep
    return ContrastiveBatch(anchors, same, diff, positive, replaced)


def check_batch(batch, pools, warmup):
    """Count pool-membership violations of a batch (0 means the batch is valid)."""
    bad = 0
    if warmup:
        pos_set = set(pools.pos_pseudo_ids.tolist())
        neg_set = set(pools.neg_bag_ids.tolist())
    else:
        pos_set = set(pools.pos_confident_ids.tolist())
        neg_set = set(pools.neg_bag_ids.tolist()) | set(pools.neg_confident_ids.tolist())
    for a, s, d, is_pos in zip(batch.anchors, batch.same, batch.diff, batch.positive):
        a = int(a)
        same_pool, diff_pool = (pos_set, neg_set) if is_pos else (neg_set, pos_set)
        if warmup and (is_pos or a not in neg_set):
            bad += 1
        if a not in same_pool:
            bad += 1
        if a in s or a in d:
            bad += 1
        if not set(s.tolist()) <= same_pool:
            bad += 1
        if not set(d.tolist()) <= diff_pool or set(d.tolist()) & same_pool:
            bad += 1
    return bad
