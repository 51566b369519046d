"""Contrastive and cross-entropy losses.

Both contrastive losses are evaluated in log space.  With logits
``l = z_anchor . z / tau``:

    info_nce = LSE(l_aug, l_diff...) - l_aug
    sup_con  = LSE(l_same..., l_diff...) - mean(l_same)

The single-anchor functions return ``(loss, adjoints)``; the ``*_batch``
variants work on tape Vars and are what the training loops use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class SimilarityConfig:
    temperature: float = 0.5

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")


def _check_unit(*vectors):
    for v in vectors:
        n = float(np.linalg.norm(v))
        if abs(n - 1.0) > UNIT_TOL:
            raise ContractError(f"expected a unit vector, got norm {n:.9g}")


def _stack(vectors, dim):
    if len(vectors) == 0:
        return np.zeros((0, dim))
    return np.asarray([np.asarray(v, dtype=np.float64) for v in vectors])


def similarity(z1, z2, cfg=SimilarityConfig()):
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    _check_unit(z1, z2)
    return math.exp(float(z1 @ z2) / cfg.temperature)


def _contrastive(anchor, same, diff, cfg):
    """Shared single-anchor evaluation; returns loss and adjoints of (anchor, same, diff)."""
    tape = nc.Tape()
    a, s, d = tape.params([anchor, same, diff])
    inv_t = 1.0 / cfg.temperature
    ls = nc.scale(nc.matmul(s, nc.reshape(a, (-1, 1))), inv_t)
    parts = [ls]
    if diff.shape[0]:
        parts.append(nc.scale(nc.matmul(d, nc.reshape(a, (-1, 1))), inv_t))
    allv = nc.reshape(nc.concat(parts, axis=0), (1, -1))
    loss = nc.sub(nc.sum_(nc.logsumexp(allv, axis=-1)), nc.mean(ls))
    ga, gs, gd = tape.backward(loss)
    return float(loss.value), (ga, gs, gd)


def info_nce(z_anchor, z_aug, z_diffs, cfg=SimilarityConfig()):
    """-log[sim(x, x_aug) / (sim(x, x_aug) + sum_i sim(x, x_diff_i))].

    Returns ``(loss, (g_anchor, g_aug, g_diffs))``.
    """
    anchor = np.asarray(z_anchor, dtype=np.float64)
    aug = np.asarray(z_aug, dtype=np.float64)
    diffs = _stack(z_diffs, anchor.shape[0])
    _check_unit(anchor, aug, *diffs)
    loss, (ga, gs, gd) = _contrastive(anchor, aug[None, :], diffs, cfg)
    return loss, (ga, gs[0], gd)


def sup_con(z_anchor, z_same, z_diff, cfg=SimilarityConfig()):
    """Supervised contrastive loss of one anchor.

    The denominator sums over the same-label and different-label sets only
    (the anchor itself is excluded) and is shared by every same-label term.
    Returns ``(loss, (g_anchor, g_same, g_diff))``.
    """
    if len(z_same) == 0:
        raise ContractError("the same-label set must be nonempty")
    anchor = np.asarray(z_anchor, dtype=np.float64)
    same = _stack(z_same, anchor.shape[0])
    diff = _stack(z_diff, anchor.shape[0])
    _check_unit(anchor, *same, *diff)
    return _contrastive(anchor, same, diff, cfg)


def bce_instance(score, pseudo_label):
    """Binary cross-entropy of one probability; returns ``(loss, d loss / d score)``."""
    s = min(max(float(score), nc.PROB_CLAMP), 1.0 - nc.PROB_CLAMP)
    y = float(pseudo_label)
    loss = -(y * math.log(s) + (1.0 - y) * math.log(1.0 - s))
    return loss, -(y / s) + (1.0 - y) / (1.0 - s)


def info_nce_batch(z_views1, z_views2, temperature):
    """Mean InfoNCE over a batch where row i of view 2 is the positive of row i of view 1
    and the other rows of view 2 are its negatives (n = batch - 1)."""
    logits = nc.scale(nc.matmul(z_views1, nc.transpose(z_views2)), 1.0 / temperature)
    n = nc.value_of(logits).shape[0]
    diag = nc.index(logits, (np.arange(n), np.arange(n)))
    return nc.mean(nc.sub(nc.logsumexp(logits, axis=-1), diag))


def sup_con_batch(z_anchor, z_members, n_same, temperature):
    """Mean supervised contrastive loss over anchors.

    ``z_anchor`` is (n, d'), ``z_members`` is (n, k, d') whose first ``n_same``
    rows per anchor form S_x and the rest D_x.
    """
    logits = nc.scale(nc.batched_dot(z_anchor, z_members), 1.0 / temperature)
    same = nc.index(logits, (slice(None), slice(0, n_same)))
    per_anchor = nc.sub(nc.logsumexp(logits, axis=-1), nc.mean(same, axis=1))
    return nc.mean(per_anchor)
