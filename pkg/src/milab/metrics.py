"""Bag- and instance-level evaluation metrics and representation statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, UndefinedMetricError

DICE_A_GRID = np.round(np.linspace(-5.0, 5.0, 101), 10)
DICE_B_GRID = np.logspace(-1.0, 1.0, 100)


@dataclass
class MetricsReport:
    bag_auc: float = float("nan")
    instance_auc: float = float("nan")
    instance_auprc: float = float("nan")
    instance_max_f1: float = float("nan")
    dice: float = float("nan")
    iou: float = float("nan")
    inter_class_distance: float = float("nan")
    intra_class_deviation_pos: float = float("nan")
    intra_class_deviation_neg: float = float("nan")
    pseudo_label_precision: float = float("nan")
    pseudo_label_recall: float = float("nan")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DiceCalibration:
    a: float
    b: float

    def __post_init__(self):
        if not (-5 <= self.a <= 5 and 0.1 <= self.b <= 10):
            raise ConfigError(f"calibration (a={self.a}, b={self.b}) outside a in [-5,5], b in [0.1,10]")


def _arrays(labels, scores):
    y = np.asarray(labels).astype(np.int64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ValueError(f"{y.size} labels for {s.size} scores")
    return y, s


def roc_auc(labels, scores):
    """Mann-Whitney estimate of ROC AUC; tied pairs count one half."""
    y, s = _arrays(labels, scores)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both classes")
    ranks = rankdata(s)
    u = np.sum(ranks[y == 1]) - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(y, s):
    """True/false positive counts when predicting ``score >= t`` for each distinct t (descending)."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted == 1)
    fp = np.cumsum(y_sorted == 0)
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), len(s_sorted) - 1]
    return s_sorted[last], tp[last], fp[last]


def aupr(labels, scores):
    """Area under the precision-recall curve by step interpolation (average precision)."""
    y, s = _arrays(labels, scores)
    n_pos = int(np.sum(y == 1))
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    _, tp, fp = _threshold_counts(y, s)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def max_f1(labels, scores):
    """Best F1 of the rule ``score >= t`` over observed scores; lowest t on ties."""
    y, s = _arrays(labels, scores)
    n_pos = int(np.sum(y == 1))
    if n_pos == 0:
        raise UndefinedMetricError("F1 needs at least one positive")
    thr, tp, fp = _threshold_counts(y, s)
    f1 = 2.0 * tp / (2.0 * tp + fp + (n_pos - tp))
    best = np.max(f1)
    # thresholds are descending, so the last maximiser is the lowest threshold
    i = int(np.flatnonzero(f1 == best)[-1])
    return float(best), float(thr[i])


def dice_score(labels, probs):
    y, p = _arrays(labels, probs)
    denom = np.sum(y) + np.sum(p)
    if denom == 0:
        return 1.0
    return float(2.0 * np.sum(y * p) / denom)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def calibrated_probs(scores, cal):
    return _sigmoid(cal.a * np.asarray(scores, dtype=np.float64) + cal.b)


def dice_grid(labels, scores, a_grid=DICE_A_GRID, b_grid=DICE_B_GRID):
    """Dice of sigma(a s + b) for every grid point; shape (len(a_grid), len(b_grid))."""
    y, s = _arrays(labels, scores)
    out = np.empty((len(a_grid), len(b_grid)))
    sy = np.sum(y)
    for i, a in enumerate(a_grid):
        p = _sigmoid(a * s[None, :] + b_grid[:, None])
        out[i] = 2.0 * (p @ y) / (sy + p.sum(axis=1))
    return out


def dice_calibrated(labels, scores, val_labels, val_scores):
    """Test Dice after choosing (a, b) to maximise validation Dice on a fixed grid.

    Returns ``(test_dice, DiceCalibration, best_validation_dice)``.
    """
    vy, vs = _arrays(val_labels, val_scores)
    if vy.size == 0 or np.sum(vy) == 0:
        raise ConfigError("Dice calibration needs a validation set with at least one positive")
    grid = dice_grid(vy, vs)
    i, j = np.unravel_index(int(np.argmax(grid)), grid.shape)
    cal = DiceCalibration(float(DICE_A_GRID[i]), float(DICE_B_GRID[j]))
    return dice_score(labels, calibrated_probs(scores, cal)), cal, float(grid[i, j])


def iou(labels, preds):
    y = np.asarray(labels).astype(bool).ravel()
    p = np.asarray(preds).astype(bool).ravel()
    union = np.sum(y | p)
    if union == 0:
        return 1.0
    return float(np.sum(y & p) / union)


def spectral_norm_sym(a, tol=1e-10, max_iter=200_000, seed=0):
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Iterates until the residual ||A v - lambda v|| falls below tol * lambda.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if n == 0:
        return 0.0
    scale = np.max(np.abs(a))
    if scale == 0:
        return 0.0
    b = a / scale
    v = np.random.default_rng(seed).normal(size=n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = b @ v
        lam = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        if np.linalg.norm(w - lam * v) <= tol * max(lam, 1e-300):
            break
        v = w / nw
    return lam * scale


def class_stats(features, labels):
    """(||mu_pos - mu_neg||, sqrt(lambda_max(Cov_pos)), sqrt(lambda_max(Cov_neg))).

    Covariances use the population (N_c) normalisation.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64).ravel()
    out = []
    for c in (1, 0):
        xc = x[y == c]
        if len(xc) == 0:
            raise UndefinedMetricError(f"class {c} has no samples")
        mu = xc.mean(axis=0)
        centred = xc - mu
        cov = centred.T @ centred / len(xc)
        out.append((mu, float(np.sqrt(max(spectral_norm_sym(cov), 0.0)))))
    (mu_p, dev_p), (mu_n, dev_n) = out
    return float(np.linalg.norm(mu_p - mu_n)), dev_p, dev_n


def pseudo_quality(true_labels, pseudo_labels, selected_ids=None):
    """Precision and recall of positive pseudo labels over the selected instances.

    With no positive pseudo labels the precision is defined as 1.
    """
    t = np.asarray(true_labels).astype(np.int64)
    p = np.asarray(pseudo_labels).astype(np.int64)
    if selected_ids is not None:
        sel = np.asarray(selected_ids, dtype=np.int64)
        t, p = t[sel], p[sel]
    tp = int(np.sum((t == 1) & (p == 1)))
    n_pred = int(np.sum(p == 1))
    n_true = int(np.sum(t == 1))
    precision = tp / n_pred if n_pred else 1.0
    recall = tp / n_true if n_true else 0.0
    return precision, recall
