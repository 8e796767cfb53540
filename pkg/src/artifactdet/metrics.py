"""Threshold-free detection metrics over exact observed-score candidate sets."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _prepare(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic: P(s+ > s-) + 0.5 P(s+ == s-)."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _threshold_counts(s: np.ndarray, y: np.ndarray):
    """Cumulative (tp, fp) when predicting positive for score >= t, t over distinct scores, descending."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    return s[ends], tp.astype(np.float64), fp.astype(np.float64)


def average_precision(scores, labels) -> float:
    """Step-wise AP: sum of precision times recall increment at each distinct threshold."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    _, tp, fp = _threshold_counts(s, y)
    precision = tp / (tp + fp)
    recall_step = np.diff(np.r_[0.0, tp]) / n_pos
    return float(np.sum(precision * recall_step))


def f1_max(scores, labels) -> tuple[float, float]:
    """Best F1 over thresholds at observed scores (positive iff score >= t).

    Returns (F1, threshold); on ties the lowest threshold wins.
    """
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("F1-max needs at least one positive")
    thr, tp, fp = _threshold_counts(s, y)
    f1 = 2.0 * tp / (2.0 * tp + fp + (n_pos - tp))
    best = f1.max()
    idx = np.nonzero(f1 >= best - 1e-12)[0][-1]
    return float(f1[idx]), float(thr[idx])


def _capped_area(fpr: np.ndarray, pro: np.ndarray, cap: float) -> float:
    """Trapezoid area under a monotone curve on [0, cap], normalised by cap.

    Beyond the last point the curve is held flat; a segment crossing the
    cap is cut by linear interpolation.
    """
    inside = fpr <= cap
    x, y = fpr[inside], pro[inside]
    if (~inside).any():
        k = np.argmax(~inside)
        x0, y0, x1, y1 = fpr[k - 1], pro[k - 1], fpr[k], pro[k]
        y_cap = y0 + (y1 - y0) * (cap - x0) / (x1 - x0)
        x, y = np.r_[x, cap], np.r_[y, y_cap]
    elif x[-1] < cap:
        x, y = np.r_[x, cap], np.r_[y, y[-1]]
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0) / cap)


def pro_curve(anomaly_maps: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]
              ) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, mean per-region overlap) with positives = score > t, t over observed scores.

    The first point, t = max score, is always (0, 0).
    """
    maps = [np.asarray(m, dtype=np.float64) for m in anomaly_maps]
    masks = [np.asarray(g).astype(bool) for g in gt_masks]
    if len(maps) != len(masks) or any(m.shape != g.shape for m, g in zip(maps, masks)):
        raise ValueError("anomaly maps and masks must pair up with equal shapes")

    scores, pro_w, fpr_w = [], [], []
    region_sizes = []
    for m, g in zip(maps, masks):
        lab, n = ndimage.label(g, structure=EIGHT_CONNECTED)
        sizes = np.bincount(lab.ravel(), minlength=n + 1)
        region_sizes.append(sizes[1:])
        w = np.zeros(lab.shape)
        w[g] = 1.0 / sizes[lab[g]]
        scores.append(m.ravel())
        pro_w.append(w.ravel())
        fpr_w.append((~g).ravel().astype(np.float64))
    n_regions = sum(len(r) for r in region_sizes)
    if n_regions == 0:
        raise ValueError("AUPRO needs at least one ground-truth region")
    s = np.concatenate(scores)
    pro_w = np.concatenate(pro_w) / n_regions
    fpr_w = np.concatenate(fpr_w)
    n_neg = fpr_w.sum()
    if n_neg == 0:
        raise ValueError("AUPRO needs at least one negative pixel")
    fpr_w /= n_neg

    order = np.argsort(-s, kind="mergesort")
    s = s[order]
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    cum_pro = np.cumsum(pro_w[order])[ends]
    cum_fpr = np.cumsum(fpr_w[order])[ends]
    # at threshold u_j only groups strictly above u_j are positive
    fpr = np.r_[0.0, cum_fpr[:-1]]
    pro = np.r_[0.0, cum_pro[:-1]]
    return np.minimum(fpr, 1.0), np.minimum(pro, 1.0)


def aupro(anomaly_maps, gt_masks, fpr_cap: float = 0.3) -> float:
    if not 0.0 < fpr_cap <= 1.0:
        raise ValueError("fpr_cap must lie in (0, 1]")
    if isinstance(anomaly_maps, np.ndarray) and anomaly_maps.ndim == 2:
        anomaly_maps, gt_masks = [anomaly_maps], [gt_masks]
    fpr, pro = pro_curve(anomaly_maps, gt_masks)
    return min(1.0, max(0.0, _capped_area(fpr, pro, fpr_cap)))
