"""Brute-force reference implementations used only by the tests."""

from collections import deque
from itertools import product

import numpy as np


def composite_pixelwise(clean, pattern, mask, phi):
    H, W, _ = clean.shape
    out = np.empty_like(clean)
    for i, j, c in product(range(H), range(W), range(3)):
        m = 1.0 if mask[i, j] else 0.0
        out[i, j, c] = clean[i, j, c] * (1 - m) + ((1 - phi) * clean[i, j, c] + phi * pattern[i, j, c]) * m
    return out


def auroc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def ap_ranks(scores, labels):
    """Mean over positives of the precision at that positive's score."""
    n_pos = sum(labels)
    total = 0.0
    for s, y in zip(scores, labels):
        if y == 1:
            above = [l for t, l in zip(scores, labels) if t >= s]
            total += sum(above) / len(above)
    return total / n_pos


def f1_enumerate(scores, labels):
    best, best_t = -1.0, None
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        fn = sum(labels) - tp
        f1 = 2 * tp / (2 * tp + fp + fn)
        if f1 >= best - 1e-12:
            best, best_t = max(best, f1), t
    return best, best_t


def regions_bfs(mask):
    H, W = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    regions = []
    for i in range(H):
        for j in range(W):
            if mask[i, j] and not seen[i, j]:
                comp, q = [], deque([(i, j)])
                seen[i, j] = True
                while q:
                    a, b = q.popleft()
                    comp.append((a, b))
                    for da in (-1, 0, 1):
                        for db in (-1, 0, 1):
                            x, y = a + da, b + db
                            if 0 <= x < H and 0 <= y < W and mask[x, y] and not seen[x, y]:
                                seen[x, y] = True
                                q.append((x, y))
                regions.append(comp)
    return regions


def aupro_sweep(maps, masks, cap):
    """Threshold sweep: positives are pixels strictly above t, t over every observed score."""
    regions = [(k, r) for k, m in enumerate(masks) for r in regions_bfs(np.asarray(m, bool))]
    n_neg = sum(int((~np.asarray(m, bool)).sum()) for m in masks)
    thresholds = sorted({float(v) for m in maps for v in np.asarray(m).ravel()}, reverse=True)
    pts = []
    for t in thresholds:
        pred = [np.asarray(m) > t for m in maps]
        fp = sum(int((p & ~np.asarray(g, bool)).sum()) for p, g in zip(pred, masks))
        pro = np.mean([np.mean([pred[k][a, b] for a, b in r]) for k, r in regions])
        pts.append((fp / n_neg, float(pro)))
    # area of the piecewise-linear curve on [0, cap], held flat after the last point
    area, (x0, y0) = 0.0, pts[0]
    for x1, y1 in pts[1:] + [(np.inf, pts[-1][1])]:
        if x0 >= cap:
            break
        if x1 == np.inf:
            area += (cap - x0) * y0
            break
        xe = min(x1, cap)
        ye = y1 if x1 <= cap else y0 + (y1 - y0) * (cap - x0) / (x1 - x0)
        area += (xe - x0) * (y0 + ye) / 2
        x0, y0 = x1, y1
    return area / cap
