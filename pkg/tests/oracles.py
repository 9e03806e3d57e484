"""Independent brute-force oracles shared by module and acceptance tests."""

from __future__ import annotations

import math

import numpy as np


def brute_fmeasure(conf, gt, xyz_m, beta=1.0, sigma_sq=5.0, alpha=math.log(0.5) / 5, window=3.0,
                   proximity=True):
    """Direct small-N transcription of the weighted F-measure on a point set (distances in cm)."""
    n = len(gt)
    p = [[100.0 * c for c in row] for row in xyz_m]

    def dist(i, j):
        return math.sqrt(sum((p[i][k] - p[j][k]) ** 2 for k in range(3)))

    e = [abs(conf[i] - (1.0 if gt[i] else 0.0)) for i in range(n)]
    fg = [i for i in range(n) if gt[i]]
    et, delta = list(e), [0.0] * n
    for i in range(n):
        if not gt[i]:
            j = min(fg, key=lambda f: (dist(i, f), f))
            et[i], delta[i] = e[j], dist(i, j)
    ew = [0.0] * n
    for i in range(n):
        if gt[i]:
            num = den = 0.0
            for j in range(n):
                if dist(i, j) <= window:
                    w = math.exp(-dist(i, j) ** 2 / (2 * sigma_sq))
                    num += w * et[j]
                    den += w
            ew[i] = min(e[i], num / den)
        else:
            b = math.exp(alpha * delta[i]) if proximity else 2 - math.exp(alpha * delta[i])
            ew[i] = e[i] * b
    tp = sum(1.0 - ew[i] for i in fg)
    fp = sum(ew[i] for i in range(n) if not gt[i])
    r = 1 - sum(ew[i] for i in fg) / len(fg)
    pr = tp / (tp + fp) if tp + fp > 0 else 0.0
    if pr + r <= 0:
        return 0.0
    return (1 + beta**2) * pr * r / (beta**2 * pr + r)


def _kde_argmax(grid, votes, bw):
    best, best_d = None, -1.0
    for chunk in np.array_split(grid, max(1, len(grid) // 4000)):
        d = np.exp(-0.5 * ((chunk[:, None] - votes[None]) ** 2).sum(-1) / bw**2).sum(-1)
        k = int(np.argmax(d))
        if d[k] > best_d:
            best, best_d = chunk[k], d[k]
    return best


def _grid(lo, hi, n):
    axes = [np.linspace(lo[i], hi[i], n) for i in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def kde_grid_mode(votes, bw, n=25, levels=2):
    """Gaussian KDE maximum by exhaustive grid search.

    A coarse grid covers the votes' bounding box padded by ``bw``; each
    further level searches a 21^3 grid spanning two cells of the previous
    level around its winner, ten times finer.
    """
    votes = np.asarray(votes, dtype=np.float64)
    lo, hi = votes.min(axis=0) - bw, votes.max(axis=0) + bw
    best = _kde_argmax(_grid(lo, hi, n), votes, bw)
    cell = (hi - lo) / (n - 1)
    for _ in range(levels):
        best = _kde_argmax(_grid(best - cell, best + cell, 21), votes, bw)
        cell = cell / 10
    return best
