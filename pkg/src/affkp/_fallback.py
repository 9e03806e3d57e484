"""Pure numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` exactly in their decisions (pixel rounding,
tie-breaking, convergence test); floating-point sums may differ in the last
bits because numpy reduces in a different order.
"""

from __future__ import annotations

import numpy as np

GAUSSIAN = 0
FLAT = 1


def zbuffer(u, v, z, width, height):
    """Index of the nearest sample per pixel, ``-1`` where nothing landed.

    Samples are rounded to the nearest pixel centre. Ties in depth go to the
    lowest sample index.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    out = np.full(width * height, -1, dtype=np.int64)
    pu = np.floor(u + 0.5)
    pv = np.floor(v + 0.5)
    ok = (z > 0) & (pu >= 0) & (pu < width) & (pv >= 0) & (pv < height)
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return out
    pix = pv[idx].astype(np.int64) * width + pu[idx].astype(np.int64)
    order = np.lexsort((idx, z[idx], pix))
    pix_sorted = pix[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    out[pix_sorted[first]] = idx[order[first]]
    return out


def mean_shift_seeds(votes, seeds, bandwidth, kernel, tol, max_iter):
    """Run mean shift from every seed; returns (modes, iterations, converged)."""
    votes = np.ascontiguousarray(votes, dtype=np.float64)
    y = np.array(seeds, dtype=np.float64, copy=True)
    n_seed = y.shape[0]
    n_iter = np.zeros(n_seed, dtype=np.int64)
    converged = np.zeros(n_seed, dtype=bool)
    active = np.arange(n_seed)
    inv_h2 = 1.0 / (bandwidth * bandwidth)
    for _ in range(max_iter):
        if active.size == 0:
            break
        cur = y[active]
        d2 = ((cur[:, None, :] - votes[None, :, :]) ** 2).sum(axis=2) * inv_h2
        if kernel == GAUSSIAN:
            w = np.exp(-0.5 * d2)
        else:
            w = (d2 <= 1.0).astype(np.float64)
        wsum = w.sum(axis=1)
        good = wsum > 0
        new = cur.copy()
        new[good] = (w[good] @ votes) / wsum[good, None]
        step = np.sqrt(((new - cur) ** 2).sum(axis=1))
        y[active] = new
        n_iter[active] += 1
        done = (step < tol) | ~good
        converged[active[done]] = True
        active = active[~done]
    return y, n_iter, converged


def neighbour_max(p, rel, wp, nbr):
    """Per channel, max over neighbours j of ``p[nbr[i, j]] + rel[i, j] @ wp`` and its argmax j."""
    z = p[nbr] + rel @ wp.astype(p.dtype)
    arg = np.argmax(z, axis=1)
    zmax = np.take_along_axis(z, arg[:, None, :], axis=1)[:, 0, :]
    return zmax, arg


def neighbour_max_backward(dz, arg, nbr, rel):
    """Gradients w.r.t. ``p`` and ``wp`` of :func:`neighbour_max` given ``d zmax``."""
    n, d = dz.shape
    src = np.take_along_axis(nbr, arg, axis=1)
    flat = (src * d + np.arange(d)[None, :]).ravel()
    dp = np.bincount(flat, weights=dz.ravel().astype(np.float64), minlength=n * d).reshape(n, d)
    rel_sel = rel[np.arange(n)[:, None], arg]
    dwp = np.einsum("ndc,nd->cd", rel_sel.astype(np.float64), dz.astype(np.float64))
    return dp, dwp
