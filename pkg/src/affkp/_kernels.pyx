# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the z-buffer and mean-shift inner loops."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, sqrt

cnp.import_array()


def zbuffer(u, v, z, Py_ssize_t width, Py_ssize_t height):
    cdef const double[:] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef const double[:] vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef const double[:] zz = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t n = uu.shape[0]
    out_arr = np.full(width * height, -1, dtype=np.int64)
    best_arr = np.full(width * height, np.inf, dtype=np.float64)
    cdef long long[:] out = out_arr
    cdef double[:] best = best_arr
    cdef Py_ssize_t i, pu, pv, p
    cdef double fu, fv
    for i in range(n):
        if not zz[i] > 0:
            continue
        fu = floor(uu[i] + 0.5)
        fv = floor(vv[i] + 0.5)
        if fu < 0 or fv < 0 or fu >= width or fv >= height:
            continue
        pu = <Py_ssize_t>fu
        pv = <Py_ssize_t>fv
        p = pv * width + pu
        if zz[i] < best[p]:
            best[p] = zz[i]
            out[p] = i
    return out_arr


def mean_shift_seeds(votes, seeds, double bandwidth, int kernel, double tol, int max_iter):
    cdef const double[:, :] vt = np.ascontiguousarray(votes, dtype=np.float64)
    y_arr = np.array(seeds, dtype=np.float64, copy=True, order="C")
    cdef double[:, :] y = y_arr
    cdef Py_ssize_t n_seed = y.shape[0]
    cdef Py_ssize_t n_vote = vt.shape[0]
    it_arr = np.zeros(n_seed, dtype=np.int64)
    conv_arr = np.zeros(n_seed, dtype=np.uint8)
    cdef long long[:] n_iter = it_arr
    cdef unsigned char[:] conv = conv_arr
    cdef double inv_h2 = 1.0 / (bandwidth * bandwidth)
    cdef Py_ssize_t s, j, it
    cdef double cx, cy, cz, sx, sy, sz, ws, w, dx, dy, dz, d2, nx, ny, nz, step
    for s in range(n_seed):
        cx = y[s, 0]
        cy = y[s, 1]
        cz = y[s, 2]
        for it in range(max_iter):
            sx = 0.0
            sy = 0.0
            sz = 0.0
            ws = 0.0
            for j in range(n_vote):
                dx = cx - vt[j, 0]
                dy = cy - vt[j, 1]
                dz = cz - vt[j, 2]
                d2 = (dx * dx + dy * dy + dz * dz) * inv_h2
                if kernel == 0:
                    w = exp(-0.5 * d2)
                elif d2 <= 1.0:
                    w = 1.0
                else:
                    w = 0.0
                sx += w * vt[j, 0]
                sy += w * vt[j, 1]
                sz += w * vt[j, 2]
                ws += w
            n_iter[s] += 1
            if ws <= 0:
                conv[s] = 1
                break
            nx = sx / ws
            ny = sy / ws
            nz = sz / ws
            step = sqrt((nx - cx) * (nx - cx) + (ny - cy) * (ny - cy) + (nz - cz) * (nz - cz))
            cx = nx
            cy = ny
            cz = nz
            if step < tol:
                conv[s] = 1
                break
        y[s, 0] = cx
        y[s, 1] = cy
        y[s, 2] = cz
    return y_arr, it_arr, conv_arr.astype(bool)


ctypedef fused real:
    float
    double


def _neighbour_max(const real[:, ::1] p, const real[:, :, ::1] rel, const real[:, ::1] wp,
                   const long long[:, ::1] nbr, real[:, ::1] zmax, long long[:, ::1] arg):
    cdef Py_ssize_t n = nbr.shape[0], k = nbr.shape[1], d = p.shape[1]
    cdef Py_ssize_t i, j, c, src
    cdef real z, r0, r1, r2
    cdef real *zrow
    cdef long long *arow
    cdef const real *prow
    for i in range(n):
        zrow = &zmax[i, 0]
        arow = &arg[i, 0]
        for j in range(k):
            src = nbr[i, j]
            prow = &p[src, 0]
            r0 = rel[i, j, 0]
            r1 = rel[i, j, 1]
            r2 = rel[i, j, 2]
            if j == 0:
                for c in range(d):
                    zrow[c] = prow[c] + r0 * wp[0, c] + r1 * wp[1, c] + r2 * wp[2, c]
                    arow[c] = 0
                continue
            for c in range(d):
                z = prow[c] + r0 * wp[0, c] + r1 * wp[1, c] + r2 * wp[2, c]
                if z > zrow[c]:
                    zrow[c] = z
                    arow[c] = j


def neighbour_max(p, rel, wp, nbr):
    """Per channel, max over neighbours j of ``p[nbr[i, j]] + rel[i, j] @ wp`` and its argmax j."""
    dtype = np.asarray(p).dtype
    p = np.ascontiguousarray(p)
    rel = np.ascontiguousarray(rel, dtype=dtype)
    wp = np.ascontiguousarray(wp, dtype=dtype)
    nbr = np.ascontiguousarray(nbr, dtype=np.int64)
    zmax = np.empty((nbr.shape[0], p.shape[1]), dtype=dtype)
    arg = np.empty((nbr.shape[0], p.shape[1]), dtype=np.int64)
    _neighbour_max(p, rel, wp, nbr, zmax, arg)
    return zmax, arg


def _neighbour_max_backward(const real[:, :] dz, const long long[:, :] arg, const long long[:, :] nbr,
                            const real[:, :, :] rel, double[:, :] dp, double[:, :] dwp):
    cdef Py_ssize_t n = dz.shape[0], d = dz.shape[1]
    cdef Py_ssize_t i, c, j
    cdef double g
    for i in range(n):
        for c in range(d):
            g = dz[i, c]
            if g == 0:
                continue
            j = arg[i, c]
            dp[nbr[i, j], c] += g
            dwp[0, c] += g * rel[i, j, 0]
            dwp[1, c] += g * rel[i, j, 1]
            dwp[2, c] += g * rel[i, j, 2]


def neighbour_max_backward(dz, arg, nbr, rel):
    """Gradients w.r.t. ``p`` and ``wp`` of :func:`neighbour_max` given ``d zmax``."""
    dtype = np.asarray(dz).dtype
    dz = np.ascontiguousarray(dz)
    rel = np.ascontiguousarray(rel, dtype=dtype)
    arg = np.ascontiguousarray(arg, dtype=np.int64)
    nbr = np.ascontiguousarray(nbr, dtype=np.int64)
    dp = np.zeros((dz.shape[0], dz.shape[1]), dtype=np.float64)
    dwp = np.zeros((3, dz.shape[1]), dtype=np.float64)
    _neighbour_max_backward(dz, arg, nbr, rel, dp, dwp)
    return dp, dwp
