"""Parametric surface patches sampled on regular grids, plus solid queries.

All functions work in an object-local frame with z up; every sampler
returns ``(points, normals)`` with outward-facing (visible-side) normals.
"""

from __future__ import annotations

import math

import numpy as np


def _count(length: float, spacing: float) -> int:
    return max(1, int(math.ceil(length / spacing - 1e-9)))


def _cells(lo: float, hi: float, spacing: float) -> np.ndarray:
    n = _count(hi - lo, spacing)
    return lo + (np.arange(n) + 0.5) * (hi - lo) / n


def box_faces(lo, hi, spacing: float, skip_bottom: bool = True):
    """Sample the faces of an axis-aligned box."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    pts, nrm = [], []
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        ua = _cells(lo[a], hi[a], spacing)
        ub = _cells(lo[b], hi[b], spacing)
        ga, gb = np.meshgrid(ua, ub, indexing="ij")
        for side, value in ((-1.0, lo[axis]), (1.0, hi[axis])):
            if skip_bottom and axis == 2 and side < 0:
                continue
            p = np.zeros((ga.size, 3))
            p[:, a] = ga.ravel()
            p[:, b] = gb.ravel()
            p[:, axis] = value
            n = np.zeros_like(p)
            n[:, axis] = side
            pts.append(p)
            nrm.append(n)
    return np.concatenate(pts), np.concatenate(nrm)


def cylinder_side(radius: float, z0: float, z1: float, spacing: float, inward: bool = False):
    """Vertical cylinder wall around the local z axis."""
    n_t = _count(2 * math.pi * radius, spacing)
    theta = (np.arange(n_t) + 0.5) * 2 * math.pi / n_t
    zs = _cells(z0, z1, spacing)
    tt, zz = np.meshgrid(theta, zs, indexing="ij")
    c, s = np.cos(tt.ravel()), np.sin(tt.ravel())
    p = np.column_stack([radius * c, radius * s, zz.ravel()])
    n = np.column_stack([c, s, np.zeros_like(c)])
    return p, (-n if inward else n)


def annulus(r_in: float, r_out: float, z: float, spacing: float, up: bool = True):
    """Flat ring (or disc when ``r_in == 0``) at height ``z``."""
    pts = []
    for r in _cells(r_in, r_out, spacing):
        n_t = _count(2 * math.pi * r, spacing)
        theta = (np.arange(n_t) + 0.5) * 2 * math.pi / n_t
        pts.append(np.column_stack([r * np.cos(theta), r * np.sin(theta), np.full(n_t, z)]))
    p = np.concatenate(pts)
    n = np.zeros_like(p)
    n[:, 2] = 1.0 if up else -1.0
    return p, n


def sphere_zone(radius: float, polar0: float, polar1: float, spacing: float, inward: bool = False):
    """Zone of a sphere centred at the origin between two polar angles.

    Polar angle is measured from +z, so ``(0, pi)`` is the full sphere and
    ``(pi/2, pi)`` the lower hemisphere.
    """
    pts = []
    for phi in _cells(polar0, polar1, spacing / radius):
        ring = radius * math.sin(phi)
        n_t = _count(2 * math.pi * ring, spacing)
        theta = (np.arange(n_t) + 0.5) * 2 * math.pi / n_t
        d = np.column_stack([
            math.sin(phi) * np.cos(theta), math.sin(phi) * np.sin(theta), np.full(n_t, math.cos(phi)),
        ])
        pts.append(d)
    d = np.concatenate(pts)
    return radius * d, (-d if inward else d)


def rotation_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# --- solid queries used by the task simulator --------------------------------

def box_distance(p, lo, hi) -> np.ndarray:
    """Euclidean distance from points to an axis-aligned box (0 inside)."""
    p = np.atleast_2d(p)
    d = np.maximum(np.maximum(np.asarray(lo) - p, p - np.asarray(hi)), 0.0)
    return np.linalg.norm(d, axis=1)


def box_width_along(direction, lo, hi) -> float:
    """Extent of a box projected onto a unit direction."""
    size = np.asarray(hi, dtype=float) - np.asarray(lo, dtype=float)
    return float(np.abs(np.asarray(direction, dtype=float)) @ size)


def cylinder_distance(p, radius: float, z0: float, z1: float) -> np.ndarray:
    """Distance to a solid vertical cylinder around the local z axis."""
    p = np.atleast_2d(p)
    radial = np.maximum(np.hypot(p[:, 0], p[:, 1]) - radius, 0.0)
    axial = np.maximum(np.maximum(z0 - p[:, 2], p[:, 2] - z1), 0.0)
    return np.hypot(radial, axial)


def cylinder_width_along(direction, radius: float, height: float) -> float:
    d = np.asarray(direction, dtype=float)
    horiz = math.hypot(d[0], d[1])
    return float(2 * radius * horiz + height * abs(d[2]))


def sphere_distance(p, centre, radius: float) -> np.ndarray:
    p = np.atleast_2d(p)
    return np.maximum(np.linalg.norm(p - np.asarray(centre), axis=1) - radius, 0.0)
