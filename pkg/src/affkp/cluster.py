"""From per-point labels and offsets to keypoint quadruplets.

Points of each affordance label are split into instances by Euclidean
connected components; every member point then casts one vote per keypoint
slot (its position plus its predicted offset) and mean shift picks the
densest mode of each slot's votes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import kernels
from . import labels as L
from .errors import ConfigError, DataError
from .instances import AffordanceInstance


@dataclass
class ClusterConfig:
    separation_distance: float = 0.03
    min_points: int = 20
    bandwidth: float = 0.02
    kernel: str = "gaussian"
    tolerance: float = 1e-5
    max_iterations: int = 200
    merge_radius: float | None = None  # defaults to bandwidth / 2
    max_seeds: int = 500

    def __post_init__(self):
        if self.merge_radius is None:
            self.merge_radius = self.bandwidth / 2
        if self.kernel not in ("gaussian", "flat"):
            raise ConfigError(f"kernel must be 'gaussian' or 'flat', got {self.kernel!r}")
        for name in ("separation_distance", "bandwidth", "tolerance", "merge_radius"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.min_points < 1 or self.max_iterations < 1 or self.max_seeds < 1:
            raise ConfigError("min_points, max_iterations and max_seeds must be >= 1")

    @property
    def kernel_id(self) -> int:
        return kernels.GAUSSIAN if self.kernel == "gaussian" else kernels.FLAT


@dataclass
class MeanShiftResult:
    mode: np.ndarray
    converged: bool
    iterations: int
    modes: np.ndarray = field(repr=False, default=None)  # all merged modes
    counts: np.ndarray = field(repr=False, default=None)  # basin population per mode


def _xyz(cloud):
    return np.asarray(cloud.xyz if hasattr(cloud, "xyz") else cloud, dtype=np.float64)


def separate_instances(cloud, labels, cfg: ClusterConfig) -> list:
    """Connected components of each nonzero label under the epsilon-ball graph.

    Returns ``(label, sorted point indices)`` pairs ordered by label and then
    by smallest member index; components below ``cfg.min_points`` are dropped.
    """
    xyz = _xyz(cloud)
    labels = np.asarray(labels)
    if labels.shape != (len(xyz),):
        raise DataError(f"{len(labels)} labels for {len(xyz)} points")
    out = []
    for lab in L.AFFORDANCE_IDS:
        idx = np.flatnonzero(labels == lab)
        if idx.size < cfg.min_points:
            continue
        pairs = cKDTree(xyz[idx]).query_pairs(cfg.separation_distance, output_type="ndarray")
        n = idx.size
        graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        n_comp, comp = connected_components(graph, directed=False)
        groups = [idx[comp == c] for c in range(n_comp)]
        groups = sorted((g for g in groups if g.size >= cfg.min_points), key=lambda g: g[0])
        out.extend((lab, g) for g in groups)
    return out


def vote(cloud, members, offsets) -> np.ndarray:
    """Votes ``x_i + of_i^j`` for every member i, shaped (4, |members|, 3)."""
    members = np.asarray(members, dtype=np.int64)
    if members.size == 0:
        raise DataError("cannot vote with an empty instance")
    xyz = _xyz(cloud)
    off = np.asarray(offsets, dtype=np.float64)
    v = xyz[members, None, :] + off[members]
    return np.transpose(v, (1, 0, 2))


def mean_shift(votes, cfg: ClusterConfig) -> MeanShiftResult:
    """Densest mode of a vote set.

    Every vote (or an evenly strided subset of the lexicographically sorted
    votes when there are more than ``cfg.max_seeds``) is shifted to
    convergence; end points closer than ``cfg.merge_radius`` are merged and
    the mode reached from the most seeds wins, ties going to the
    lexicographically smallest mode.
    """
    votes = np.asarray(votes, dtype=np.float64).reshape(-1, 3)
    if len(votes) == 0:
        raise DataError("mean shift needs at least one vote")
    if len(votes) == 1:
        return MeanShiftResult(votes[0].copy(), True, 0, votes.copy(), np.array([1]))
    order = np.lexsort(votes.T[::-1])
    votes = votes[order]
    stride = int(np.ceil(len(votes) / cfg.max_seeds))
    seeds = votes[::stride]
    ends, iters, conv = kernels.mean_shift_seeds(votes, seeds, cfg.bandwidth, cfg.kernel_id,
                                                 cfg.tolerance, cfg.max_iterations)
    modes, members = [], []
    for i, p in enumerate(ends):
        for m, pts in zip(modes, members):
            if np.linalg.norm(p - m) <= cfg.merge_radius:
                pts.append(i)
                break
        else:
            modes.append(p)
            members.append([i])
    centres = np.array([ends[m].mean(axis=0) for m in members])
    counts = np.array([len(m) for m in members])
    best = counts == counts.max()
    cand = np.flatnonzero(best)
    pick = cand[np.lexsort(centres[cand].T[::-1])[0]]
    return MeanShiftResult(centres[pick], bool(conv.all()), int(iters.max()), centres, counts)


def extract_quadruplets(cloud, labels, offsets, cfg: ClusterConfig) -> list:
    """Separate instances, vote and pick one mode per keypoint slot.

    Instances come back sorted by (label, centroid lexicographic) with ids
    renumbered in that order.
    """
    xyz = _xyz(cloud)
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != (len(xyz), 4, 3):
        raise DataError(f"offsets must be (N, 4, 3) for N={len(xyz)}, got {offsets.shape}")
    found = []
    for lab, members in separate_instances(xyz, labels, cfg):
        v = vote(xyz, members, offsets)
        kps, warns = [], []
        for j in range(4):
            res = mean_shift(v[j], cfg)
            kps.append(res.mode)
            if not res.converged:
                warns.append(f"mean shift for slot {j + 1} hit {cfg.max_iterations} iterations")
        found.append(AffordanceInstance(0, lab, members, np.array(kps), votes=v, warnings=warns))
    found.sort(key=lambda inst: (inst.affordance, *inst.centroid))
    for i, inst in enumerate(found):
        inst.id = i
    return found
