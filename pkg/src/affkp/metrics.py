"""Segmentation and keypoint metrics.

* weighted F-measure on point sets (distances in centimetres)
* ``d_aff`` normaliser, NMSE and PCK3D over matched quadruplets
* one-to-one quadruplet matching on centroid distance
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from . import labels as L
from .errors import ConfigError, DataError


@dataclass
class FMeasureConfig:
    beta: float = 1.0
    sigma_sq: float = 5.0
    alpha_w: float = math.log(0.5) / 5
    window_cm: float = 3.0
    # "proximity": background errors weighted exp(alpha_w * d), so errors near the
    # foreground count most; "margolin": the original 2 - exp(alpha_w * d)
    background_importance: str = "proximity"

    def __post_init__(self):
        if not self.beta > 0 or not self.sigma_sq > 0 or not self.window_cm > 0:
            raise ConfigError("beta, sigma_sq and window_cm must be positive")
        if self.background_importance not in ("proximity", "margolin"):
            raise ConfigError("background_importance must be 'proximity' or 'margolin'")


def _quad(q) -> np.ndarray:
    q = q.keypoints if hasattr(q, "keypoints") else q
    return np.asarray(q, dtype=np.float64).reshape(4, 3)


def weighted_fmeasure(pred_scores, gt_labels, affordance, cfg: FMeasureConfig, xyz) -> float | None:
    """Weighted F-measure of one class's confidence map against its GT mask.

    ``pred_scores`` is (N, 7) class confidences or an (N,) confidence for the
    class. Returns ``None`` when the GT has no point of this class.
    """
    aff = L.parse(affordance)
    if aff == L.BACKGROUND:
        raise DataError("weighted F-measure is defined for affordance classes only")
    pred = np.asarray(pred_scores, dtype=np.float64)
    if pred.ndim == 2:
        pred = pred[:, aff]
    gt = np.asarray(gt_labels) == aff
    pts = np.asarray(xyz, dtype=np.float64) * 100.0  # centimetres
    if not (len(pred) == len(gt) == len(pts)):
        raise DataError("scores, labels and points must align")
    if not gt.any():
        return None
    err = np.abs(pred - gt)
    fg = np.flatnonzero(gt)
    bg = np.flatnonzero(~gt)

    # each background point takes the error of its nearest foreground point
    dist = np.zeros(len(pts))
    et = err.copy()
    if bg.size:
        d, nn = cKDTree(pts[fg]).query(pts[bg])
        dist[bg] = d
        et[bg] = err[fg[nn]]

    # Gaussian-smoothed et, needed only on foreground points
    ea = np.empty(fg.size)
    tree = cKDTree(pts)
    for k, nb in enumerate(tree.query_ball_point(pts[fg], cfg.window_cm)):
        nb = np.asarray(nb)
        w = np.exp(-((pts[nb] - pts[fg[k]]) ** 2).sum(axis=1) / (2 * cfg.sigma_sq))
        ea[k] = (w * et[nb]).sum() / w.sum()
    min_e = err.copy()
    smaller = ea < err[fg]
    min_e[fg[smaller]] = ea[smaller]

    if cfg.background_importance == "proximity":
        weight = np.where(gt, 1.0, np.exp(cfg.alpha_w * dist))
    else:
        weight = np.where(gt, 1.0, 2.0 - np.exp(cfg.alpha_w * dist))
    ew = min_e * weight
    tpw = gt.sum() - ew[gt].sum()
    fpw = ew[~gt].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tpw / (tpw + fpw) if tpw + fpw > 0 else 0.0
    b2 = cfg.beta ** 2
    if precision + recall <= 0:
        return 0.0
    return float((1 + b2) * precision * recall / (b2 * precision + recall))


def d_aff(gt_quadruplets) -> float:
    """Mean distance of GT keypoints to their quadruplet centroid."""
    quads = [_quad(q) for q in gt_quadruplets]
    if not quads:
        raise DataError("d_aff needs at least one ground-truth quadruplet")
    q = np.stack(quads)
    return float(np.linalg.norm(q - q.mean(axis=1, keepdims=True), axis=2).mean())


def nmse(pairs, d: float) -> float:
    """Mean over matched pairs and slots of ``|kp - kp*| / d`` (not squared)."""
    if not d > 0:
        raise DataError("normaliser d must be positive")
    pairs = list(pairs)
    if not pairs:
        raise DataError("NMSE needs at least one matched pair")
    errs = [np.linalg.norm(_quad(p) - _quad(g), axis=1) for p, g in pairs]
    return float(np.mean(errs) / d)


def quadruplet_correct(pred, gt, d: float, threshold_frac: float = 0.3) -> bool:
    return bool(np.all(np.linalg.norm(_quad(pred) - _quad(gt), axis=1) <= threshold_frac * d))


def pck3d(pairs, n_unmatched_gt: int, d: float, threshold_frac: float = 0.3) -> float | None:
    """Percentage of GT quadruplets whose matched prediction has all four slots within the threshold."""
    if not d > 0:
        raise DataError("normaliser d must be positive")
    pairs = list(pairs)
    total = len(pairs) + int(n_unmatched_gt)
    if total == 0:
        return None
    correct = sum(quadruplet_correct(p, g, d, threshold_frac) for p, g in pairs)
    return 100.0 * correct / total


@dataclass
class Matching:
    pairs: list  # (pred index, gt index)
    unmatched_pred: list
    unmatched_gt: list


def match_quadruplets(pred, gt, gate: float) -> Matching:
    """Minimum-total-centroid-distance one-to-one matching, gated at ``gate``."""
    pc = np.array([_quad(q).mean(axis=0) for q in pred]).reshape(-1, 3)
    gc = np.array([_quad(q).mean(axis=0) for q in gt]).reshape(-1, 3)
    if len(pc) == 0 or len(gc) == 0:
        return Matching([], list(range(len(pc))), list(range(len(gc))))
    cost = np.linalg.norm(pc[:, None] - gc[None], axis=2)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if cost[r, c] <= gate]
    used_p = {p for p, _ in pairs}
    used_g = {g for _, g in pairs}
    return Matching(pairs, [i for i in range(len(pc)) if i not in used_p],
                    [j for j in range(len(gc)) if j not in used_g])


# --- report ------------------------------------------------------------------------

@dataclass
class AffordanceMetrics:
    affordance: str
    f_measure: float | None
    nmse: float | None
    pck: float | None
    d_aff: float | None
    c_aff: int
    c_correct: int
    degenerate: bool = False


@dataclass
class MetricsReport:
    per_affordance: list = field(default_factory=list)
    macro: dict = field(default_factory=dict)
    threshold_frac: float = 0.3

    def to_dict(self) -> dict:
        return {"per_affordance": [vars(m) for m in self.per_affordance], "macro": self.macro,
                "threshold_frac": self.threshold_frac}

    def row(self, name: str) -> AffordanceMetrics:
        for m in self.per_affordance:
            if m.affordance == name:
                return m
        raise KeyError(name)

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "metrics.json").write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")
        with open(d / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["affordance", "F", "NMSE", "PCK@0.3"])
            fmt = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
            for m in self.per_affordance:
                w.writerow([m.affordance, fmt(m.f_measure), fmt(m.nmse), fmt(m.pck)])
            w.writerow(["mean", fmt(self.macro.get("f_measure")), fmt(self.macro.get("nmse")),
                        fmt(self.macro.get("pck"))])


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def evaluate(items, fcfg: FMeasureConfig | None = None, threshold_frac: float = 0.3) -> MetricsReport:
    """Aggregate metrics over a test set.

    ``items`` yields ``(xyz, gt_labels, gt_instances, pred_scores, pred_instances)``
    per scene; ``pred_scores`` may be ``None`` to skip the F-measure.
    F is averaged over scenes containing the class; keypoint metrics pool
    every instance of the class across the set.
    """
    fcfg = fcfg or FMeasureConfig()
    f_vals = {a: [] for a in L.AFFORDANCE_IDS}
    per_scene = []
    for xyz, gt_labels, gt_inst, scores, pred_inst in items:
        for a in L.AFFORDANCE_IDS:
            if scores is not None:
                v = weighted_fmeasure(scores, gt_labels, a, fcfg, xyz)
                if v is not None:
                    f_vals[a].append(v)
        per_scene.append((gt_inst, pred_inst))

    rows = []
    for a in L.AFFORDANCE_IDS:
        gts = [[g for g in gi if g.affordance == a] for gi, _ in per_scene]
        preds = [[p for p in pi if p.affordance == a] for _, pi in per_scene]
        all_gt = [g for s in gts for g in s]
        if not all_gt:
            rows.append(AffordanceMetrics(L.name_of(a), _mean(f_vals[a]), None, None, None, 0, 0))
            continue
        d = d_aff(all_gt)
        if d <= 0:
            rows.append(AffordanceMetrics(L.name_of(a), _mean(f_vals[a]), None, None, d, len(all_gt), 0, True))
            continue
        pairs, unmatched = [], 0
        for g_list, p_list in zip(gts, preds):
            m = match_quadruplets(p_list, g_list, d)
            pairs.extend((p_list[i], g_list[j]) for i, j in m.pairs)
            unmatched += len(m.unmatched_gt)
        correct = sum(quadruplet_correct(p, g, d, threshold_frac) for p, g in pairs)
        rows.append(AffordanceMetrics(
            L.name_of(a), _mean(f_vals[a]), nmse(pairs, d) if pairs else None,
            pck3d(pairs, unmatched, d, threshold_frac), d, len(all_gt), int(correct)))
    present = [r for r in rows if r.c_aff > 0 or r.f_measure is not None]
    macro = {"f_measure": _mean(r.f_measure for r in present), "nmse": _mean(r.nmse for r in present),
             "pck": _mean(r.pck for r in present)}
    c_aff = sum(r.c_aff for r in rows)
    macro["pck_pooled"] = 100.0 * sum(r.c_correct for r in rows) / c_aff if c_aff else None
    return MetricsReport(rows, macro, threshold_frac)
