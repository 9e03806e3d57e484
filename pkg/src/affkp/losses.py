"""Training objectives with analytic gradients.

``focal_loss`` and ``keypoint_offset_loss`` return ``(value, gradient)``;
gradients are taken with respect to the normalised class scores and the
predicted offsets respectively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import labels as L
from .errors import ConfigError, DataError

P_MIN = 1e-7


@dataclass
class LossConfig:
    gamma: float = 2.0
    alpha_vec: tuple = L.DEFAULT_ALPHA
    lambda_weight: float = 100.0
    learning_rate: float = 0.02
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 1
    # "points": divide the offset loss by every seed point; "region": by in-region points only
    offset_normalization: str = "points"
    optimizer: str = "momentum"
    adam_betas: tuple = (0.9, 0.999)
    grad_clip: float = 0.0
    # weight averaging: returned parameters are an exponential moving average of the iterates (0 = off)
    ema_decay: float = 0.0
    checkpoint_every: int = 50
    seed_points: int = 2048

    def __post_init__(self):
        self.alpha_vec = tuple(float(a) for a in self.alpha_vec)
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if len(self.alpha_vec) != L.NUM_CLASSES or min(self.alpha_vec) <= 0:
            raise ConfigError("alpha_vec needs 7 positive entries")
        if self.lambda_weight < 0:
            raise ConfigError("lambda_weight must be >= 0")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need learning_rate >= 0 and 0 <= momentum < 1")
        if self.epochs < 0 or self.batch_size < 1 or self.seed_points < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and seed_points >= 1 required")
        if self.offset_normalization not in ("points", "region"):
            raise ConfigError("offset_normalization must be 'points' or 'region'")
        if self.optimizer not in ("momentum", "adam"):
            raise ConfigError("optimizer must be 'momentum' or 'adam'")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


@dataclass
class LossReport:
    semantic_loss: float
    keypoint_loss: float
    multitask_loss: float
    per_class: dict = field(default_factory=dict)  # label name -> summed focal term / N

    def to_dict(self) -> dict:
        return {"semantic": self.semantic_loss, "keypoint": self.keypoint_loss,
                "multitask": self.multitask_loss, "per_class": dict(self.per_class)}


def _check_labels(labels, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= L.NUM_CLASSES):
        raise DataError(f"labels must lie in 0..{L.NUM_CLASSES - 1}")
    return labels.astype(np.int64)


def focal_terms(scores, labels, cfg: LossConfig):
    """Per-point focal terms ``-alpha (1-p)^gamma log p`` and their derivative in p."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    lab = _check_labels(labels, n)
    alpha = np.asarray(cfg.alpha_vec)[lab]
    p_raw = scores[np.arange(n), lab]
    p = np.clip(p_raw, P_MIN, 1.0)
    g = cfg.gamma
    one_m = 1.0 - p
    log_p = np.log(p)
    terms = -alpha * one_m ** g * log_p
    # d/dp; the clamp has zero slope outside [P_MIN, 1]
    if g == 0:
        dterm = -alpha / p
    else:
        dterm = alpha * (g * one_m ** (g - 1) * log_p - one_m ** g / p)
    inside = (p_raw >= P_MIN) & (p_raw <= 1.0)
    dterm = np.where(inside, dterm, 0.0)
    return terms, dterm, lab


def focal_loss(scores, labels, cfg: LossConfig):
    """Mean focal loss over points and its gradient with respect to ``scores``."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if n == 0:
        raise DataError("focal loss needs at least one point")
    terms, dterm, lab = focal_terms(scores, labels, cfg)
    grad = np.zeros_like(scores)
    grad[np.arange(n), lab] = dterm / n
    return float(terms.mean()), grad


def focal_per_class(scores, labels, cfg: LossConfig) -> dict:
    terms, _, lab = focal_terms(scores, labels, cfg)
    n = len(lab)
    return {L.name_of(c): float(terms[lab == c].sum() / n) for c in range(L.NUM_CLASSES)}


def keypoint_offset_loss(pred, gt, region_mask, normalization: str = "points"):
    """Masked L1 offset loss ``(1/N) sum_i mask_i sum_j |of_ij - of*_ij|_1``.

    ``region_mask`` is per point (N,) or per point and slot (N, 4). The
    gradient uses ``sign`` with subgradient 0 at exact zeros.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[2] != 3:
        raise DataError(f"offset shapes disagree: {pred.shape} vs {gt.shape}")
    n, m, _ = pred.shape
    mask = np.asarray(region_mask, dtype=np.float64)
    if mask.shape == (n,):
        mask = np.repeat(mask[:, None], m, axis=1)
    if mask.shape != (n, m):
        raise DataError(f"mask shape {mask.shape} does not fit offsets {pred.shape}")
    if normalization == "points":
        denom = n
    elif normalization == "region":
        denom = max(int(np.count_nonzero(mask.any(axis=1))), 1)
    else:
        raise ConfigError(f"unknown normalization {normalization!r}")
    if n == 0:
        return 0.0, np.zeros_like(pred)
    diff = pred - gt
    value = float((mask[:, :, None] * np.abs(diff)).sum() / denom)
    grad = mask[:, :, None] * np.sign(diff) / denom
    return value, grad


def multitask_loss(sem: float, kp: float, cfg: LossConfig) -> float:
    """``kp + lambda * sem``."""
    sem, kp = float(sem), float(kp)
    if not (np.isfinite(sem) and np.isfinite(kp)) or sem < 0 or kp < 0:
        raise DataError("loss components must be finite and non-negative")
    return kp + cfg.lambda_weight * sem
