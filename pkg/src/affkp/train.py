"""Gradient-descent training of the per-point model on labelled scenes."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .errors import DataError, DivergenceError
from .geometry import subsample_indices
from .losses import LossConfig, LossReport
from .model import ModelConfig, ModelParams, backward, forward_train, init_params, save_checkpoint, segment_ids
from .synth import gt_offsets

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


@dataclass
class Sample:
    """One scene reduced to a fixed seed subsample with its training targets."""
    cloud: object
    labels: np.ndarray
    offsets: np.ndarray
    mask: np.ndarray
    segments: np.ndarray  # part-pooling segments from the ground-truth labels


def make_sample(scene, n_points: int, seed: int, segment_radius: float = 0.03) -> Sample:
    offsets, mask = gt_offsets(scene, scene.instances)
    idx = subsample_indices(len(scene.cloud), n_points, seed)
    cloud = scene.cloud.take(idx)
    labels = np.asarray(scene.labels)[idx]
    return Sample(cloud, labels, offsets[idx], mask[idx], segment_ids(cloud.xyz, labels, segment_radius))


def evaluate_loss(params: ModelParams, sample: Sample, cfg: LossConfig, with_grad: bool = False):
    scores, off, _, cache = forward_train(sample.cloud, params, segments=sample.segments)
    sem, d_scores = losses.focal_loss(scores, sample.labels, cfg)
    kp, d_off = losses.keypoint_offset_loss(off, sample.offsets, sample.mask, cfg.offset_normalization)
    total = losses.multitask_loss(sem, kp, cfg)
    report = LossReport(sem, kp, total, losses.focal_per_class(scores, sample.labels, cfg))
    if not with_grad:
        return report, None
    grads = backward(cache, params, cfg.lambda_weight * d_scores, d_off)
    return report, grads


def mean_report(reports) -> LossReport:
    sem = float(np.mean([r.semantic_loss for r in reports]))
    kp = float(np.mean([r.keypoint_loss for r in reports]))
    keys = reports[0].per_class.keys()
    per = {k: float(np.mean([r.per_class[k] for r in reports])) for k in keys}
    return LossReport(sem, kp, float(np.mean([r.multitask_loss for r in reports])), per)


@dataclass
class TrainResult:
    params: ModelParams
    history: list  # LossReport per epoch; entry 0 is the untrained model
    final: LossReport
    checkpoints: list = field(default_factory=list)


class _Optimizer:
    def __init__(self, params: ModelParams, cfg: LossConfig):
        self.cfg = cfg
        self.state = {k: np.zeros(v.shape) for k, v in params.tensors.items()}
        self.second = {k: np.zeros(v.shape) for k, v in params.tensors.items()}
        self.steps = 0

    def step(self, params: ModelParams, grads: dict) -> None:
        cfg = self.cfg
        self.steps += 1
        if cfg.grad_clip > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.grad_clip:
                grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
        for name, g in grads.items():
            if cfg.optimizer == "momentum":
                v = self.state[name]
                v *= cfg.momentum
                v += g
                update = cfg.learning_rate * v
            else:
                b1, b2 = cfg.adam_betas
                m, s = self.state[name], self.second[name]
                m *= b1
                m += (1 - b1) * g
                s *= b2
                s += (1 - b2) * g * g
                mh = m / (1 - b1 ** self.steps)
                sh = s / (1 - b2 ** self.steps)
                update = cfg.learning_rate * mh / (np.sqrt(sh) + 1e-8)
            params.tensors[name] = (params.tensors[name] - update).astype(np.float32)


def train(dataset, cfg: LossConfig, seed: int, model_cfg: ModelConfig | None = None,
          run_dir=None, init: ModelParams | None = None, progress=None) -> TrainResult:
    """Train on ``dataset`` (SceneGroundTruth list); deterministic per ``seed``.

    Every epoch draws a fresh seed subsample per scene and visits the scenes
    in a shuffled order, one optimiser step per ``batch_size`` scenes. The
    history starts with the loss of the initial parameters on the epoch-0
    subsamples. With ``cfg.ema_decay > 0`` the returned parameters and the
    checkpoints are the moving average of the iterates. Raises
    :class:`DivergenceError` if the loss exceeds 1e6 or turns non-finite;
    the error carries the last good parameters.
    """
    if not dataset:
        raise DataError("training needs at least one scene")
    model_cfg = model_cfg or ModelConfig()
    params = init.copy() if init is not None else init_params(model_cfg, seed)
    rng = np.random.default_rng([seed, 17])
    opt = _Optimizer(params, cfg)
    ema = params.copy() if cfg.ema_decay > 0 else None
    run_dir = Path(run_dir) if run_dir is not None else None
    writer = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        fh = open(run_dir / "loss.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "semantic", "keypoint", "multitask"])

    def record(epoch, rep):
        history.append(rep)
        if writer is not None:
            writer.writerow([epoch, f"{rep.semantic_loss:.9g}", f"{rep.keypoint_loss:.9g}", f"{rep.multitask_loss:.9g}"])
        if progress is not None:
            progress(epoch, rep)

    history, checkpoints = [], []
    try:
        first = [make_sample(s, cfg.seed_points, int(rng.integers(2**31)), model_cfg.segment_radius) for s in dataset]
        record(0, mean_report([evaluate_loss(params, smp, cfg)[0] for smp in first]))
        samples = first
        for epoch in range(1, cfg.epochs + 1):
            if epoch > 1:
                samples = [make_sample(s, cfg.seed_points, int(rng.integers(2**31)), model_cfg.segment_radius) for s in dataset]
            order = rng.permutation(len(samples))
            reports = []
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                acc = None
                for i in batch:
                    rep, grads = evaluate_loss(params, samples[i], cfg, with_grad=True)
                    if not np.isfinite(rep.multitask_loss) or rep.multitask_loss > DIVERGENCE_LIMIT:
                        raise DivergenceError(
                            f"loss {rep.multitask_loss:.3g} at epoch {epoch}; training diverged",
                            last_good=params.copy(), history=history)
                    reports.append(rep)
                    acc = grads if acc is None else {k: acc[k] + grads[k] for k in acc}
                before = params.copy()
                opt.step(params, {k: g / len(batch) for k, g in acc.items()})
                if not params.is_finite():
                    raise DivergenceError(f"non-finite parameters at epoch {epoch}", last_good=before, history=history)
                if ema is not None:
                    for k, v in params.tensors.items():
                        ema.tensors[k] = (cfg.ema_decay * ema.tensors[k] + (1 - cfg.ema_decay) * v).astype(np.float32)
            record(epoch, mean_report(reports))
            if run_dir is not None and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
                path = run_dir / f"checkpoint_{epoch:04d}.bin"
                save_checkpoint(path, ema if ema is not None else params)
                checkpoints.append(path)
        if ema is not None:
            params = ema
        final = mean_report([evaluate_loss(params, smp, cfg)[0] for smp in first])
    finally:
        if writer is not None:
            fh.close()
    return TrainResult(params, history, final, checkpoints)
