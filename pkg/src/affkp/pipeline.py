"""End-to-end orchestration shared by the command line and the task simulator."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .cluster import ClusterConfig, extract_quadruplets
from .errors import DataError
from .geometry import subsample_indices
from .instances import AffordanceInstance, read_instances, write_instances
from .metrics import FMeasureConfig, MetricsReport, evaluate
from .model import ModelParams, forward
from .synth import load_scene

SCORES_FILE = "scores.bin"
LABELS_FILE = "labels.bin"
INSTANCES_FILE = "instances.json"


@dataclass
class Prediction:
    """Dense per-point prediction for one cloud."""
    scores: np.ndarray  # (N, 7) float32
    labels: np.ndarray  # (N,) uint8
    instances: list
    warnings: list


def predict_cloud(cloud, params: ModelParams, cluster_cfg: ClusterConfig, n_seeds: int = 2048,
                  min_points: int = 5, seed: int = 0) -> Prediction:
    """Run the model on a seed subsample, extract quadruplets, carry results to every point.

    Instances are found on the seeds (``min_points`` overrides the cluster
    size floor there); each cloud point joins the instance and takes the
    scores of its nearest seed.
    """
    if len(cloud) == 0:
        raise DataError("cannot predict on an empty cloud")
    idx = subsample_indices(len(cloud), n_seeds, seed)
    seeds = cloud.take(idx)
    scores_s, off_s, _ = forward(seeds, params)
    labels_s = scores_s.argmax(axis=1)
    seed_cfg = dataclasses.replace(cluster_cfg, min_points=min_points)
    found = extract_quadruplets(seeds, labels_s, off_s, seed_cfg)
    nearest = cKDTree(seeds.xyz).query(cloud.xyz)[1]
    owner = np.full(len(idx), -1, dtype=np.int64)
    for k, inst in enumerate(found):
        owner[inst.point_indices] = k
    dense_owner = owner[nearest]
    instances, warnings = [], []
    for k, inst in enumerate(found):
        members = np.flatnonzero(dense_owner == k)
        instances.append(AffordanceInstance(inst.id, inst.affordance, members, inst.keypoints))
        warnings.extend(f"instance {inst.id}: {w}" for w in inst.warnings)
    return Prediction(scores_s[nearest].astype(np.float32), labels_s[nearest].astype(np.uint8), instances,
                      warnings)


def save_prediction(pred: Prediction, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / SCORES_FILE).write_bytes(np.ascontiguousarray(pred.scores, dtype="<f4").tobytes())
    (d / LABELS_FILE).write_bytes(np.asarray(pred.labels, dtype=np.uint8).tobytes())
    write_instances(d / INSTANCES_FILE, pred.instances, warnings=pred.warnings)
    return d


def load_prediction(directory, n_points: int | None = None) -> Prediction:
    d = Path(directory)
    instances, warnings = read_instances(d / INSTANCES_FILE)
    scores = labels = None
    if (d / SCORES_FILE).exists():
        raw = np.frombuffer((d / SCORES_FILE).read_bytes(), dtype="<f4")
        if raw.size % 7:
            raise DataError(f"{d / SCORES_FILE}: size is not a multiple of 7 classes")
        scores = raw.reshape(-1, 7).astype(np.float32)
    if (d / LABELS_FILE).exists():
        labels = np.frombuffer((d / LABELS_FILE).read_bytes(), dtype=np.uint8).copy()
    if n_points is not None:
        for name, arr in ((SCORES_FILE, scores), (LABELS_FILE, labels)):
            if arr is not None and len(arr) != n_points:
                raise DataError(f"{d / name}: {len(arr)} rows for {n_points} points")
        for inst in instances:
            if inst.point_indices.size and (inst.point_indices.min() < 0 or inst.point_indices.max() >= n_points):
                raise DataError(f"{d / INSTANCES_FILE}: instance {inst.id} indexes past {n_points} points")
    return Prediction(scores, labels, instances, warnings)


def scene_dirs(dataset) -> list:
    d = Path(dataset)
    if not d.is_dir():
        raise DataError(f"dataset directory {d} does not exist")
    dirs = sorted((p for p in d.iterdir() if p.is_dir() and p.name.startswith("scene_")),
                  key=lambda p: (len(p.name), p.name))
    if not dirs:
        raise DataError(f"{d} holds no scene_<seed> directories")
    return dirs


def prediction_dirname(scene_dir) -> str:
    return "pred_" + Path(scene_dir).name


def evaluate_dataset(dataset, predictions, fcfg: FMeasureConfig | None = None,
                     threshold_frac: float = 0.3) -> MetricsReport:
    """Score every ``pred_<scene>`` dump under ``predictions`` against its scene."""
    items = []
    for sd in scene_dirs(dataset):
        scene = load_scene(sd)
        pd = Path(predictions) / prediction_dirname(sd)
        if not pd.is_dir():
            raise DataError(f"missing prediction {pd}")
        pred = load_prediction(pd, len(scene.cloud))
        scores = pred.scores
        if scores is None and pred.labels is not None:
            scores = np.eye(7)[pred.labels]
        items.append((scene.cloud.xyz, scene.labels, scene.instances, scores, pred.instances))
    return evaluate(items, fcfg, threshold_frac)


def tree_hash(path) -> str:
    """SHA-256 over relative names and contents of every file below ``path`` (manifests excluded)."""
    root = Path(path)
    h = hashlib.sha256()
    files = [root] if root.is_file() else sorted(p for p in root.rglob("*") if p.is_file())
    for p in files:
        if p.name == "manifest.json":
            continue
        h.update(str(p.relative_to(root) if p != root else p.name).encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def model_predictor(params: ModelParams, cluster_cfg: ClusterConfig, n_seeds: int = 2048, min_points: int = 5):
    """Task-simulator predictor backed by a trained model."""
    def predict(scene):
        return predict_cloud(scene.cloud, params, cluster_cfg, n_seeds, min_points).instances
    return predict
