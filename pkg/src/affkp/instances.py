"""Affordance instances and their JSON form (shared by ground truth and predictions)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import labels as L
from .errors import DataError


@dataclass
class AffordanceInstance:
    id: int
    affordance: int
    point_indices: np.ndarray
    keypoints: np.ndarray  # (4, 3) ordered quadruplet
    votes: np.ndarray | None = field(default=None, repr=False)  # (4, V, 3)
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.affordance = L.parse(self.affordance)
        if self.affordance == L.BACKGROUND:
            raise DataError("an affordance instance cannot carry the background label")
        self.point_indices = np.asarray(self.point_indices, dtype=np.int64).reshape(-1)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(4, 3)

    @property
    def centroid(self) -> np.ndarray:
        return self.keypoints.mean(axis=0)

    def to_dict(self) -> dict:
        return {
            "id": int(self.id),
            "affordance": L.name_of(self.affordance),
            "point_indices": [int(i) for i in self.point_indices],
            "keypoints": [[float(c) for c in kp] for kp in self.keypoints],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AffordanceInstance":
        try:
            kps = np.asarray(d["keypoints"], dtype=np.float64)
            if kps.shape != (4, 3):
                raise DataError(f"instance {d.get('id')}: keypoints must be 4x[x,y,z]")
            return cls(int(d["id"]), d["affordance"], d["point_indices"], kps)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"malformed instance record: {exc}") from exc


def write_instances(path, instances, warnings=None) -> None:
    """Write an instances file; a ``warnings`` key is added when given (prediction dumps)."""
    records = [inst.to_dict() for inst in instances]
    if warnings is None:
        payload = records
    else:
        payload = {"instances": records, "warnings": list(warnings)}
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def read_instances(path):
    """Read either a bare instance array or a prediction dump; returns (instances, warnings)."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    warnings = []
    if isinstance(payload, dict):
        warnings = list(payload.get("warnings", []))
        payload = payload.get("instances")
    if not isinstance(payload, list):
        raise DataError(f"{path}: expected an array of instances")
    return [AffordanceInstance.from_dict(d) for d in payload], warnings
