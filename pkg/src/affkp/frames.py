"""Execution frames from keypoint quadruplets.

Each affordance fixes an origin, one exact axis from a keypoint pair, and a
second axis from another pair made orthogonal to the first by Gram-Schmidt;
the third axis is their cross product.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import labels as L
from .errors import DegenerateQuadrupletError

MIN_SEPARATION = 1e-6


@dataclass
class ExecutionFrame:
    origin: np.ndarray
    x_axis: np.ndarray
    y_axis: np.ndarray
    z_axis: np.ndarray

    @property
    def rotation(self) -> np.ndarray:
        """Columns are the frame axes."""
        return np.column_stack([self.x_axis, self.y_axis, self.z_axis])

    def to_dict(self) -> dict:
        return {k: [float(c) for c in getattr(self, k)] for k in ("origin", "x_axis", "y_axis", "z_axis")}

    @classmethod
    def from_dict(cls, d) -> "ExecutionFrame":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("origin", "x_axis", "y_axis", "z_axis")))

    def check(self, tol: float = 1e-9) -> None:
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=tol) or abs(np.linalg.det(r) - 1.0) > tol:
            raise ValueError("frame axes are not a right-handed orthonormal basis")


def _unit(q, a: int, b: int) -> np.ndarray:
    v = q[b] - q[a]
    n = np.linalg.norm(v)
    if n <= MIN_SEPARATION:
        raise DegenerateQuadrupletError(f"keypoints kp{a + 1} and kp{b + 1} coincide ({n:.3g} m apart)")
    return v / n


def _orthogonal(q, a: int, b: int, first: np.ndarray) -> np.ndarray:
    v = q[b] - q[a]
    if np.linalg.norm(v) <= MIN_SEPARATION:
        raise DegenerateQuadrupletError(f"keypoints kp{a + 1} and kp{b + 1} coincide")
    v = v - (v @ first) * first
    n = np.linalg.norm(v)
    if n <= MIN_SEPARATION:
        raise DegenerateQuadrupletError(f"kp{a + 1}->kp{b + 1} is parallel to the primary axis")
    return v / n


def frame_from_quadruplet(q, affordance) -> ExecutionFrame:
    """Execution frame for one quadruplet (rows kp1..kp4).

    * grasp: origin = mean; y = kp3->kp4; x = kp1->kp2 made orthogonal; z = x cross y
    * contain, scoop: origin = mean; y = kp3->kp4; z = kp1->kp2 made orthogonal; x = y cross z
    * w-grasp: origin = (kp3 + kp4) / 2; y = kp1->kp2; x = kp3->kp4 made orthogonal; z = x cross y
    * cut, pound: origin = kp2; y = kp1->kp2; x = kp3->kp4 made orthogonal; z = x cross y
    """
    q = np.asarray(q.keypoints if hasattr(q, "keypoints") else q, dtype=np.float64).reshape(4, 3)
    aff = L.parse(affordance)
    if aff == L.GRASP:
        origin = q.mean(axis=0)
        y = _unit(q, 2, 3)
        x = _orthogonal(q, 0, 1, y)
        z = np.cross(x, y)
    elif aff in (L.CONTAIN, L.SCOOP):
        origin = q.mean(axis=0)
        y = _unit(q, 2, 3)
        z = _orthogonal(q, 0, 1, y)
        x = np.cross(y, z)
    elif aff == L.WRAP_GRASP:
        origin = (q[2] + q[3]) / 2
        y = _unit(q, 0, 1)
        x = _orthogonal(q, 2, 3, y)
        z = np.cross(x, y)
    elif aff in (L.CUT, L.POUND):
        origin = q[1].copy()
        y = _unit(q, 0, 1)
        x = _orthogonal(q, 2, 3, y)
        z = np.cross(x, y)
    else:
        raise DegenerateQuadrupletError("background has no execution frame")
    # one extra normalisation keeps the cross-product axis unit to the last bit
    if aff in (L.CONTAIN, L.SCOOP):
        x = x / np.linalg.norm(x)
    else:
        z = z / np.linalg.norm(z)
    return ExecutionFrame(origin, x, y, z)


def write_frames(path, instances) -> None:
    """Frames JSON: one record per instance (id, affordance, frame) or an error string."""
    records = []
    for inst in instances:
        rec = {"id": int(inst.id), "affordance": L.name_of(inst.affordance)}
        try:
            rec["frame"] = frame_from_quadruplet(inst.keypoints, inst.affordance).to_dict()
        except DegenerateQuadrupletError as exc:
            rec["error"] = str(exc)
        records.append(rec)
    with open(path, "w") as fh:
        fh.write(json.dumps(records, sort_keys=True, indent=1) + "\n")


def read_frames(path) -> list:
    with open(path) as fh:
        records = json.load(fh)
    for rec in records:
        if "frame" in rec:
            rec["frame"] = ExecutionFrame.from_dict(rec["frame"])
    return records
