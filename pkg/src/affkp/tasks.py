"""Kinematic simulation of the four manipulation tasks.

Each task picks the predicted instances it needs, turns them into execution
frames, moves the true object geometry by the rigid motion those frames
imply, and checks the outcome against the true scene:

1. pick the tomato and drop it into the bowl
2. grasp the knife and bring its sharp edge down onto a sausage
3. grasp the spoon and dip its head into the bowl without touching the wall
4. wrap-grasp the cup
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import labels as L
from . import primitives as prim
from .errors import ConfigError, DataError, DegenerateQuadrupletError
from .frames import ExecutionFrame, frame_from_quadruplet
from .synth import SynthConfig, sample_scene

TASK_OBJECTS = {1: ("tomato", "bowl"), 2: ("knife", "sausage"), 3: ("spoon", "bowl"), 4: ("cup",)}
TASK_NAMES = {1: "pick-and-place tomato", 2: "cut sausage", 3: "scoop from bowl", 4: "wrap-grasp cup"}
FAILURE_CLASSES = ("planning", "grasp", "execution")
CSV_COLUMNS = ["Task", "#Trials", "#Failure", "#Planning Failure", "#Grasp Failure", "#Execution Failure"]


@dataclass
class SimConfig:
    stroke: float = 0.08
    grasp_tolerance: float = 0.01
    width_tolerance: float = 0.15
    origin_tolerance: float = 0.01
    cut_distance: float = 0.005
    cut_angle_deg: float = 20.0
    scoop_clearance: float = 0.003
    scoop_depth: float = 0.005
    approach_height: float = 0.10
    sweep_steps: int = 20
    scene_attempts: int = 20

    def __post_init__(self):
        for name in ("stroke", "grasp_tolerance", "width_tolerance", "origin_tolerance", "cut_distance",
                     "cut_angle_deg", "approach_height"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.scoop_clearance < 0 or self.scoop_depth < 0 or self.sweep_steps < 1 or self.scene_attempts < 1:
            raise ConfigError("scoop_clearance, scoop_depth >= 0 and sweep_steps, scene_attempts >= 1 required")


@dataclass
class TaskOutcome:
    task: int
    success: bool
    failure: str  # planning | grasp | execution | none
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.success != (self.failure == "none"):
            raise ValueError("success must coincide with failure class 'none'")

    def to_dict(self) -> dict:
        return asdict(self)


def _fail(task, kind, **diag):
    return TaskOutcome(task, False, kind, diag)


# --- geometry helpers ---------------------------------------------------------------

@dataclass
class _Pose:
    """Rigid pose with rotation columns = frame axes (world)."""
    rotation: np.ndarray
    origin: np.ndarray

    def inverse_apply(self, p):
        return (np.asarray(p) - self.origin) @ self.rotation

    def apply(self, p):
        return np.asarray(p) @ self.rotation.T + self.origin


def _world_frame(scene, frame: ExecutionFrame) -> _Pose:
    r = scene.camera.vector_to_world(frame.rotation.T).T
    return _Pose(r, scene.camera.camera_to_world(frame.origin))


def _object(scene, category):
    for obj in scene.objects:
        if obj.category == category:
            return obj
    raise DataError(f"scene has no {category}")


def _part(obj, label):
    for part in obj.parts():
        if part.label == label:
            return part
    raise DataError(f"{obj.category} has no {L.name_of(label)} part")


def _solid_distance(solid: dict, q) -> float:
    """Distance from an object-local point to a part's solid (0 inside)."""
    kind = solid["type"]
    q = np.atleast_2d(q)
    if kind == "box":
        return float(prim.box_distance(q, solid["lo"], solid["hi"])[0])
    if kind == "sphere":
        return float(prim.sphere_distance(q, solid["center"], solid["radius"])[0])
    if kind == "cylinder":
        return float(prim.cylinder_distance(q, solid["radius"], solid["z0"], solid["z1"])[0])
    raise DataError(f"no grasp check for solid {kind!r}")


def _solid_width(solid: dict, direction) -> float:
    kind = solid["type"]
    if kind == "box":
        return prim.box_width_along(direction, solid["lo"], solid["hi"])
    if kind == "sphere":
        return 2.0 * solid["radius"]
    if kind == "cylinder":
        return prim.cylinder_width_along(direction, solid["radius"], solid["z1"] - solid["z0"])
    raise DataError(f"no width for solid {kind!r}")


def _pick(instances, label):
    """The predicted instance of a label with the most member points, or None."""
    cands = [inst for inst in instances if inst.affordance == label]
    if not cands:
        return None
    return max(cands, key=lambda inst: (len(inst.point_indices), -inst.id))


def _frames(scene, instances, labels):
    """World poses for the required labels; returns (poses, missing label or None)."""
    out = {}
    for lab in labels:
        inst = _pick(instances, lab)
        if inst is None:
            return None, f"no {L.name_of(lab)} instance predicted"
        try:
            out[lab] = _world_frame(scene, frame_from_quadruplet(inst.keypoints, lab))
        except DegenerateQuadrupletError as exc:
            return None, f"{L.name_of(lab)} quadruplet is degenerate: {exc}"
    return out, None


def _check_grasp(obj, pose: _Pose, sim: SimConfig, label=L.GRASP):
    """Gripper at the grasp frame origin closing along its y axis."""
    part = _part(obj, label)
    origin_local = obj.to_local(pose.origin)
    closing_local = prim.rotation_z(obj.yaw).T @ pose.rotation[:, 1]
    dist = _solid_distance(part.solid, origin_local)
    width = _solid_width(part.solid, closing_local)
    diag = {"grasp_origin_distance": dist, "grasp_width": width}
    if dist > sim.grasp_tolerance:
        return False, diag
    if width > sim.stroke:
        return False, diag
    return True, diag


def _true_quad(obj, label) -> np.ndarray:
    """Template keypoints of a part in world coordinates (before any snapping)."""
    return obj.to_world(_part(obj, label).anchors)


# --- tasks ----------------------------------------------------------------------------

def _task1(scene, instances, sim):
    frames, why = _frames(scene, instances, (L.GRASP, L.CONTAIN))
    if frames is None:
        return _fail(1, "planning", reason=why)
    tomato, bowl = _object(scene, "tomato"), _object(scene, "bowl")
    ok, diag = _check_grasp(tomato, frames[L.GRASP], sim)
    if not ok:
        return _fail(1, "grasp", **diag)
    # translate the grasp origin above the contain origin and release
    grasp, contain = frames[L.GRASP], frames[L.CONTAIN]
    centre = tomato.to_world(_part(tomato, L.GRASP).solid["center"])
    dropped = centre + (contain.origin - grasp.origin)
    axis = bowl.to_world(_part(bowl, L.CONTAIN).solid["center"])
    offset = float(np.hypot(*(dropped - axis)[:2]))
    inner = _part(bowl, L.CONTAIN).solid["inner"]
    diag.update(drop_offset=offset, cavity_radius=inner)
    if offset > inner:
        return _fail(1, "execution", **diag)
    return TaskOutcome(1, True, "none", diag)


def _task2(scene, instances, sim):
    frames, why = _frames(scene, instances, (L.GRASP, L.CUT))
    if frames is None:
        return _fail(2, "planning", reason=why)
    knife, sausage = _object(scene, "knife"), _object(scene, "sausage")
    ok, diag = _check_grasp(knife, frames[L.GRASP], sim)
    if not ok:
        return _fail(2, "grasp", **diag)
    solid = _part(sausage, L.BACKGROUND).solid
    axis = prim.rotation_z(sausage.yaw) @ np.array([1.0, 0.0, 0.0])
    top = sausage.to_world(np.array(solid["center"]) + [0.0, 0.0, solid["radius"]])
    cut = frames[L.CUT]
    # target: edge direction straight down, blade across the sausage
    y_t = np.array([0.0, 0.0, -1.0])
    x_t = np.cross(y_t, axis)
    if x_t @ cut.rotation[:, 0] < 0:
        x_t = -x_t
    target = _Pose(np.column_stack([x_t, y_t, np.cross(x_t, y_t)]), top)
    true_q = _true_quad(knife, L.CUT)
    edge = target.apply(cut.inverse_apply(true_q[1]))
    true_y = true_q[1] - true_q[0]
    true_y /= np.linalg.norm(true_y)
    moved_y = target.rotation @ (cut.rotation.T @ true_y)
    local = sausage.to_local(edge) - np.array(solid["center"])
    radial = math.hypot(local[1], local[2])
    along = max(abs(local[0]) - solid["length"] / 2, 0.0)
    surface_dist = math.hypot(radial - solid["radius"], along) if along > 0 else abs(radial - solid["radius"])
    tilt = math.degrees(math.asin(min(1.0, abs(float(moved_y @ axis)))))
    centre = sausage.to_world(solid["center"])
    facing = float(moved_y @ (centre - edge))
    diag.update(edge_surface_distance=surface_dist, cut_plane_angle_deg=tilt, edge_facing=facing)
    if surface_dist > sim.cut_distance or tilt > sim.cut_angle_deg or facing <= 0:
        return _fail(2, "execution", **diag)
    return TaskOutcome(2, True, "none", diag)


def _bowl_shell_distance(bowl_solid, p_local) -> float:
    """Distance from a bowl-local point to the shell solid (lower half-shell plus rim ring)."""
    c = np.asarray(bowl_solid["center"])
    rb, ro = bowl_solid["inner"], bowl_solid["outer"]
    q = np.asarray(p_local) - c
    r = float(np.linalg.norm(q))
    if q[2] <= 0:
        return max(rb - r, r - ro, 0.0)
    rho = math.hypot(q[0], q[1])
    return math.hypot(rho - min(max(rho, rb), ro), q[2])


def _task3(scene, instances, sim):
    frames, why = _frames(scene, instances, (L.GRASP, L.SCOOP, L.CONTAIN))
    if frames is None:
        return _fail(3, "planning", reason=why)
    spoon, bowl = _object(scene, "spoon"), _object(scene, "bowl")
    ok, diag = _check_grasp(spoon, frames[L.GRASP], sim)
    if not ok:
        return _fail(3, "grasp", **diag)
    scoop, contain = frames[L.SCOOP], frames[L.CONTAIN]
    target = _Pose(contain.rotation, contain.origin - np.array([0.0, 0.0, sim.scoop_depth]))
    head = _part(spoon, L.SCOOP).solid
    ball_local = scoop.inverse_apply(spoon.to_world(head["center"]))
    a = head["radius"]
    bowl_solid = _part(bowl, L.CONTAIN).solid
    clearance = np.inf
    for s in np.linspace(1.0, 0.0, sim.sweep_steps + 1):
        pose = _Pose(target.rotation, target.origin + np.array([0.0, 0.0, s * sim.approach_height]))
        c = pose.apply(ball_local)
        clearance = min(clearance, _bowl_shell_distance(bowl_solid, bowl.to_local(c)) - a)
    final = target.apply(ball_local)
    rim_z = bowl.to_world(bowl_solid["center"])[2]
    depth_below_rim = float(rim_z - (final[2] - a))
    diag.update(scoop_clearance=float(clearance), head_depth_below_rim=depth_below_rim)
    if clearance < sim.scoop_clearance or depth_below_rim <= 0:
        return _fail(3, "execution", **diag)
    return TaskOutcome(3, True, "none", diag)


def _task4(scene, instances, sim):
    inst = _pick(instances, L.WRAP_GRASP)
    if inst is None:
        return _fail(4, "planning", reason="no w-grasp instance predicted")
    try:
        frame = _world_frame(scene, frame_from_quadruplet(inst.keypoints, L.WRAP_GRASP))
    except DegenerateQuadrupletError as exc:
        return _fail(4, "planning", reason=str(exc))
    cup = _object(scene, "cup")
    solid = _part(cup, L.WRAP_GRASP).solid
    width = float(np.linalg.norm(inst.keypoints[1] - inst.keypoints[0]))
    diameter = 2.0 * solid["radius"]
    rim_centre = cup.to_world([0.0, 0.0, solid["z1"]])
    origin_err = float(np.linalg.norm(frame.origin - rim_centre))
    rel = abs(width - diameter) / diameter
    diag = {"grip_width": width, "true_diameter": diameter, "width_error": rel, "origin_error": origin_err}
    if width > sim.stroke or rel > sim.width_tolerance or origin_err > sim.origin_tolerance:
        return _fail(4, "grasp", **diag)
    return TaskOutcome(4, True, "none", diag)


_TASKS = {1: _task1, 2: _task2, 3: _task3, 4: _task4}


def simulate_task(task: int, scene, predictions, cfg: SimConfig | None = None) -> TaskOutcome:
    """Run one task on a scene with predicted instances (camera frame)."""
    if task not in _TASKS:
        raise ConfigError(f"task must be 1..4, got {task}")
    return _TASKS[task](scene, list(predictions), cfg or SimConfig())


def task_scene(task: int, synth_cfg: SynthConfig, seed: int, attempts: int = 20):
    """Scene with the task's objects whose required parts are all visible.

    Seeds ``seed, seed + 7919, ...`` are tried in turn so the result stays
    deterministic in ``seed``.
    """
    needed = {1: {L.GRASP, L.CONTAIN}, 2: {L.GRASP, L.CUT}, 3: {L.GRASP, L.SCOOP, L.CONTAIN},
              4: {L.WRAP_GRASP}}[task]
    last = None
    for k in range(attempts):
        try:
            scene = sample_scene(synth_cfg, seed + 7919 * k, categories=list(TASK_OBJECTS[task]))
        except DataError as exc:
            last = exc
            continue
        if needed <= {inst.affordance for inst in scene.instances}:
            return scene
    raise DataError(f"no usable scene for task {task} from seed {seed} in {attempts} attempts ({last})")


def corrupt_wrap_width(instances, factor: float):
    """Scale every w-grasp kp1-kp2 pair about its midpoint."""
    out = []
    for inst in instances:
        inst = type(inst)(inst.id, inst.affordance, inst.point_indices, inst.keypoints.copy())
        if inst.affordance == L.WRAP_GRASP:
            mid = (inst.keypoints[0] + inst.keypoints[1]) / 2
            inst.keypoints[0] = mid + factor * (inst.keypoints[0] - mid)
            inst.keypoints[1] = mid + factor * (inst.keypoints[1] - mid)
        out.append(inst)
    return out


@dataclass
class CampaignResult:
    task: int
    outcomes: list
    seeds: list

    def row(self) -> dict:
        counts = {k: sum(o.failure == k for o in self.outcomes) for k in FAILURE_CLASSES}
        failures = sum(not o.success for o in self.outcomes)
        return {"Task": self.task, "#Trials": len(self.outcomes), "#Failure": failures,
                "#Planning Failure": counts["planning"], "#Grasp Failure": counts["grasp"],
                "#Execution Failure": counts["execution"]}


def run_campaign(task: int, n_trials: int, seeds, predictor, synth_cfg: SynthConfig,
                 sim: SimConfig | None = None, corrupt=None) -> CampaignResult:
    """Fresh scene per trial, predict, simulate.

    ``predictor(scene) -> instances`` supplies predictions; pass
    ``oracle_predictor`` for ground truth. ``corrupt`` optionally rewrites
    the predictions before simulation.
    """
    sim = sim or SimConfig()
    seeds = list(seeds)[:n_trials]
    if len(seeds) < n_trials:
        raise ConfigError(f"need {n_trials} scene seeds, got {len(seeds)}")
    outcomes = []
    for seed in seeds:
        scene = task_scene(task, synth_cfg, int(seed), sim.scene_attempts)
        preds = predictor(scene)
        if corrupt is not None:
            preds = corrupt(preds)
        outcome = simulate_task(task, scene, preds, sim)
        outcome.diagnostics["seed"] = int(seed)
        outcomes.append(outcome)
    return CampaignResult(task, outcomes, seeds)


def oracle_predictor(scene):
    return scene.instances


def write_campaign(directory, results) -> None:
    """``campaign.csv`` (one row per task) and ``trials.jsonl`` (one line per trial)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "campaign.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for res in results:
            w.writerow(res.row())
    with open(d / "trials.jsonl", "w") as fh:
        for res in results:
            for o in res.outcomes:
                fh.write(json.dumps(_jsonable(o.to_dict()), sort_keys=True) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def svg_overlay(scene, instances, path, size: int = 2) -> None:
    """Projected cloud coloured by label with each instance's frame axes drawn on top."""
    k = scene.intrinsics
    colours = {0: "#bbbbbb", 1: "#1f77b4", 2: "#d62728", 3: "#2ca02c", 4: "#9467bd", 5: "#8c564b", 6: "#ff7f0e"}
    xyz = scene.cloud.xyz
    u = xyz[:, 0] * k.fx / xyz[:, 2] + k.cx
    v = xyz[:, 1] * k.fy / xyz[:, 2] + k.cy
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{k.width * size}" height="{k.height * size}">']
    step = max(1, len(xyz) // 4000)
    for i in range(0, len(xyz), step):
        parts.append(f'<circle cx="{u[i] * size:.1f}" cy="{v[i] * size:.1f}" r="1" '
                     f'fill="{colours[int(scene.labels[i])]}"/>')
    axis_colours = ("#ff0000", "#00aa00", "#0000ff")
    for inst in instances:
        try:
            f = frame_from_quadruplet(inst.keypoints, inst.affordance)
        except DegenerateQuadrupletError:
            continue
        for axis, colour in zip((f.x_axis, f.y_axis, f.z_axis), axis_colours):
            a, b = f.origin, f.origin + 0.03 * axis
            pa = (a[0] * k.fx / a[2] + k.cx, a[1] * k.fy / a[2] + k.cy)
            pb = (b[0] * k.fx / b[2] + k.cx, b[1] * k.fy / b[2] + k.cy)
            parts.append(f'<line x1="{pa[0] * size:.1f}" y1="{pa[1] * size:.1f}" x2="{pb[0] * size:.1f}" '
                         f'y2="{pb[1] * size:.1f}" stroke="{colour}" stroke-width="2"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
