"""Synthetic tabletop scenes with per-point affordance labels and keypoint quadruplets.

Objects are built from parametric parts (boxes, cylinders, sphere zones,
rings) sampled on a regular grid, rendered through a z-buffer from a pinhole
camera, and lifted back to a point cloud with :mod:`affkp.geometry`. Keypoint
anchors are defined per template in a canonical order and snapped onto the
visible member points of their part.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import kernels
from . import labels as L
from . import primitives as prim
from .errors import ConfigError, DataError, EmptyCloudError, PlacementError
from .geometry import (CameraIntrinsics, PointCloudFrame, RgbdImage, backproject, estimate_normals,
                       quantize, read_ply, write_ply)
from .instances import AffordanceInstance, read_instances, write_instances

CATEGORIES = ("knife", "mug", "bowl", "spoon", "hammer", "cup", "tomato")
PROPS = ("sausage",)
ROTATIONALLY_SYMMETRIC = {"bowl", "cup", "tomato"}
TOOLS = {"knife", "spoon", "hammer", "sausage"}

# keypoint anchors sit this far inside face edges so they land on visible faces
INSET = 0.002


# --- surfaces ------------------------------------------------------------------

@dataclass
class Surface:
    kind: str  # box | cyl | ring | zone
    params: dict
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def sample(self, spacing: float):
        p = self.params
        if self.kind == "box":
            pts, nrm = prim.box_faces(p["lo"], p["hi"], spacing, p.get("skip_bottom", True))
        elif self.kind == "cyl":
            pts, nrm = prim.cylinder_side(p["r"], p["z0"], p["z1"], spacing, p.get("inward", False))
        elif self.kind == "ring":
            pts, nrm = prim.annulus(p["r_in"], p["r_out"], p["z"], spacing, p.get("up", True))
        elif self.kind == "zone":
            pts, nrm = prim.sphere_zone(p["r"], p["polar0"], p["polar1"], spacing, p.get("inward", False))
        else:
            raise ValueError(self.kind)
        return pts @ self.rotation.T + self.offset, nrm @ self.rotation.T

    def distance(self, q) -> np.ndarray:
        """Exact distance from object-local points to this surface."""
        q = (np.atleast_2d(q) - self.offset) @ self.rotation
        p = self.params
        if self.kind == "box":
            lo, hi = np.asarray(p["lo"]), np.asarray(p["hi"])
            outside = prim.box_distance(q, lo, hi)
            inside = np.minimum(q - lo, hi - q).min(axis=1)
            return np.where(outside > 0, outside, np.maximum(inside, 0.0))
        if self.kind == "cyl":
            rho = np.hypot(q[:, 0], q[:, 1])
            dz = np.maximum(np.maximum(p["z0"] - q[:, 2], q[:, 2] - p["z1"]), 0.0)
            return np.hypot(rho - p["r"], dz)
        if self.kind == "ring":
            rho = np.hypot(q[:, 0], q[:, 1])
            return np.hypot(rho - np.clip(rho, p["r_in"], p["r_out"]), q[:, 2] - p["z"])
        if self.kind == "zone":
            r = np.linalg.norm(q, axis=1)
            phi = np.arccos(np.clip(q[:, 2] / np.maximum(r, 1e-300), -1, 1))
            phi_c = np.clip(phi, p["polar0"], p["polar1"])
            az = np.arctan2(q[:, 1], q[:, 0])
            on = p["r"] * np.column_stack([np.sin(phi_c) * np.cos(az), np.sin(phi_c) * np.sin(az), np.cos(phi_c)])
            return np.linalg.norm(q - on, axis=1)
        raise ValueError(self.kind)


@dataclass
class Part:
    name: str
    label: int
    surfaces: list
    anchors: np.ndarray | None  # (4, 3) object-local, canonical order
    solid: dict
    color: tuple = (0.5, 0.5, 0.5)

    def surface_distance(self, q) -> np.ndarray:
        return np.min([s.distance(q) for s in self.surfaces], axis=0)


@dataclass
class ObjectTemplate:
    category: str
    size_ranges: dict  # parameter -> (low, high) meters
    parts: tuple  # (part name, affordance label)


TEMPLATES = {
    "knife": ObjectTemplate("knife", {
        "handle_len": (0.09, 0.11), "handle_w": (0.018, 0.024), "handle_h": (0.016, 0.022),
        "blade_len": (0.10, 0.13), "blade_w": (0.022, 0.030), "blade_h": (0.003, 0.005)},
        (("handle", L.GRASP), ("blade", L.CUT))),
    "spoon": ObjectTemplate("spoon", {
        "handle_len": (0.10, 0.13), "handle_w": (0.012, 0.016), "handle_h": (0.004, 0.006),
        "scoop_r": (0.018, 0.022), "scoop_d": (0.008, 0.012)},
        (("handle", L.GRASP), ("scoop", L.SCOOP))),
    "hammer": ObjectTemplate("hammer", {
        "handle_len": (0.15, 0.18), "handle_w": (0.020, 0.025), "handle_h": (0.020, 0.024),
        "head_w": (0.025, 0.030), "head_len": (0.08, 0.10), "head_h": (0.030, 0.035)},
        (("handle", L.GRASP), ("head", L.POUND))),
    "tomato": ObjectTemplate("tomato", {"radius": (0.025, 0.032)}, (("body", L.GRASP),)),
    "bowl": ObjectTemplate("bowl", {"radius": (0.055, 0.070), "wall": (0.004, 0.006)},
                           (("bowl", L.CONTAIN),)),
    "cup": ObjectTemplate("cup", {
        "radius": (0.030, 0.036), "height": (0.07, 0.09), "wall": (0.004, 0.005), "base": (0.006, 0.008)},
        (("body", L.WRAP_GRASP), ("cavity", L.CONTAIN))),
    "mug": ObjectTemplate("mug", {
        "radius": (0.030, 0.036), "height": (0.07, 0.09), "wall": (0.004, 0.005), "base": (0.006, 0.008),
        "grip_len": (0.030, 0.040), "grip_w": (0.014, 0.018), "grip_h": (0.008, 0.012)},
        (("body", L.WRAP_GRASP), ("cavity", L.CONTAIN), ("grip", L.GRASP))),
    "sausage": ObjectTemplate("sausage", {"radius": (0.012, 0.016), "length": (0.10, 0.14)},
                              (("sausage", L.BACKGROUND),)),
}

PALETTE = {
    ("knife", "handle"): (0.15, 0.12, 0.10), ("knife", "blade"): (0.75, 0.75, 0.78),
    ("spoon", "handle"): (0.70, 0.70, 0.72), ("spoon", "scoop"): (0.74, 0.74, 0.76),
    ("hammer", "handle"): (0.55, 0.38, 0.20), ("hammer", "head"): (0.25, 0.25, 0.28),
    ("tomato", "body"): (0.80, 0.15, 0.10), ("sausage", "sausage"): (0.60, 0.30, 0.25),
}


def _box(lo, hi, skip_bottom=True):
    return Surface("box", {"lo": list(lo), "hi": list(hi), "skip_bottom": skip_bottom})


def _tool_handle(p, label=L.GRASP, connect_gap=INSET):
    """Handle along +x from 0 to handle_len; kp2 is the end joining the working part."""
    lh, wh, hh = p["handle_len"], p["handle_w"], p["handle_h"]
    anchors = np.array([
        [INSET, 0.0, hh],
        [lh - connect_gap, 0.0, hh],
        [lh / 2, -wh / 2 + INSET, hh],
        [lh / 2, wh / 2 - INSET, hh],
    ])
    lo, hi = [0.0, -wh / 2, 0.0], [lh, wh / 2, hh]
    return Part("handle", label, [_box(lo, hi)], anchors, {"type": "box", "lo": lo, "hi": hi})


def build_parts(category: str, p: dict) -> list:
    """Parts of one object in its local frame (x = principal/away axis, z up)."""
    if category == "knife":
        lh, lb, wb, hb = p["handle_len"], p["blade_len"], p["blade_w"], p["blade_h"]
        handle = _tool_handle(p)
        lo, hi = [lh, -wb / 2, 0.0], [lh + lb, wb / 2, hb]
        # kp1 spine -> kp2 sharp edge is the cutting direction; kp3 joins the handle, kp4 is the tip
        blade = Part("blade", L.CUT, [_box(lo, hi)], np.array([
            [lh + lb / 2, wb / 2 - INSET, hb],
            [lh + lb / 2, -wb / 2 + INSET, hb],
            [lh + 0.006, 0.0, hb],
            [lh + lb - INSET, 0.0, hb],
        ]), {"type": "box", "lo": lo, "hi": hi, "edge_side": -1.0})
        return [handle, blade]
    if category == "spoon":
        lh, a, d = p["handle_len"], p["scoop_r"], p["scoop_d"]
        handle = _tool_handle(p)
        rc = (a * a + d * d) / (2 * d)
        centre = np.array([lh + a, 0.0, rc])
        cap = Surface("zone", {"r": rc, "polar0": math.pi - math.asin(a / rc), "polar1": math.pi,
                               "inward": True}, offset=centre)
        scoop = Part("scoop", L.SCOOP, [cap], np.array([
            [lh + a, 0.0, 0.0],
            [lh + 2 * a, 0.0, d],
            [lh + a, -a, d],
            [lh + a, a, d],
        ]), {"type": "cap", "center": [lh + a, 0.0, d], "radius": a, "depth": d})
        return [handle, scoop]
    if category == "hammer":
        lh, wd, ld, hd = p["handle_len"], p["head_w"], p["head_len"], p["head_h"]
        handle = _tool_handle(p, connect_gap=0.004)
        lo, hi = [lh, -ld / 2, 0.0], [lh + wd, ld / 2, hd]
        # head's principal axis is local y; kp2 sits on the striking face at -y
        head = Part("head", L.POUND, [_box(lo, hi)], np.array([
            [lh + wd / 2, ld / 2 - INSET, hd],
            [lh + wd / 2, -ld / 2 + INSET, hd],
            [lh + INSET, 0.0, hd],
            [lh + wd - INSET, 0.0, hd],
        ]), {"type": "box", "lo": lo, "hi": hi})
        return [handle, head]
    if category == "tomato":
        r = p["radius"]
        zone = Surface("zone", {"r": r, "polar0": 0.0, "polar1": math.pi}, offset=np.array([0.0, 0.0, r]))
        side = math.radians(20.0)
        return [Part("body", L.GRASP, [zone], np.array([
            [-r, 0.0, r],
            [0.0, 0.0, 2 * r],
            [-r * math.sin(side), -r * math.cos(side), r],
            [-r * math.sin(side), r * math.cos(side), r],
        ]), {"type": "sphere", "center": [0.0, 0.0, r], "radius": r})]
    if category == "bowl":
        rb = p["radius"]
        ro = rb + p["wall"]
        c = np.array([0.0, 0.0, ro])
        surfaces = [
            Surface("zone", {"r": rb, "polar0": math.pi / 2, "polar1": math.pi, "inward": True}, offset=c),
            Surface("zone", {"r": ro, "polar0": math.pi / 2, "polar1": math.pi}, offset=c),
            Surface("ring", {"r_in": rb, "r_out": ro, "z": ro}),
        ]
        return [Part("bowl", L.CONTAIN, surfaces, np.array([
            [0.0, 0.0, ro - rb],
            [rb, 0.0, ro],
            [0.0, -rb, ro],
            [0.0, rb, ro],
        ]), {"type": "bowl", "center": [0.0, 0.0, ro], "inner": rb, "outer": ro})]
    if category in ("cup", "mug"):
        ro, h, t, tb = p["radius"], p["height"], p["wall"], p["base"]
        ri = ro - t
        r_kp = ro  # outer rim edge, so kp pairs span the body diameter
        body = Part("body", L.WRAP_GRASP, [
            Surface("cyl", {"r": ro, "z0": 0.0, "z1": h}),
            Surface("ring", {"r_in": ri, "r_out": ro, "z": h}),
        ], np.array([
            # kp1-kp2: diametric grip pair; kp3-kp4: near/far rim pair through the axis
            [0.0, -r_kp, h],
            [0.0, r_kp, h],
            [-r_kp, 0.0, h],
            [r_kp, 0.0, h],
        ]), {"type": "cylinder", "radius": ro, "z0": 0.0, "z1": h})
        cavity = Part("cavity", L.CONTAIN, [
            Surface("cyl", {"r": ri, "z0": tb, "z1": h, "inward": True}),
            Surface("ring", {"r_in": 0.0, "r_out": ri, "z": tb}),
        ], np.array([
            [0.0, 0.0, tb],
            [ri, 0.0, h],
            [0.0, -ri, h],
            [0.0, ri, h],
        ]), {"type": "cavity", "radius": ri, "z0": tb, "z1": h})
        parts = [body, cavity]
        if category == "mug":
            gl, gw, gh = p["grip_len"], p["grip_w"], p["grip_h"]
            top = 0.65 * h
            lo, hi = [-gw / 2, -(ro + gl), top - gh], [gw / 2, -ro + 0.003, top]
            parts.append(Part("grip", L.GRASP, [_box(lo, hi)], np.array([
                [0.0, -(ro + gl) + INSET, top],
                [0.0, -ro - INSET, top],
                [-gw / 2 + INSET, -(ro + gl / 2), top],
                [gw / 2 - INSET, -(ro + gl / 2), top],
            ]), {"type": "box", "lo": lo, "hi": hi}))
        return parts
    if category == "sausage":
        r, length = p["radius"], p["length"]
        rot = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])  # canonical z -> local x
        off = np.array([0.0, 0.0, r])
        surfaces = [
            Surface("cyl", {"r": r, "z0": -length / 2, "z1": length / 2}, rot, off),
            Surface("ring", {"r_in": 0.0, "r_out": r, "z": length / 2}, rot, off),
            Surface("ring", {"r_in": 0.0, "r_out": r, "z": -length / 2, "up": False}, rot, off),
        ]
        return [Part("sausage", L.BACKGROUND, surfaces, None,
                     {"type": "hcylinder", "radius": r, "length": length, "center": [0.0, 0.0, r]})]
    raise DataError(f"unknown object category {category!r}")


def footprint(category: str, p: dict):
    """Local-frame (lo, hi) rectangle covering the object on the table."""
    if category == "knife":
        w = max(p["handle_w"], p["blade_w"]) / 2
        return np.array([0.0, -w]), np.array([p["handle_len"] + p["blade_len"], w])
    if category == "spoon":
        w = max(p["handle_w"] / 2, p["scoop_r"])
        return np.array([0.0, -w]), np.array([p["handle_len"] + 2 * p["scoop_r"], w])
    if category == "hammer":
        w = max(p["handle_w"], p["head_len"]) / 2
        return np.array([0.0, -w]), np.array([p["handle_len"] + p["head_w"], w])
    if category in ("tomato", "cup"):
        r = p["radius"]
        return np.array([-r, -r]), np.array([r, r])
    if category == "bowl":
        r = p["radius"] + p["wall"]
        return np.array([-r, -r]), np.array([r, r])
    if category == "mug":
        r = p["radius"]
        return np.array([-r, -(r + p["grip_len"])]), np.array([r, r])
    if category == "sausage":
        return np.array([-p["length"] / 2, -p["radius"]]), np.array([p["length"] / 2, p["radius"]])
    raise DataError(f"unknown object category {category!r}")


# --- scene layout ----------------------------------------------------------------

@dataclass
class CameraPose:
    rotation: np.ndarray  # world -> camera
    position: np.ndarray  # camera centre in world

    def world_to_camera(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=float) - self.position) @ self.rotation.T

    def camera_to_world(self, p) -> np.ndarray:
        return np.asarray(p, dtype=float) @ self.rotation + self.position

    def vector_to_world(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.rotation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "position": self.position.tolist()}

    @classmethod
    def from_dict(cls, d) -> "CameraPose":
        return cls(np.asarray(d["rotation"], dtype=float), np.asarray(d["position"], dtype=float))


def look_at(position, target) -> CameraPose:
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    z /= np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return CameraPose(np.vstack([x, y, z]), position)


@dataclass
class PlacedObject:
    category: str
    params: dict
    position: np.ndarray  # world xy of the local origin
    yaw: float
    colors: list  # one rgb per part

    def parts(self) -> list:
        parts = build_parts(self.category, self.params)
        for part, color in zip(parts, self.colors):
            part.color = tuple(color)
        return parts

    def to_world(self, p) -> np.ndarray:
        rot = prim.rotation_z(self.yaw)
        return np.asarray(p, dtype=float) @ rot.T + np.array([self.position[0], self.position[1], 0.0])

    def to_local(self, p) -> np.ndarray:
        rot = prim.rotation_z(self.yaw)
        return (np.asarray(p, dtype=float) - np.array([self.position[0], self.position[1], 0.0])) @ rot

    def to_dict(self) -> dict:
        return {"category": self.category, "params": {k: float(v) for k, v in sorted(self.params.items())},
                "position": [float(c) for c in self.position], "yaw": float(self.yaw),
                "colors": [[float(c) for c in col] for col in self.colors]}

    @classmethod
    def from_dict(cls, d) -> "PlacedObject":
        return cls(d["category"], dict(d["params"]), np.asarray(d["position"], dtype=float),
                   float(d["yaw"]), [list(c) for c in d["colors"]])


@dataclass
class SynthConfig:
    templates: tuple = CATEGORIES
    min_objects: int = 1
    max_objects: int = 3
    yaw_range_deg: float = 30.0
    workspace: tuple = (-0.18, 0.18, -0.14, 0.14)  # x0, x1, y0, y1 of footprint centres
    table: tuple = (-0.32, 0.32, -0.30, 0.30)
    gap: float = 0.04
    spacing: float = 0.002
    camera_distance: float = 0.6
    camera_tilt_deg: float = 40.0
    camera_azimuth_deg: float = 0.0
    camera_target: tuple = (0.0, 0.0, 0.0)
    camera_jitter_deg: float = 0.0
    intrinsics: dict = field(default_factory=lambda: {
        "fx": 200.0, "fy": 200.0, "cx": 79.5, "cy": 59.5, "width": 160, "height": 120})
    color_jitter: float = 0.06
    pixel_noise: float = 0.02
    grazing_cos: float = 0.08
    normal_k: int = 10
    min_part_points: int = 20
    connect_radius: float = 0.03
    max_attempts: int = 200
    layout_attempts: int = 5

    def __post_init__(self):
        unknown = [t for t in self.templates if t not in TEMPLATES]
        if unknown:
            raise ConfigError(f"unknown templates {unknown}")
        if not self.templates:
            raise ConfigError("config must list at least one template")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ConfigError("object count range must satisfy 1 <= min <= max")
        if self.max_objects > 4:
            raise ConfigError("scenes are limited to at most 4 objects")

    def camera_intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_dict(self.intrinsics)

    def render_settings(self) -> dict:
        return {"spacing": self.spacing, "color_jitter": self.color_jitter, "pixel_noise": self.pixel_noise,
                "grazing_cos": self.grazing_cos}


@dataclass
class SceneGroundTruth:
    cloud: PointCloudFrame
    labels: np.ndarray  # (N,) uint8
    instances: list
    camera: CameraPose
    intrinsics: CameraIntrinsics
    objects: list
    seed: int
    table: tuple
    render: dict
    table_color: tuple = (0.85, 0.80, 0.70)

    def instance_by_id(self, iid) -> AffordanceInstance:
        for inst in self.instances:
            if inst.id == iid:
                return inst
        raise KeyError(iid)


def make_camera(cfg: SynthConfig, rng) -> CameraPose:
    tilt = math.radians(cfg.camera_tilt_deg + cfg.camera_jitter_deg * rng.uniform(-1, 1))
    az = math.radians(cfg.camera_azimuth_deg + cfg.camera_jitter_deg * rng.uniform(-1, 1))
    target = np.asarray(cfg.camera_target, dtype=float)
    h = np.array([math.sin(az), -math.cos(az), 0.0])
    pos = target + cfg.camera_distance * (math.sin(tilt) * h + math.cos(tilt) * np.array([0.0, 0.0, 1.0]))
    return look_at(pos, target)


def _rect_corners(centre, half, yaw):
    rot = prim.rotation_z(yaw)[:2, :2]
    signs = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    return centre + (signs * half) @ rot.T


def _rects_overlap(a, b) -> bool:
    """Separating-axis test for two convex quads given as (4, 2) corner arrays."""
    for quad in (a, b):
        for i in range(4):
            edge = quad[(i + 1) % 4] - quad[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


def sample_params(category: str, rng) -> dict:
    ranges = TEMPLATES[category].size_ranges
    return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in ranges.items()}


def _colors(category: str, rng, jitter: float) -> list:
    names = [name for name, _ in TEMPLATES[category].parts]
    shared = rng.uniform(0.2, 0.9, 3)
    out = []
    for name in names:
        base = np.asarray(PALETTE.get((category, name), shared))
        out.append(np.clip(base + rng.uniform(-jitter, jitter, 3), 0.0, 1.0).tolist())
    return out


def place_objects(cfg: SynthConfig, rng, camera: CameraPose, categories=None) -> list:
    """Place objects on the table without overlap (footprints at least ``gap`` apart).

    Objects are placed one at a time by rejection sampling; if one cannot be
    placed the whole layout is restarted, up to ``cfg.layout_attempts`` times.
    """
    if categories is None:
        n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        categories = [cfg.templates[int(rng.integers(len(cfg.templates)))] for _ in range(n)]
    for _ in range(cfg.layout_attempts):
        placed = _try_layout(cfg, rng, camera, categories)
        if placed is not None:
            return placed
    raise PlacementError(
        f"could not place {list(categories)} in {cfg.layout_attempts} layouts of {cfg.max_attempts} "
        f"attempts per object; workspace {cfg.workspace} with gap {cfg.gap} is too crowded")


def _try_layout(cfg: SynthConfig, rng, camera: CameraPose, categories):
    x0, x1, y0, y1 = cfg.workspace
    tx0, tx1, ty0, ty1 = cfg.table
    placed, rects = [], []
    for category in categories:
        params = sample_params(category, rng)
        lo, hi = footprint(category, params)
        half = (hi - lo) / 2
        centre_local = (hi + lo) / 2
        colors = _colors(category, rng, cfg.color_jitter)
        jitter = math.radians(cfg.yaw_range_deg) * rng.uniform(-1, 1)
        for _ in range(cfg.max_attempts):
            centre = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
            view = centre - camera.position[:2]
            yaw = math.atan2(view[1], view[0])
            if category in TOOLS:
                yaw += math.pi / 2 + jitter
            elif category not in ROTATIONALLY_SYMMETRIC:
                yaw += jitter
            corners = _rect_corners(centre, half, yaw)
            if corners[:, 0].min() < tx0 or corners[:, 0].max() > tx1:
                continue
            if corners[:, 1].min() < ty0 or corners[:, 1].max() > ty1:
                continue
            grown = _rect_corners(centre, half + cfg.gap / 2, yaw)
            if any(_rects_overlap(grown, other) for other in rects):
                continue
            break
        else:
            return None
        origin = centre - prim.rotation_z(yaw)[:2, :2] @ centre_local
        rects.append(_rect_corners(centre, half + cfg.gap / 2, yaw))
        placed.append(PlacedObject(category, params, origin, yaw, colors))
    return placed


# --- rendering --------------------------------------------------------------------

@dataclass
class RenderResult:
    image: RgbdImage
    labels: np.ndarray  # (H, W) uint8
    part_index: np.ndarray  # (H, W) global part id, -1 for table/empty
    parts: list  # (object index, Part) per global part id


def _scene_parts(objects):
    out = []
    for oi, obj in enumerate(objects):
        for part in obj.parts():
            out.append((oi, part))
    return out


def render_views(scene, k: CameraIntrinsics | None = None) -> RenderResult:
    """Z-buffer point rasterisation of the densely sampled scene surfaces.

    Each pixel keeps the nearest camera-facing surface sample; its depth is
    refined by intersecting the pixel ray with that sample's tangent plane.
    Grazing-incidence pixels are returned invalid, as a depth sensor would.
    The table plane is ray-cast analytically.
    """
    k = k or scene.intrinsics
    settings = scene.render
    spacing = settings["spacing"]
    cam = scene.camera
    parts = _scene_parts(scene.objects)
    w, h = k.width, k.height

    pts, nrm, gid = [], [], []
    for g, (oi, part) in enumerate(parts):
        obj = scene.objects[oi]
        rot = prim.rotation_z(obj.yaw)
        for surf in part.surfaces:
            p, n = surf.sample(spacing)
            pts.append(obj.to_world(p))
            nrm.append(n @ rot.T)
            gid.append(np.full(len(p), g))
    if pts:
        pc = cam.world_to_camera(np.concatenate(pts))
        nc = np.concatenate(nrm) @ cam.rotation.T
        gid = np.concatenate(gid)
        facing = (np.einsum("ij,ij->i", nc, -pc) > 0) & (pc[:, 2] > 1e-6)
        pc, nc, gid = pc[facing], nc[facing], gid[facing]
    else:
        pc, nc, gid = np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=int)

    z = pc[:, 2]
    safe = np.where(z > 0, z, 1.0)
    u = pc[:, 0] * k.fx / safe + k.cx
    v = pc[:, 1] * k.fy / safe + k.cy
    winner = kernels.zbuffer(u, v, z, w, h)

    pix = np.arange(w * h)
    ray = np.column_stack([(pix % w - k.cx) / k.fx, (pix // w - k.cy) / k.fy, np.ones(w * h)])

    depth = np.zeros(w * h)
    part_img = np.full(w * h, -1, dtype=np.int64)
    hit = np.flatnonzero(winner >= 0)
    if hit.size:
        s = winner[hit]
        n_s, p_s, d = nc[s], pc[s], ray[hit]
        denom = np.einsum("ij,ij->i", n_s, d)
        cosine = np.abs(denom) / np.linalg.norm(d, axis=1)
        t = np.einsum("ij,ij->i", n_s, p_s) / np.where(np.abs(denom) > 1e-12, denom, 1e-12)
        slide = np.linalg.norm(t[:, None] * d - p_s, axis=1)
        footprint_px = p_s[:, 2] / min(k.fx, k.fy)
        good = (cosine >= settings["grazing_cos"]) & (slide <= 1.5 * footprint_px) & (t > 0)
        depth[hit[good]] = t[good]
        part_img[hit[good]] = gid[s[good]]
        # an object sample was there even if its depth is unusable: keep the pixel empty
        part_img[hit[~good]] = -2

    # table plane z = 0 in world
    ray_w = ray @ cam.rotation
    with np.errstate(divide="ignore", invalid="ignore"):
        t_tab = -cam.position[2] / ray_w[:, 2]
    hit_w = cam.position + t_tab[:, None] * ray_w
    tx0, tx1, ty0, ty1 = scene.table
    on_table = (t_tab > 0) & (hit_w[:, 0] >= tx0) & (hit_w[:, 0] <= tx1) & (hit_w[:, 1] >= ty0) & (hit_w[:, 1] <= ty1)
    table_wins = on_table & ((part_img == -1) | ((part_img >= 0) & (t_tab < depth)))
    depth[table_wins] = t_tab[table_wins]
    part_img[table_wins] = -1
    part_img[part_img == -2] = -1

    rng = np.random.default_rng([int(scene.seed), 1])
    rgb = np.zeros((w * h, 3))
    colors = np.array([part.color for _, part in parts] + [scene.table_color])
    obj_px = part_img >= 0
    rgb[obj_px] = colors[part_img[obj_px]]
    rgb[table_wins] = colors[-1]
    rgb += rng.normal(0.0, settings["pixel_noise"], rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)
    rgb[depth == 0] = 0.0

    label_lut = np.array([part.label for _, part in parts] + [0], dtype=np.uint8)
    lab = np.where(part_img >= 0, label_lut[part_img], 0).astype(np.uint8)
    if not np.any(part_img >= 0):
        raise EmptyCloudError("camera sees no object")
    return RenderResult(RgbdImage(depth.reshape(h, w), rgb.reshape(h, w, 3)),
                        lab.reshape(h, w), part_img.reshape(h, w), parts)


# --- ground truth ---------------------------------------------------------------

def _largest_component(xyz, radius):
    if len(xyz) < 2:
        return np.arange(len(xyz))
    pairs = cKDTree(xyz).query_pairs(radius, output_type="ndarray")
    from scipy.sparse import coo_matrix
    n = len(xyz)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    counts = np.bincount(comp)
    return np.flatnonzero(comp == np.argmax(counts))


def _assemble(layout: SceneGroundTruth, cfg: SynthConfig) -> SceneGroundTruth:
    k = layout.intrinsics
    rendered = render_views(layout, k)
    cloud = quantize(estimate_normals(backproject(rendered.image, k), cfg.normal_k))
    part_of = rendered.part_index.reshape(-1)[cloud.pixel_index]
    labels = rendered.labels.reshape(-1)[cloud.pixel_index].astype(np.uint8)

    instances = []
    for g, (oi, part) in enumerate(rendered.parts):
        if part.label == L.BACKGROUND:
            continue
        members = np.flatnonzero(part_of == g)
        keep = members[_largest_component(cloud.xyz[members], cfg.connect_radius)] if members.size else members
        anchors = None
        if keep.size >= cfg.min_part_points:
            obj = layout.objects[oi]
            anchors_cam = layout.camera.world_to_camera(obj.to_world(part.anchors))
            _, nearest = cKDTree(cloud.xyz[keep]).query(anchors_cam)
            anchors = cloud.xyz[keep[nearest]]
            d = np.linalg.norm(anchors[:, None] - anchors[None], axis=2)
            if d[np.triu_indices(4, 1)].min() < 0.005:
                anchors = None
        if anchors is None:
            labels[members] = L.BACKGROUND
            continue
        dropped = np.setdiff1d(members, keep)
        labels[dropped] = L.BACKGROUND
        instances.append(AffordanceInstance(len(instances), part.label, keep, anchors))
    if not instances:
        raise EmptyCloudError("scene has no visible affordance instance")
    return SceneGroundTruth(cloud, labels, instances, layout.camera, k, layout.objects,
                            layout.seed, layout.table, layout.render, layout.table_color)


def make_layout(cfg: SynthConfig, seed: int, categories=None) -> SceneGroundTruth:
    """Camera and object placement only (no cloud yet)."""
    rng = np.random.default_rng(seed)
    camera = make_camera(cfg, rng)
    objects = place_objects(cfg, rng, camera, categories)
    table_color = tuple(np.clip(np.array([0.85, 0.80, 0.70]) + rng.uniform(-0.05, 0.05, 3), 0, 1).tolist())
    empty = PointCloudFrame(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    return SceneGroundTruth(empty, np.zeros(0, dtype=np.uint8), [], camera, cfg.camera_intrinsics(),
                            objects, int(seed), tuple(cfg.table), cfg.render_settings(), table_color)


def sample_scene(cfg: SynthConfig, seed: int, categories=None) -> SceneGroundTruth:
    """Generate one labelled scene, deterministic in ``seed``."""
    return _assemble(make_layout(cfg, seed, categories), cfg)


def scene_from_objects(cfg: SynthConfig, objects, seed: int = 0, camera: CameraPose | None = None):
    """Assemble a scene from hand-placed objects (tests, task set-ups)."""
    layout = make_layout(cfg, seed, categories=[])
    layout.objects = list(objects)
    if camera is not None:
        layout.camera = camera
    return _assemble(layout, cfg)


# --- persistence ---------------------------------------------------------------

def scene_dirname(seed: int) -> str:
    return f"scene_{seed}"


def save_scene(scene: SceneGroundTruth, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ply(d / "cloud.ply", scene.cloud)
    (d / "labels.bin").write_bytes(np.asarray(scene.labels, dtype=np.uint8).tobytes())
    write_instances(d / "instances.json", scene.instances)
    camera = {"intrinsics": scene.intrinsics.to_dict(), "pose": scene.camera.to_dict()}
    (d / "camera.json").write_text(json.dumps(camera, sort_keys=True, indent=1) + "\n")
    meta = {"seed": int(scene.seed), "table": list(scene.table), "render": scene.render,
            "table_color": list(scene.table_color), "objects": [o.to_dict() for o in scene.objects]}
    (d / "objects.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return d


def load_scene(directory) -> SceneGroundTruth:
    d = Path(directory)
    try:
        cloud = read_ply(d / "cloud.ply")
        labels = np.frombuffer((d / "labels.bin").read_bytes(), dtype=np.uint8).copy()
        instances, _ = read_instances(d / "instances.json")
        camera = json.loads((d / "camera.json").read_text())
        meta = json.loads((d / "objects.json").read_text())
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot load scene {d}: {exc}") from exc
    if len(labels) != len(cloud):
        raise DataError(f"{d}: labels.bin has {len(labels)} entries for {len(cloud)} points")
    return SceneGroundTruth(cloud, labels, instances, CameraPose.from_dict(camera["pose"]),
                            CameraIntrinsics.from_dict(camera["intrinsics"]),
                            [PlacedObject.from_dict(o) for o in meta["objects"]], int(meta["seed"]),
                            tuple(meta["table"]), dict(meta["render"]), tuple(meta["table_color"]))


def gt_offsets(scene_or_cloud, instances, n_points: int | None = None):
    """Per-point ground-truth offsets (N, 4, 3) and in-region mask (N,)."""
    xyz = scene_or_cloud.cloud.xyz if hasattr(scene_or_cloud, "cloud") else np.asarray(scene_or_cloud)
    n = len(xyz) if n_points is None else n_points
    offsets = np.zeros((n, 4, 3))
    mask = np.zeros(n, dtype=bool)
    for inst in instances:
        idx = inst.point_indices
        offsets[idx] = inst.keypoints[None, :, :] - xyz[idx, None, :]
        mask[idx] = True
    return offsets, mask
