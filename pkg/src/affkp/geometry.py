"""RGB-D to point cloud: pinhole back-projection, normals, seed subsampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, EmptyCloudError

FALLBACK_NORMAL = np.array([0.0, 0.0, -1.0])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DataError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DataError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {"fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx),
                "cy": float(self.cy), "width": int(self.width), "height": int(self.height)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        keys = {"fx", "fy", "cx", "cy", "width", "height"}
        if set(d) != keys:
            raise DataError(f"intrinsics must have exactly the fields {sorted(keys)}, got {sorted(d)}")
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass
class RgbdImage:
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    rgb: np.ndarray  # (H, W, 3) in [0, 1]

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.rgb is None:
            self.rgb = np.full(self.depth.shape + (3,), 0.5)
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.depth.ndim != 2 or self.rgb.shape != self.depth.shape + (3,):
            raise DataError("depth must be HxW and rgb HxWx3")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise DataError("depth must be finite and non-negative")
        if np.any(self.rgb < 0) or np.any(self.rgb > 1):
            raise DataError("rgb channels must lie in [0, 1]")


@dataclass
class PointCloudFrame:
    xyz: np.ndarray
    rgb: np.ndarray
    normal: np.ndarray
    pixel_index: np.ndarray
    # True where the normal is the fallback for a degenerate neighbourhood
    flagged: np.ndarray = field(default=None)

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64)
        n = len(self.xyz)
        self.rgb = np.asarray(self.rgb, dtype=np.float64).reshape(n, 3)
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(n, 3)
        self.pixel_index = np.asarray(self.pixel_index, dtype=np.int64).reshape(n)
        if self.flagged is None:
            self.flagged = np.zeros(n, dtype=bool)
        self.flagged = np.asarray(self.flagged, dtype=bool).reshape(n)

    def __len__(self) -> int:
        return len(self.xyz)

    def take(self, idx) -> "PointCloudFrame":
        idx = np.asarray(idx)
        return PointCloudFrame(self.xyz[idx], self.rgb[idx], self.normal[idx],
                               self.pixel_index[idx], self.flagged[idx])

    def validate(self) -> None:
        if len(self) == 0:
            raise EmptyCloudError("point cloud is empty")
        for name in ("xyz", "rgb", "normal"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"cloud {name} contains NaN/Inf")
        norms = np.linalg.norm(self.normal, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise DataError("cloud normals are not unit length")


def backproject(img: RgbdImage, k: CameraIntrinsics) -> PointCloudFrame:
    """Lift every positive-depth pixel to a camera-frame 3D point.

    Normals are left at the flagged fallback; run :func:`estimate_normals`.
    """
    h, w = img.depth.shape
    if (w, h) != (k.width, k.height):
        raise DataError(f"image is {w}x{h} but intrinsics say {k.width}x{k.height}")
    flat = img.depth.reshape(-1)
    pix = np.flatnonzero(flat > 0)
    if pix.size == 0:
        raise EmptyCloudError("depth image has no valid pixels")
    z = flat[pix]
    u = (pix % w).astype(np.float64)
    v = (pix // w).astype(np.float64)
    xyz = np.column_stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z])
    rgb = img.rgb.reshape(-1, 3)[pix]
    normal = np.tile(FALLBACK_NORMAL, (pix.size, 1))
    return PointCloudFrame(xyz, rgb, normal, pix, np.ones(pix.size, dtype=bool))


def project(xyz, k: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points to continuous (u, v) pixel coordinates."""
    xyz = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
    u = xyz[:, 0] * k.fx / xyz[:, 2] + k.cx
    v = xyz[:, 1] * k.fy / xyz[:, 2] + k.cy
    return np.column_stack([u, v])


def estimate_normals(cloud: PointCloudFrame, k_neighbors: int = 10) -> PointCloudFrame:
    """PCA normals over the k nearest neighbours, oriented toward the camera.

    Neighbourhoods whose covariance has rank < 2 (coincident or collinear
    points) get the fallback normal (0, 0, -1) and are flagged.
    """
    n = len(cloud)
    if k_neighbors < 3 or n < k_neighbors:
        raise DataError(f"need N >= k_neighbors >= 3 (N={n}, k={k_neighbors})")
    xyz = cloud.xyz
    _, nbr = cKDTree(xyz).query(xyz, k=k_neighbors)
    pts = xyz[nbr]
    centred = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / k_neighbors
    evals, evecs = np.linalg.eigh(cov)
    normal = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = (evals[:, 2] <= 1e-24) | (evals[:, 1] <= 1e-10 * scale)
    flip = np.einsum("ij,ij->i", normal, -xyz) < 0
    normal[flip] *= -1
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    normal[degenerate] = FALLBACK_NORMAL
    return PointCloudFrame(xyz, cloud.rgb, normal, cloud.pixel_index, degenerate)


def normal_quality(cloud: PointCloudFrame) -> dict:
    return {"points": len(cloud), "flagged_normals": int(cloud.flagged.sum())}


def subsample_indices(n: int, target_n: int, seed: int) -> np.ndarray:
    """Sorted indices of a uniform draw without replacement (identity if n <= target_n)."""
    if target_n < 1:
        raise DataError("target_n must be >= 1")
    if n <= target_n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=target_n, replace=False))


def subsample(cloud: PointCloudFrame, target_n: int, seed: int) -> PointCloudFrame:
    return cloud.take(subsample_indices(len(cloud), target_n, seed))


# --- file formats -----------------------------------------------------------

_PLY_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
])
_PLY_TYPES = {"<f4": "float", "|u1": "uchar"}


def quantize(cloud: PointCloudFrame) -> PointCloudFrame:
    """Round a cloud to exactly what the PLY file stores."""
    xyz = cloud.xyz.astype(np.float32).astype(np.float64)
    rgb = np.round(np.clip(cloud.rgb, 0, 1) * 255).astype(np.uint8) / 255.0
    normal = cloud.normal.astype(np.float32).astype(np.float64)
    return PointCloudFrame(xyz, rgb, normal, cloud.pixel_index, cloud.flagged)


def write_ply(path, cloud: PointCloudFrame) -> None:
    data = np.empty(len(cloud), dtype=_PLY_DTYPE)
    for i, c in enumerate("xyz"):
        data[c] = cloud.xyz[:, i]
    for i, c in enumerate(("red", "green", "blue")):
        data[c] = np.round(np.clip(cloud.rgb[:, i], 0, 1) * 255).astype(np.uint8)
    for i, c in enumerate(("nx", "ny", "nz")):
        data[c] = cloud.normal[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    for name in _PLY_DTYPE.names:
        header.append(f"property {_PLY_TYPES[_PLY_DTYPE[name].str]} {name}")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path) -> PointCloudFrame:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise DataError(f"{path}: only binary little-endian PLY is supported")
    count = None
    props = []
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "property":
            props.append(parts[2])
    if count is None or tuple(props) != _PLY_DTYPE.names:
        raise DataError(f"{path}: unexpected PLY layout {props}")
    body = raw[end + len(b"end_header\n"):]
    if len(body) != count * _PLY_DTYPE.itemsize:
        raise DataError(f"{path}: truncated PLY body")
    data = np.frombuffer(body, dtype=_PLY_DTYPE, count=count)
    xyz = np.column_stack([data["x"], data["y"], data["z"]]).astype(np.float64)
    rgb = np.column_stack([data["red"], data["green"], data["blue"]]).astype(np.float64) / 255.0
    normal = np.column_stack([data["nx"], data["ny"], data["nz"]]).astype(np.float64)
    return PointCloudFrame(xyz, rgb, normal, np.arange(count))


def write_depth(path, depth, k: CameraIntrinsics, sidecar=None) -> None:
    depth = np.asarray(depth, dtype="<f4")
    if depth.shape != (k.height, k.width):
        raise DataError("depth shape does not match intrinsics")
    Path(path).write_bytes(np.ascontiguousarray(depth).tobytes())
    sidecar = Path(sidecar) if sidecar else Path(str(path) + ".json")
    sidecar.write_text(json.dumps(k.to_dict(), sort_keys=True, indent=2) + "\n")


def read_depth(path, sidecar=None):
    """Read a raw float32 depth map and its intrinsics sidecar."""
    sidecar = Path(sidecar) if sidecar else Path(str(path) + ".json")
    try:
        k = CameraIntrinsics.from_dict(json.loads(sidecar.read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read intrinsics sidecar {sidecar}: {exc}") from exc
    raw = Path(path).read_bytes()
    if len(raw) != 4 * k.width * k.height:
        raise DataError(f"{path}: expected {k.width}x{k.height} float32 values")
    depth = np.frombuffer(raw, dtype="<f4").reshape(k.height, k.width).astype(np.float64)
    return depth, k
