"""Toy per-point encoder with a segmentation head and a keypoint-offset head.

Architecture
------------
* appearance branch: per-point MLP over ``[rgb, normal]``
* geometry branch: per-point MLP over centred, scaled ``xyz``; its
  per-dimension maximum over all points is appended to every point
* fusion layer over ``[appearance, geometry, global context]``
* optional local hops: each point max-pools ``W_n f_j + W_p (x_j - x_i)``
  over its k nearest neighbours and mixes the result back residually
* segmentation head: 7-way softmax scores
* part pooling: points are grouped into connected same-label segments
  (ground-truth labels while training, predicted labels otherwise); each
  segment max-pools ``e_j = MLP[f_j, x_j - c]`` about its centroid ``c``
* keypoint head: per slot, each point proposes ``x_j + delta_j`` and a
  softmax over the segment's points weights the proposals; an MLP on the
  pooled descriptor adds a residual; every member votes the same keypoints

Gradients are written out by hand; :func:`backward` consumes the cache
returned by :func:`forward_train`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import kernels
from . import labels as L
from .errors import ConfigError, ModelError
from .geometry import PointCloudFrame, subsample_indices

SLOPE = 0.01
N_SLOTS = 4
CHECKPOINT_MAGIC = b"AFFKPCKP"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    appearance_dims: tuple = (32, 32)
    geometry_dims: tuple = (32, 32)
    feature_dim: int = 64
    local_hops: int = 1
    k_neighbors: int = 16
    xyz_scale: float = 0.2
    hop_scale: float = 0.05
    offset_scale: float = 0.1
    part_dim: int = 64
    part_scale: float = 0.05
    segment_radius: float = 0.03
    vote_scale: float = 0.02

    def __post_init__(self):
        self.appearance_dims = tuple(int(d) for d in self.appearance_dims)
        self.geometry_dims = tuple(int(d) for d in self.geometry_dims)
        dims = self.appearance_dims + self.geometry_dims + (self.feature_dim, self.part_dim)
        if not self.appearance_dims or not self.geometry_dims or min(dims) < 1:
            raise ConfigError(f"every layer needs at least one unit, got {dims}")
        if self.local_hops < 0 or (self.local_hops and self.k_neighbors < 1):
            raise ConfigError("local_hops must be >= 0 and k_neighbors >= 1")
        if min(self.xyz_scale, self.hop_scale, self.offset_scale, self.part_scale, self.segment_radius,
               self.vote_scale) <= 0:
            raise ConfigError("scales must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["appearance_dims"] = list(self.appearance_dims)
        d["geometry_dims"] = list(self.geometry_dims)
        return d

    def layer_shapes(self) -> dict:
        """Weight shapes (fan_in, fan_out) keyed by layer name, in a fixed order."""
        shapes = {}
        prev = 6
        for i, d in enumerate(self.appearance_dims):
            shapes[f"app{i}"] = (prev, d)
            prev = d
        prev = 3
        for i, d in enumerate(self.geometry_dims):
            shapes[f"geo{i}"] = (prev, d)
            prev = d
        fan_in = self.appearance_dims[-1] + 2 * self.geometry_dims[-1]
        shapes["fuse"] = (fan_in, self.feature_dim)
        for h in range(self.local_hops):
            shapes[f"hop{h}_n"] = (self.feature_dim, self.feature_dim)
            shapes[f"hop{h}_p"] = (3, self.feature_dim)
            shapes[f"hop{h}_s"] = (2 * self.feature_dim, self.feature_dim)
        shapes["seg"] = (self.feature_dim, L.NUM_CLASSES)
        shapes["part_e"] = (self.feature_dim + 3, self.part_dim)
        shapes["part_h"] = (self.part_dim, self.part_dim)
        shapes["off"] = (self.part_dim, 3 * N_SLOTS)
        shapes["att_h"] = (2 * self.part_dim, self.part_dim)
        shapes["att"] = (self.part_dim, 4 * N_SLOTS)
        return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)  # "<layer>.W" / "<layer>.b" -> float32 array

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def names(self) -> list:
        return list(self.tensors)

    def check_shapes(self) -> None:
        expected = expected_tensor_shapes(self.config)
        if list(expected) != list(self.tensors):
            raise ModelError(f"tensor names {list(self.tensors)} do not match config {list(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ModelError(f"tensor {name} has shape {self.tensors[name].shape}, config expects {shape}")

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors.values())


def expected_tensor_shapes(cfg: ModelConfig) -> dict:
    out = {}
    for layer, (fi, fo) in cfg.layer_shapes().items():
        out[f"{layer}.W"] = (fi, fo)
        out[f"{layer}.b"] = (fo,)
    return out


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for layer, (fi, fo) in config.layer_shapes().items():
        s = np.sqrt(6.0 / (fi + fo))
        tensors[f"{layer}.W"] = rng.uniform(-s, s, size=(fi, fo)).astype(np.float32)
        tensors[f"{layer}.b"] = np.zeros(fo, dtype=np.float32)
    return ModelParams(config, tensors)


def zero_params(config: ModelConfig) -> ModelParams:
    return ModelParams(config, {n: np.zeros(s, dtype=np.float32) for n, s in expected_tensor_shapes(config).items()})


# --- forward / backward ------------------------------------------------------------

def _lrelu(x):
    return np.where(x > 0, x, SLOPE * x)


def _lrelu_grad(x):
    return np.where(x > 0, 1.0, SLOPE).astype(x.dtype)


def _check(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"non-finite values produced in layer {name!r}")


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def neighbours(xyz, k: int) -> np.ndarray:
    k = min(k, len(xyz))
    _, idx = cKDTree(xyz).query(xyz, k=k)
    return np.asarray(idx, dtype=np.int64).reshape(len(xyz), k)


def segment_ids(xyz, labels, radius: float) -> np.ndarray:
    """Connected components of equal-label points under the ``radius`` ball graph.

    Ids run 0..S-1 in order of each segment's smallest point index.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(xyz)
    pairs = cKDTree(xyz).query_pairs(radius, output_type="ndarray")
    pairs = pairs[labels[pairs[:, 0]] == labels[pairs[:, 1]]]
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    _, first = np.unique(comp, return_index=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[comp]


def _segment_max(h, seg, n_seg):
    """Per-segment channel maximum and the point index attaining it (first in index order)."""
    order = np.argsort(seg, kind="stable")
    starts = np.searchsorted(seg[order], np.arange(n_seg))
    hs = h[order]
    gmax = np.maximum.reduceat(hs, starts, axis=0)
    pos = np.where(hs == gmax[seg[order]], np.arange(len(h))[:, None], len(h))
    first = np.minimum.reduceat(pos, starts, axis=0)
    return gmax, order[first]


def _segment_sum(v, seg, n_seg):
    """Column-wise sums of ``v`` (N, C) per segment, shape (S, C)."""
    return np.stack([np.bincount(seg, weights=v[:, c], minlength=n_seg) for c in range(v.shape[1])], axis=1)


def forward_train(cloud: PointCloudFrame, params: ModelParams, dtype=np.float32, segments=None):
    """Forward pass that also returns the cache needed by :func:`backward`.

    ``segments`` fixes the per-point segment ids used for part pooling; by
    default they come from the predicted labels.
    """
    cfg = params.config
    n = len(cloud)
    if n == 0:
        raise ModelError("cannot run the model on an empty cloud")
    t = {k: v.astype(dtype, copy=False) for k, v in params.tensors.items()}
    cache = {"dtype": dtype, "n": n}

    def dense(name, x, act=True):
        pre = x @ t[f"{name}.W"] + t[f"{name}.b"]
        _check(name, pre)
        cache[name] = (x, pre)
        return _lrelu(pre) if act else pre

    a = np.concatenate([cloud.rgb, cloud.normal], axis=1).astype(dtype)
    for i in range(len(cfg.appearance_dims)):
        a = dense(f"app{i}", a)
    xyz = cloud.xyz
    centre = xyz.mean(axis=0)
    g = ((xyz - centre) / cfg.xyz_scale).astype(dtype)
    for i in range(len(cfg.geometry_dims)):
        g = dense(f"geo{i}", g)
    arg_ctx = np.argmax(g, axis=0)
    ctx = g[arg_ctx, np.arange(g.shape[1])]
    cache["ctx_arg"] = arg_ctx
    f = dense("fuse", np.concatenate([a, g, np.broadcast_to(ctx, g.shape)], axis=1))

    if cfg.local_hops:
        nbr = neighbours(xyz, cfg.k_neighbors)
        rel = ((xyz[nbr] - xyz[:, None, :]) / cfg.hop_scale).astype(dtype)  # (N, k, 3)
        cache["nbr"], cache["rel"] = nbr, rel
        for h in range(cfg.local_hops):
            p = f @ t[f"hop{h}_n.W"] + t[f"hop{h}_n.b"]
            zmax, arg = kernels.neighbour_max(p, rel, t[f"hop{h}_p.W"], nbr)
            _check(f"hop{h}_n", zmax)
            m = _lrelu(zmax)
            x = np.concatenate([f, m], axis=1)
            pre = x @ t[f"hop{h}_s.W"] + t[f"hop{h}_s.b"]
            _check(f"hop{h}_s", pre)
            cache[f"hop{h}"] = (f, arg, zmax, x, pre)
            f = _lrelu(pre) + f
    cache["features"] = f
    logits = dense("seg", f, act=False).astype(np.float64)
    scores = softmax(logits)
    _check("seg", scores)

    if segments is None:
        segments = segment_ids(xyz, scores.argmax(axis=1), cfg.segment_radius)
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != (n,) or seg.min() < 0:
        raise ModelError("segments must give a non-negative id per point")
    n_seg = int(seg.max()) + 1
    count = np.bincount(seg, minlength=n_seg)
    if np.any(count == 0):
        raise ModelError("segment ids must be contiguous")
    centroid = _segment_sum(xyz, seg, n_seg) / count[:, None]
    rel = ((xyz - centroid[seg]) / cfg.part_scale).astype(dtype)
    e = dense("part_e", np.concatenate([f, rel], axis=1))
    pooled, arg_part = _segment_max(e, seg, n_seg)
    hidden = dense("part_h", pooled)
    r = dense("off", hidden, act=False).astype(np.float64) * cfg.offset_scale
    _check("off", r)
    ah = dense("att_h", np.concatenate([e, pooled[seg]], axis=1))
    att = dense("att", ah, act=False).astype(np.float64)
    logits = att[:, :N_SLOTS] - _segment_max(att[:, :N_SLOTS], seg, n_seg)[0][seg]
    w = np.exp(logits)
    w /= _segment_sum(w, seg, n_seg)[seg]
    _check("att", w)
    prop = xyz[:, None, :] + att[:, N_SLOTS:].reshape(n, N_SLOTS, 3) * cfg.vote_scale
    kp = _segment_sum((w[:, :, None] * prop).reshape(n, -1), seg, n_seg).reshape(n_seg, N_SLOTS, 3)
    kp += r.reshape(n_seg, N_SLOTS, 3)
    cache["part"] = (seg, n_seg, arg_part, w, prop)
    off = kp[seg] - xyz[:, None, :]
    cache["scores"] = scores
    return scores, off, f, cache


def forward(cloud: PointCloudFrame, params: ModelParams, dtype=np.float32, segments=None):
    """Per-point class scores (N, 7), offsets (N, 4, 3) and fused features (N, D)."""
    scores, off, feats, _ = forward_train(cloud, params, dtype, segments)
    return scores, off, feats


def backward(cache, params: ModelParams, d_scores, d_offsets) -> dict:
    """Gradients of a scalar objective given its derivatives w.r.t. the outputs."""
    cfg = params.config
    dtype = cache["dtype"]
    t = {k: v.astype(dtype, copy=False) for k, v in params.tensors.items()}
    grads = {}
    n = cache["n"]

    def dense_back(name, dout, act=True):
        x, pre = cache[name]
        if act:
            dout = dout * _lrelu_grad(pre)
        grads[f"{name}.W"] = x.T @ dout
        grads[f"{name}.b"] = dout.sum(axis=0)
        return dout @ t[f"{name}.W"].T

    scores = cache["scores"]
    d_scores = np.asarray(d_scores, dtype=np.float64)
    d_logits = scores * (d_scores - (d_scores * scores).sum(axis=1, keepdims=True))
    df = dense_back("seg", d_logits.astype(dtype), act=False)
    seg, n_seg, arg_part, w, prop = cache["part"]
    d_point = np.asarray(d_offsets, dtype=np.float64).reshape(n, N_SLOTS, 3)
    d_kp = _segment_sum(d_point.reshape(n, -1), seg, n_seg).reshape(n_seg, N_SLOTS, 3)
    d_hidden = dense_back("off", (d_kp.reshape(n_seg, -1) * cfg.offset_scale).astype(dtype), act=False)
    d_pooled = dense_back("part_h", d_hidden).astype(np.float64)
    d_w = np.einsum("nkc,nkc->nk", d_kp[seg], prop)
    d_logits = w * (d_w - _segment_sum(w * d_w, seg, n_seg)[seg])
    d_delta = (w[:, :, None] * d_kp[seg]).reshape(n, -1) * cfg.vote_scale
    d_ah = dense_back("att", np.concatenate([d_logits, d_delta], axis=1).astype(dtype), act=False)
    d_in = dense_back("att_h", d_ah)
    p_dim = cfg.part_dim
    d_e = d_in[:, :p_dim].astype(np.float64)
    d_pooled += _segment_sum(d_in[:, p_dim:].astype(np.float64), seg, n_seg)
    np.add.at(d_e, (arg_part, np.arange(p_dim)[None, :]), d_pooled)
    d_e = d_e.astype(dtype)
    df = df + dense_back("part_e", d_e)[:, :cfg.feature_dim]

    for h in reversed(range(cfg.local_hops)):
        f_in, arg, zmax, x, pre = cache[f"hop{h}"]
        d = f_in.shape[1]
        dpre = df * _lrelu_grad(pre)
        grads[f"hop{h}_s.W"] = x.T @ dpre
        grads[f"hop{h}_s.b"] = dpre.sum(axis=0)
        dx = dpre @ t[f"hop{h}_s.W"].T
        df_in = df + dx[:, :d]
        dz = dx[:, d:] * _lrelu_grad(zmax)  # (N, D) at the argmax neighbour
        dp, dwp = kernels.neighbour_max_backward(dz, arg, cache["nbr"], cache["rel"])
        dp = dp.astype(dtype)
        grads[f"hop{h}_p.W"] = dwp
        grads[f"hop{h}_n.W"] = f_in.T @ dp
        grads[f"hop{h}_n.b"] = dp.sum(axis=0)
        df = df_in + dp @ t[f"hop{h}_n.W"].T

    dcat = dense_back("fuse", df)
    da_dim = cfg.appearance_dims[-1]
    dg_dim = cfg.geometry_dims[-1]
    da = dcat[:, :da_dim]
    dg = dcat[:, da_dim:da_dim + dg_dim].copy()
    dctx = dcat[:, da_dim + dg_dim:].sum(axis=0)
    dg[cache["ctx_arg"], np.arange(dg_dim)] += dctx
    for i in reversed(range(len(cfg.geometry_dims))):
        dg = dense_back(f"geo{i}", dg)
    for i in reversed(range(len(cfg.appearance_dims))):
        da = dense_back(f"app{i}", da)
    for h in range(cfg.local_hops):
        grads.setdefault(f"hop{h}_p.b", np.zeros(cfg.feature_dim, dtype=dtype))
    return {name: grads[name].astype(np.float64) for name in params.tensors}


# --- dense prediction --------------------------------------------------------------

def predict_dense(cloud: PointCloudFrame, params: ModelParams, n_seeds: int, seed: int):
    """Run the model on a seed subsample and carry results to every cloud point.

    Each point takes the scores of its nearest seed and that seed's voted
    keypoint positions, so its offset is ``x_seed + of_seed - x_point``.
    Returns (scores (N, 7), offsets (N, 4, 3), seed indices).
    """
    idx = subsample_indices(len(cloud), n_seeds, seed)
    seeds = cloud.take(idx)
    scores_s, off_s, _ = forward(seeds, params)
    if len(idx) == len(cloud):
        return scores_s, off_s, idx
    _, nearest = cKDTree(seeds.xyz).query(cloud.xyz)
    scores = scores_s[nearest]
    votes = seeds.xyz[nearest, None, :] + off_s[nearest]
    return scores, votes - cloud.xyz[:, None, :], idx


# --- checkpoint format -------------------------------------------------------------

def save_checkpoint(path, params: ModelParams) -> None:
    """Binary checkpoint: magic, version, tensor count, then (name, shape, float32 data) records."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params.tensors))]
    for name, arr in params.tensors.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    Path(str(path) + ".json").write_text(json.dumps(params.config.to_dict(), sort_keys=True, indent=1) + "\n")


def read_checkpoint_tensors(path) -> dict:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ModelError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    try:
        version, count = struct.unpack_from("<II", raw, pos)
        pos += 8
        if version != CHECKPOINT_VERSION:
            raise ModelError(f"{path}: unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
            tensors[name] = arr
    except (struct.error, ValueError) as exc:
        raise ModelError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if pos != len(raw):
        raise ModelError(f"{path}: trailing bytes after tensor table")
    return tensors


def load_checkpoint(path, config: ModelConfig | None = None) -> ModelParams:
    """Load a checkpoint; with ``config`` given, shapes must match it exactly."""
    tensors = read_checkpoint_tensors(path)
    if config is None:
        side = Path(str(path) + ".json")
        try:
            config = ModelConfig(**json.loads(side.read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ModelError(f"cannot read model config {side}: {exc}") from exc
    params = ModelParams(config, tensors)
    params.check_shapes()
    if not params.is_finite():
        raise ModelError(f"{path}: checkpoint holds non-finite values")
    return params
