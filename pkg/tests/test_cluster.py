from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affkp import kernels
from affkp import labels as L
from affkp.cluster import ClusterConfig, extract_quadruplets, mean_shift, separate_instances, vote
from affkp.errors import ConfigError, DataError
from affkp.synth import SynthConfig, gt_offsets, look_at, scene_from_objects

from oracles import kde_grid_mode
from test_synth import _place


def test_one_contiguous_region_one_instance():
    xyz = np.column_stack([np.linspace(0, 0.2, 50), np.zeros(50), np.ones(50)])
    out = separate_instances(xyz, np.full(50, L.GRASP), ClusterConfig())
    assert len(out) == 1 and out[0][0] == L.GRASP and out[0][1].size == 50


def test_two_knives_far_apart():
    cam = look_at([0.0, -0.35, 0.9], [0.0, 0.0, 0.0])
    scene = scene_from_objects(SynthConfig(), [_place("knife", (-0.25, -0.05), np.pi / 2),
                                               _place("knife", (0.25, -0.05), np.pi / 2, seed=1)], camera=cam)
    out = separate_instances(scene.cloud, scene.labels, ClusterConfig(separation_distance=0.05))
    assert sorted(lab for lab, _ in out) == [L.GRASP, L.GRASP, L.CUT, L.CUT]


def test_isolated_points_are_noise():
    xyz = np.arange(15, dtype=float).reshape(5, 3)
    assert separate_instances(xyz, np.full(5, L.CUT), ClusterConfig()) == []


def test_vote_identities(scene0):
    off, _ = gt_offsets(scene0, scene0.instances)
    inst = scene0.instances[0]
    v = vote(scene0.cloud, inst.point_indices, off)
    assert v.shape == (4, inst.point_indices.size, 3)
    np.testing.assert_allclose(v, np.broadcast_to(inst.keypoints[:, None, :], v.shape), atol=1e-12)
    z = vote(scene0.cloud, inst.point_indices, np.zeros_like(off))
    np.testing.assert_array_equal(z[2], scene0.cloud.xyz[inst.point_indices])
    with pytest.raises(DataError):
        vote(scene0.cloud, [], off)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.001, 0.02))
def test_noisy_votes_within_radius(seed, r):
    rng = np.random.default_rng(seed)
    xyz = rng.normal(size=(30, 3))
    kp = rng.normal(size=(4, 3))
    d = rng.normal(size=(30, 4, 3))
    d *= (r * rng.uniform(size=(30, 4, 1)) ** (1 / 3)) / np.linalg.norm(d, axis=2, keepdims=True)
    off = kp[None] - xyz[:, None] + d
    v = vote(xyz, np.arange(30), off)
    assert np.all(np.linalg.norm(v - kp[:, None], axis=2) <= r * (1 + 1e-9))


def test_mean_shift_identical_votes():
    q = np.array([0.1, -0.2, 0.7])
    res = mean_shift(np.tile(q, (10, 1)), ClusterConfig())
    np.testing.assert_allclose(res.mode, q, rtol=0, atol=1e-15)  # weighted mean rounds by at most an ulp
    assert res.iterations == 1 and res.converged


def test_mean_shift_single_vote_verbatim():
    q = np.array([[0.123456789, 1.5, -3.25]])
    res = mean_shift(q, ClusterConfig())
    assert res.mode.tolist() == q[0].tolist()


def test_mean_shift_majority_blob():
    rng = np.random.default_rng(3)
    cfg = ClusterConfig()
    bw = cfg.bandwidth
    a = rng.normal(0, 0.05 * bw, (70, 3))
    b = rng.normal(0, 0.05 * bw, (30, 3)) + [10 * bw, 0, 0]
    votes = np.vstack([a, b])
    res = mean_shift(votes, cfg)
    assert np.linalg.norm(res.mode - kde_grid_mode(votes, bw)) < 0.1 * bw
    assert np.linalg.norm(res.mode - a.mean(axis=0)) < 1e-3 * bw


def test_mean_shift_rejects_empty():
    with pytest.raises(DataError):
        mean_shift(np.zeros((0, 3)), ClusterConfig())


def test_non_convergence_flags_warning():
    rng = np.random.default_rng(4)
    votes = rng.normal(0, 0.02, (40, 3))
    res = mean_shift(votes, ClusterConfig(max_iterations=1, tolerance=1e-12))
    assert not res.converged
    labels = np.full(40, L.POUND)
    out = extract_quadruplets(votes, labels, np.zeros((40, 4, 3)), ClusterConfig(max_iterations=1,
                                                                                   tolerance=1e-12))
    assert out and any("iterations" in w for w in out[0].warnings)


def test_flat_kernel_density_ascent():
    """Flat-kernel steps are reported; the guaranteed property is ascent of the shadow density."""
    rng = np.random.default_rng(0)
    bw, violations, steps_seen = 0.02, 0, 0
    for _ in range(100):
        v = np.concatenate([rng.normal(0, 0.01, (rng.integers(5, 60), 3)),
                            rng.normal(0.03, 0.01, (rng.integers(5, 60), 3))])
        seeds = v[:5]
        traj = [seeds] + [kernels.mean_shift_seeds(v, seeds, bw, kernels.FLAT, 0.0, k)[0] for k in range(1, 60)]
        traj = np.array(traj)
        step = np.linalg.norm(np.diff(traj, axis=0), axis=2)
        grow = np.diff(step[2:], axis=0)
        violations += int((grow > 1e-12).sum())
        steps_seen += grow.size
        d2 = ((traj[:, :, None, :] - v[None, None]) ** 2).sum(-1) / bw**2
        shadow = np.clip(1 - d2, 0, None).sum(-1)
        assert np.all(np.diff(shadow, axis=0) >= -1e-9)
        assert np.all(step[-1] == 0)  # the flat kernel converges in finitely many steps
    if violations:
        warnings.warn(f"flat-kernel step size grew after burn-in in {violations} of {steps_seen} steps")


def test_extract_ground_truth_identity(scenes):
    cfg = ClusterConfig()
    for scene in scenes:
        off, _ = gt_offsets(scene, scene.instances)
        found = extract_quadruplets(scene.cloud, scene.labels, off, cfg)
        assert len(found) == len(scene.instances)
        for f in found:
            match = [g for g in scene.instances if g.affordance == f.affordance
                     and np.array_equal(np.sort(g.point_indices), f.point_indices)]
            assert len(match) == 1
            np.testing.assert_allclose(f.keypoints, match[0].keypoints, atol=1e-6)


def test_extract_background_only(scene0):
    off = np.zeros((len(scene0.cloud), 4, 3))
    assert extract_quadruplets(scene0.cloud, np.zeros(len(scene0.cloud), int), off, ClusterConfig()) == []


def test_extract_noise_bound(scenes):
    rng = np.random.default_rng(5)
    for scene in scenes[:3]:
        off, _ = gt_offsets(scene, scene.instances)
        d = rng.normal(size=off.shape)
        d *= 0.005 * rng.uniform(size=off.shape[:2] + (1,)) ** (1 / 3) / np.linalg.norm(d, axis=2, keepdims=True)
        found = extract_quadruplets(scene.cloud, scene.labels, off + d, ClusterConfig())
        for f in found:
            g = next(g for g in scene.instances if g.affordance == f.affordance
                     and np.array_equal(np.sort(g.point_indices), f.point_indices))
            assert np.all(np.linalg.norm(f.keypoints - g.keypoints, axis=1) <= 0.005)


def test_extract_permutation_invariant(scene0):
    off, _ = gt_offsets(scene0, scene0.instances)
    rng = np.random.default_rng(6)
    off = off + rng.normal(0, 0.002, off.shape)
    perm = rng.permutation(len(scene0.cloud))
    a = extract_quadruplets(scene0.cloud, scene0.labels, off, ClusterConfig())
    b = extract_quadruplets(scene0.cloud.xyz[perm], scene0.labels[perm], off[perm], ClusterConfig())
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.affordance == y.affordance
        assert set(x.point_indices.tolist()) == set(perm[y.point_indices].tolist())
        np.testing.assert_allclose(x.keypoints, y.keypoints, atol=1e-9)


@pytest.mark.parametrize("kwargs", [dict(kernel="epanechnikov"), dict(bandwidth=0.0),
                                    dict(separation_distance=-1.0), dict(min_points=0), dict(merge_radius=0.0)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ClusterConfig(**kwargs)


def test_merge_radius_default():
    assert ClusterConfig(bandwidth=0.04).merge_radius == 0.02
