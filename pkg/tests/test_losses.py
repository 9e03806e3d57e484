from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affkp import labels as L
from affkp.errors import ConfigError, DataError
from affkp.losses import LossConfig, focal_loss, keypoint_offset_loss, multitask_loss


def _scores(rng, n):
    z = rng.normal(size=(n, 7))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    # mixing with the uniform row keeps every p >= 0.05, far from the 1e-4 finite-difference step
    return 0.65 * e / e.sum(axis=1, keepdims=True) + 0.05


def test_perfect_confidence_zero_loss():
    scores = np.eye(7)[[0, 3, 6]]
    value, _ = focal_loss(scores, [0, 3, 6], LossConfig())
    assert value == 0.0


def test_single_point_scalar():
    scores = np.full((1, 7), 0.5 / 6)
    scores[0, 0] = 0.5
    value, _ = focal_loss(scores, [0], LossConfig())
    assert value == pytest.approx(0.03 * 0.25 * math.log(2), rel=1e-12)
    assert value == pytest.approx(0.0051986, abs=5e-8)


def test_gamma_zero_is_cross_entropy():
    rng = np.random.default_rng(0)
    scores = _scores(rng, 30)
    labels = rng.integers(0, 7, 30)
    value, _ = focal_loss(scores, labels, LossConfig(gamma=0.0, alpha_vec=(1.0,) * 7))
    ce = -np.mean([math.log(scores[i, labels[i]]) for i in range(30)])
    assert value == pytest.approx(ce, rel=1e-12)


def test_probability_clamp():
    scores = np.zeros((1, 7))
    scores[0, 1] = 1.0
    value, grad = focal_loss(scores, [0], LossConfig(gamma=0.0, alpha_vec=(1.0,) * 7))
    assert value == pytest.approx(-math.log(1e-7))
    assert grad[0, 0] == 0.0


def test_label_out_of_range():
    with pytest.raises(DataError):
        focal_loss(np.full((2, 7), 1 / 7), [0, 7], LossConfig())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 0.5, 2.0]))
def test_focal_gradient_finite_differences(seed, gamma):
    rng = np.random.default_rng(seed)
    scores = _scores(rng, 8)
    labels = rng.integers(0, 7, 8)
    cfg = LossConfig(gamma=gamma)
    _, grad = focal_loss(scores, labels, cfg)
    h = 1e-4
    for i in range(8):
        j = labels[i]
        up, down = scores.copy(), scores.copy()
        up[i, j] += h
        down[i, j] -= h
        fd = (focal_loss(up, labels, cfg)[0] - focal_loss(down, labels, cfg)[0]) / (2 * h)
        assert abs(fd - grad[i, j]) <= 1e-4 * max(abs(fd), 1e-8) + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_focal_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    scores = _scores(rng, 12)
    labels = rng.integers(0, 7, 12)
    perm = rng.permutation(12)
    a, _ = focal_loss(scores, labels, LossConfig())
    b, _ = focal_loss(scores[perm], labels[perm], LossConfig())
    assert a == pytest.approx(b, rel=1e-12)


def test_offset_identity_zero():
    rng = np.random.default_rng(1)
    gt = rng.normal(size=(5, 4, 3))
    assert keypoint_offset_loss(gt, gt, np.ones(5))[0] == 0.0


def test_offset_single_point_l1():
    gt = np.zeros((1, 4, 3))
    pred = gt.copy()
    pred[0, 0] = [0.3, 0.0, 0.4]
    value, grad = keypoint_offset_loss(pred, gt, [True])
    assert value == pytest.approx(0.7, abs=1e-15)
    np.testing.assert_array_equal(grad[0, 0], [1.0, 0.0, 1.0])  # subgradient 0 at the exact zero
    assert not grad[0, 1:].any()


def test_offset_background_mask_annihilates():
    rng = np.random.default_rng(2)
    value, grad = keypoint_offset_loss(rng.normal(size=(6, 4, 3)), np.zeros((6, 4, 3)), np.zeros(6))
    assert value == 0.0 and not grad.any()


def test_offset_normalisations():
    pred = np.ones((4, 4, 3))
    gt = np.zeros((4, 4, 3))
    mask = np.array([1, 0, 0, 0])
    assert keypoint_offset_loss(pred, gt, mask, "points")[0] == pytest.approx(12 / 4)
    assert keypoint_offset_loss(pred, gt, mask, "region")[0] == pytest.approx(12.0)
    with pytest.raises(ConfigError):
        keypoint_offset_loss(pred, gt, mask, "median")
    with pytest.raises(DataError):
        keypoint_offset_loss(pred, gt[:3], mask)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_offset_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(6, 4, 3))
    pred = gt + rng.choice([-1, 1], size=gt.shape) * rng.uniform(0.01, 0.5, size=gt.shape)
    mask = rng.integers(0, 2, 6)
    _, grad = keypoint_offset_loss(pred, gt, mask)
    h = 1e-4
    for idx in np.ndindex(pred.shape):
        up, down = pred.copy(), pred.copy()
        up[idx] += h
        down[idx] -= h
        fd = (keypoint_offset_loss(up, gt, mask)[0] - keypoint_offset_loss(down, gt, mask)[0]) / (2 * h)
        assert abs(fd - grad[idx]) <= 1e-4 * max(abs(fd), 1e-8) + 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_offset_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pred, gt, mask = rng.normal(size=(9, 4, 3)), rng.normal(size=(9, 4, 3)), rng.integers(0, 2, 9)
    perm = rng.permutation(9)
    a = keypoint_offset_loss(pred, gt, mask)[0]
    b = keypoint_offset_loss(pred[perm], gt[perm], mask[perm])[0]
    assert a == pytest.approx(b, rel=1e-12)


def test_multitask_examples():
    cfg = LossConfig()
    assert multitask_loss(0.0, 0.0, cfg) == 0.0
    assert multitask_loss(0.01, 0.5, cfg) == pytest.approx(1.5, rel=1e-12)
    assert multitask_loss(0.3, 0.25, LossConfig(lambda_weight=0.0)) == 0.25


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 5))
def test_multitask_linear_in_sem(sem, kp, t):
    cfg = LossConfig()
    contrib = multitask_loss(sem, 0.0, cfg)
    assert multitask_loss(t * sem, 0.0, cfg) == pytest.approx(t * contrib, rel=1e-12, abs=1e-300)
    assert multitask_loss(sem, kp, cfg) == pytest.approx(kp + cfg.lambda_weight * sem, rel=1e-9)


def test_multitask_rejects_negative():
    with pytest.raises(DataError):
        multitask_loss(-1.0, 0.0, LossConfig())


@pytest.mark.parametrize("kwargs", [dict(gamma=-1.0), dict(alpha_vec=(1.0,) * 6), dict(alpha_vec=(0.0,) * 7),
                                    dict(lambda_weight=-1.0), dict(momentum=1.0), dict(optimizer="sgd"),
                                    dict(offset_normalization="mean"), dict(batch_size=0)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        LossConfig(**kwargs)


def test_default_weights():
    cfg = LossConfig()
    assert cfg.gamma == 2.0 and cfg.lambda_weight == 100.0
    assert cfg.alpha_vec == (0.03, 0.12, 0.17, 0.21, 0.17, 0.2, 0.1)
    assert len(L.DEFAULT_ALPHA) == L.NUM_CLASSES
