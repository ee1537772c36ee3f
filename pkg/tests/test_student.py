import numpy as np
import pytest

from milboundary import net, student
from milboundary.imaging import InvalidInput
from milboundary.net import NetConfig
from milboundary.student import PixelLossConfig
from milboundary.training import TrainConfig

from helpers import central_difference, relative_error

SMALL = NetConfig(num_classes=2, in_size=16, channels=(4, 6, 8, 8), proj_width=3, ag_hidden=5)


def test_class_weights():
    t = np.zeros((2, 2, 2), bool)
    t[0, 0, 0] = True
    assert np.allclose(student.class_weights(t), [0.75, 1.0])


def test_bce_hand_value():
    pred = np.array([[[0.8, 0.4]]])
    t = np.array([[[True, False]]])
    # beta = 0.5: each pixel gets weight one half
    want = -(0.5 * np.log(0.8) + 0.5 * np.log(0.6)) / 2
    value, _ = student.balanced_bce(pred, t)
    assert value == pytest.approx(want, rel=1e-12)


def test_bce_perfect_prediction_near_zero():
    t = np.zeros((1, 4, 4), bool)
    t[0, 1] = True
    value, _ = student.balanced_bce(t.astype(float), t)
    assert 0 <= value < 1e-6


def test_bce_all_negative_target_has_no_positive_weight(rng):
    t = np.zeros((1, 5, 5), bool)
    pred = rng.uniform(0.1, 0.9, t.shape)
    value, grad = student.balanced_bce(pred, t)
    # beta = 1, so negatives carry weight zero and the loss vanishes
    assert value == 0.0 and not grad.any()


def test_bce_gradient_matches_finite_differences(rng):
    pred = rng.uniform(0.05, 0.95, (2, 4, 5))
    t = rng.random((2, 4, 5)) > 0.6
    _, grad = student.balanced_bce(pred, t)
    for idx in [(0, 0, 0), (1, 2, 3), (0, 3, 4), (1, 1, 1)]:
        fd = central_difference(lambda: student.balanced_bce(pred, t)[0], pred, idx)
        assert relative_error(grad[idx], fd) < 1e-6


def test_bce_clamp_has_zero_gradient():
    pred = np.array([[[0.0, 1.0]]])
    t = np.array([[[True, False]]])
    value, grad = student.balanced_bce(pred, t, PixelLossConfig(eps=1e-7))
    assert np.isfinite(value) and not grad.any()


def test_bce_shape_mismatch():
    with pytest.raises(InvalidInput):
        student.balanced_bce(np.zeros((2, 3, 3)), np.zeros((1, 3, 3), bool))


def _data(rng, n=3):
    images = [rng.integers(0, 256, (16, 16, 3), dtype=np.uint8) for _ in range(n)]
    targets = []
    for _ in range(n):
        t = np.zeros((2, 16, 16), bool)
        t[0, rng.integers(0, 16), :] = True
        t[1, :, rng.integers(0, 16)] = True
        targets.append(t)
    return images, targets


def test_zero_steps_returns_initialisation(rng):
    images, targets = _data(rng)
    params = student.train_student(images, targets, SMALL, TrainConfig(steps=0, seed=4))
    init = net.init_params(SMALL, seed=4)
    assert all(np.array_equal(params[k], init[k]) for k in init)


def test_training_is_deterministic_and_leaves_ag_head(rng):
    images, targets = _data(rng)
    cfg = TrainConfig(steps=6, seed=2)
    h1, h2 = [], []
    a = student.train_student(images, targets, SMALL, cfg, history=h1)
    b = student.train_student(images, targets, SMALL, cfg, history=h2)
    assert h1 == h2 and all(np.array_equal(a[k], b[k]) for k in a)
    init = net.init_params(SMALL, seed=2)
    for k in a:
        if k.startswith("ag."):
            assert np.array_equal(a[k], init[k])


def test_student_loss_decreases(rng):
    images, targets = _data(rng, 1)
    hist = []
    student.train_student(images, targets, SMALL, TrainConfig(steps=40, seed=0, flip=False,
                                                              base_lr=0.05), history=hist)
    assert np.mean(hist[-5:]) < np.mean(hist[:5])


def test_predict_shape(rng):
    images, _ = _data(rng, 1)
    out = student.predict(net.init_params(SMALL), images[0], SMALL)
    assert out.shape == (2, 16, 16) and out.dtype == np.float64
