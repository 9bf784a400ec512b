"""
Tests for gradient-weighted class activation maps.
"""

import numpy as np
import pytest

from app.errors import ShapeMismatch
from app.nn import layers
from app.nn.gradcam import grad_cam
from app.nn.model import forward, init_params


def _positive_rgb_model():
    params = init_params("rgb", (1,), 4).astype(np.float64)
    kernels = params.backbones[0].kernels[0]
    kernels[...] = np.abs(kernels) + 0.01
    params.head.w[...] = np.array([[0.5], [1.0], [2.0]])
    return params


def test_single_channel_map_is_the_activation():
    rng = np.random.default_rng(0)
    params = _positive_rgb_model()
    x = rng.random((3, 8, 8)) + 0.1
    maps, target = grad_cam(params, (x,), target_class=1)
    assert target == 1
    act = layers.conv3x3_forward(x[None], params.backbones[0].kernels[0], params.backbones[0].biases[0])[0, 0]
    np.testing.assert_allclose(maps[0], act / act.max(), atol=1e-12)


def test_negative_weight_gives_zero_map():
    rng = np.random.default_rng(1)
    params = _positive_rgb_model()
    params.head.w[0, 0] = -1.0
    maps, _ = grad_cam(params, (rng.random((3, 8, 8)) + 0.1,), target_class=0)
    assert not maps[0].any()


def test_default_target_is_prediction():
    rng = np.random.default_rng(2)
    params = _positive_rgb_model()
    x = rng.random((3, 8, 8)) + 0.1
    _, target = grad_cam(params, (x,))
    assert target == int(np.argmax(forward(params, (x,)).probs[0]))
    # largest positive head weight wins on positive features
    assert target == 2


def test_dual_maps_are_input_sized_and_normalized():
    rng = np.random.default_rng(3)
    params = init_params("dual", (4, 8), 6).astype(np.float64)
    params.head.w[...] = rng.normal(0.0, 1.0, params.head.w.shape)
    inputs = (rng.random((4, 16, 16)), rng.random((4, 16, 16)))
    for target in range(3):
        maps, _ = grad_cam(params, inputs, target)
        assert len(maps) == 2
        for cam in maps:
            assert cam.shape == (16, 16)
            assert cam.min() >= 0.0 and cam.max() <= 1.0
            assert cam.max() in (0.0, 1.0)


def test_is_deterministic():
    rng = np.random.default_rng(4)
    params = init_params("single", (4, 8), 2)
    x = rng.random((5, 16, 16))
    a, _ = grad_cam(params, (x,), 0)
    b, _ = grad_cam(params, (x,), 0)
    assert np.array_equal(a[0], b[0])


def test_rejects_batches_and_bad_classes():
    params = init_params("rgb", (4,), 0)
    with pytest.raises(ShapeMismatch):
        grad_cam(params, (np.zeros((1, 3, 8, 8)),))
    with pytest.raises(ValueError):
        grad_cam(params, (np.zeros((3, 8, 8)),), target_class=3)
