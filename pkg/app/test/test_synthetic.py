"""
Tests for the synthetic three-grade fundus generator.
"""

import math

import numpy as np
import pytest

from app.dataset.manifest import QualityLabel
from app.dataset.synthetic import (
    DEFAULT_SIZE,
    apply_illumination,
    generate_synthetic,
    masked_blur,
    washout_veil,
)
from app.fov.detector import detect_fov
from app.raster.image import to_gray


@pytest.mark.parametrize("label", list(QualityLabel))
def test_same_seed_same_image(label):
    a, _ = generate_synthetic(label, 11, 96)
    b, _ = generate_synthetic(label, 11, 96)
    assert np.array_equal(a.data, b.data)


def test_different_seeds_differ():
    a, _ = generate_synthetic(QualityLabel.GOOD, 1, 96)
    b, _ = generate_synthetic(QualityLabel.GOOD, 2, 96)
    assert not np.array_equal(a.data, b.data)


def test_grades_share_anatomy():
    _, good = generate_synthetic(QualityLabel.GOOD, 5, 96)
    _, reject = generate_synthetic(QualityLabel.REJECT, 5, 96)
    assert good.fov == reject.fov
    assert good.disc == reject.disc
    assert np.array_equal(good.vessels, reject.vessels)


@pytest.mark.parametrize("label", list(QualityLabel))
def test_image_is_black_outside_fov(label):
    img, truth = generate_synthetic(label, 3)
    assert img.data.shape == (DEFAULT_SIZE, DEFAULT_SIZE, 3)
    assert not img.data[~truth.fov_mask()].any()
    assert img.data.min() >= 0.0 and img.data.max() <= 1.0


def test_truth_geometry():
    _, truth = generate_synthetic(QualityLabel.GOOD, 4)
    assert truth.disc_mask().sum() < truth.disc_mask(1.2).sum()
    assert not (truth.vessels & truth.disc_mask()).any()
    assert not truth.vessels[~truth.fov_mask()].any()
    assert truth.vessels.sum() > 200
    assert math.hypot(truth.disc.cx - truth.fov.cx, truth.disc.cy - truth.fov.cy) + truth.disc.r < truth.fov.r


def test_disc_is_brightest_region_of_good_image():
    img, truth = generate_synthetic(QualityLabel.GOOD, 6)
    gray = img.data.mean(axis=2)
    assert gray[truth.disc_mask(0.8)].mean() > gray[truth.fov_mask() & ~truth.disc_mask(1.2)].mean() + 0.2


def test_reject_is_blurred():
    good, truth = generate_synthetic(QualityLabel.GOOD, 8)
    reject, _ = generate_synthetic(QualityLabel.REJECT, 8)
    inner = truth.fov_mask() & ~truth.disc_mask(1.5)

    def roughness(data):
        gray = data.mean(axis=2)
        return np.abs(np.diff(gray, axis=1))[inner[:, 1:] & inner[:, :-1]].mean()

    assert roughness(reject.data) < 0.5 * roughness(good.data)


@pytest.mark.parametrize("label", list(QualityLabel))
def test_fov_is_detectable(label):
    img, truth = generate_synthetic(label, 9)
    circle = detect_fov(to_gray(img))
    assert math.hypot(circle.cx - truth.fov.cx, circle.cy - truth.fov.cy) <= 4
    assert abs(circle.r - truth.fov.r) <= 4


def test_masked_blur_keeps_constant_inside_fov():
    fov = np.zeros((20, 20), bool)
    fov[4:16, 4:16] = True
    img = np.full((20, 20, 3), 0.5)
    out = masked_blur(img, fov, 2.0)
    np.testing.assert_allclose(out[fov], 0.5, atol=1e-12)
    assert not out[~fov].any()


def test_illumination_with_zero_ramp_is_identity():
    rng = np.random.default_rng(0)
    img = rng.random((6, 6, 3))
    out = apply_illumination(img, np.zeros((6, 6)), 0.6)
    np.testing.assert_allclose(out, img, atol=1e-9)


def _fov_luma(img, truth):
    return to_gray(img).data[:, :, 0][truth.fov_mask() & ~truth.disc_mask(1.5)]


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_reject_keeps_strong_illumination_ramp(seed):
    reject, truth = generate_synthetic(QualityLabel.REJECT, seed)
    p10, p90 = np.percentile(_fov_luma(reject, truth), [10, 90])
    assert p90 - p10 >= 0.15


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_usable_washout_keeps_gray_level_but_drains_colour(seed):
    good, truth = generate_synthetic(QualityLabel.GOOD, seed)
    usable, _ = generate_synthetic(QualityLabel.USABLE, seed)
    assert abs(_fov_luma(usable, truth).mean() - _fov_luma(good, truth).mean()) < 0.03

    inside = truth.fov_mask()

    def chroma(img):
        return np.abs(img.data[:, :, 0] - img.data[:, :, 2])[inside].mean()

    assert chroma(usable) < 0.8 * chroma(good)


def test_washout_veil_is_gray_with_blurred_luma():
    rng = np.random.default_rng(3)
    fov = np.zeros((24, 24), bool)
    fov[2:22, 3:21] = True
    img = rng.random((24, 24, 3)) * fov[:, :, None]
    veil = washout_veil(img, fov, 4.0)
    assert np.array_equal(veil[:, :, 0], veil[:, :, 2])
    blurred = masked_blur(img, fov, 4.0)
    np.testing.assert_allclose(veil[:, :, 1], blurred @ np.array([0.299, 0.587, 0.114]), atol=1e-12)
