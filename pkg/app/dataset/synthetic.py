"""Synthetic three-grade fundus corpus with known anatomy.

Every image is a circular field of view on black, with an even fundus
background, a bright optic disc and a vessel tree rooted at the disc. The
grade only decides which degradations follow:

  Good    -- none
  Usable  -- washed-out half field, mild illumination gradient
  Reject  -- heavy blur, haze veil, strong illumination gradient, dark
             occluding blob

The washed-out half of a Usable image keeps the local gray level, so the line
detector's global threshold is not shifted by it; vessels there fade below
threshold. The Reject gradient is applied after the veil and survives in the
output as a +/-60% radiance ramp.

Samples drawn with the same seed share anatomy, so grades can be compared pair
by pair.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from app.dataset.manifest import QualityLabel
from app.fov.detector import FovCircle, circle_mask
from app.raster.image import GRAY_COEFFS, RasterImage, linear_to_srgb, srgb_to_linear

logger = logging.getLogger(__name__)

DEFAULT_SIZE = 224

FOV_RADIUS = 0.45
DISC_RADIUS = 0.245
DISC_DISTANCE = (0.45, 0.60)
DISC_COLOUR = np.array([1.0, 0.98, 0.92])
BACKGROUND_COLOUR = np.array([0.78, 0.38, 0.18])
TEXTURE_AMPLITUDE = 0.015

TRUNKS = 4
BRANCHES_PER_TRUNK = 4
TWIGS_PER_BRANCH = 3
TRUNK_LENGTH = 0.9
BRANCH_LENGTH = 0.35
TWIG_LENGTH = 0.2
TRUNK_SHADE = 0.75
THIN_SHADE = 0.6

USABLE_WASHOUT = 0.95
USABLE_WASHOUT_SIGMA = 8.0
USABLE_GRADIENT = 0.2
REJECT_BLUR_SIGMA = 5.0
REJECT_GRADIENT = 0.6
HAZE_BLEND = 0.95
HAZE_COLOUR = np.array([0.55, 0.52, 0.50])
BLOB_RADIUS = 0.18
BLOB_ATTENUATION = 0.95
BLOB_REACH = 0.55


@dataclass
class SyntheticTruth:
    fov: FovCircle
    disc: FovCircle
    vessels: np.ndarray

    def fov_mask(self) -> np.ndarray:
        height, width = self.vessels.shape
        return circle_mask(self.fov, width, height)

    def disc_mask(self, dilation: float = 1.0) -> np.ndarray:
        height, width = self.vessels.shape
        disc = FovCircle(self.disc.cx, self.disc.cy, self.disc.r * dilation)
        return circle_mask(disc, width, height)


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def masked_blur(img: np.ndarray, fov: np.ndarray, sigma: float) -> np.ndarray:
    """Normalized masked Gaussian: blur(img*fov)/blur(fov), zero outside the FoV."""
    weight = fov.astype(np.float64)
    denominator = ndimage.gaussian_filter(weight, sigma, mode="constant")
    out = np.zeros_like(img)
    inside = denominator > 1e-6
    for c in range(img.shape[2]):
        numerator = ndimage.gaussian_filter(img[:, :, c] * weight, sigma, mode="constant")
        out[:, :, c][inside] = numerator[inside] / denominator[inside]
    return out * weight[:, :, None]


def _gradient_field(rng: np.random.Generator, fov: FovCircle, size: int) -> np.ndarray:
    """Linear ramp in [-1, 1] across the FoV along a random direction."""
    direction = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    t = ((xx - fov.cx) * math.cos(direction) + (yy - fov.cy) * math.sin(direction)) / fov.r
    return np.clip(t, -1.0, 1.0)


def apply_illumination(img: np.ndarray, t: np.ndarray, amplitude: float) -> np.ndarray:
    """Scale linear-light radiance by (1 + amplitude * t)."""
    linear = srgb_to_linear(np.clip(img, 0.0, 1.0)) * (1.0 + amplitude * t)[:, :, None]
    return linear_to_srgb(linear)


def _walk(
    rng: np.random.Generator,
    start: Tuple[float, float],
    heading: float,
    length: float,
    fov: FovCircle,
    disc: FovCircle,
) -> List[Tuple[float, float]]:
    """Gently curving path in 1-px steps that stops at the FoV rim."""
    points = [start]
    x, y = start
    for _ in range(int(length)):
        heading += rng.normal(0.0, 0.06)
        x += math.cos(heading)
        y += math.sin(heading)
        if math.hypot(x - fov.cx, y - fov.cy) > fov.r - 3.0:
            break
        if math.hypot(x - disc.cx, y - disc.cy) < disc.r:
            break
        points.append((x, y))
    return points


def _heading_at(path: List[Tuple[float, float]], index: int) -> float:
    a = path[max(index - 2, 0)]
    b = path[min(index + 2, len(path) - 1)]
    return math.atan2(b[1] - a[1], b[0] - a[0])


def _rasterize(path: List[Tuple[float, float]], width: int, canvas: np.ndarray) -> None:
    size = canvas.shape[0]
    for x, y in path:
        if width >= 2:
            # 2x2 footprint around the sample
            x0, y0 = math.floor(x - 0.5), math.floor(y - 0.5)
            cells = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)]
        else:
            cells = [(int(round(x)), int(round(y)))]
        for cx, cy in cells:
            if 0 <= cx < size and 0 <= cy < size:
                canvas[cy, cx] = True


def _densify(path: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
    dense: List[Tuple[float, float]] = []
    for (x0, y0), (x1, y1) in zip(path, path[1:]):
        dense.append((x0, y0))
        dense.append(((x0 + x1) / 2.0, (y0 + y1) / 2.0))
    if path:
        dense.append(path[-1])
    return dense


def _vessel_tree(
    rng: np.random.Generator, fov: FovCircle, disc: FovCircle, size: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Trunk and thin-vessel masks of a tree rooted on the disc rim."""
    trunks = np.zeros((size, size), dtype=bool)
    thin = np.zeros((size, size), dtype=bool)
    base = rng.uniform(0.0, 2.0 * math.pi)
    for k in range(TRUNKS):
        heading = base + k * 2.0 * math.pi / TRUNKS + rng.uniform(-0.3, 0.3)
        start = (disc.cx + (disc.r + 0.5) * math.cos(heading), disc.cy + (disc.r + 0.5) * math.sin(heading))
        trunk = _walk(rng, start, heading, TRUNK_LENGTH * fov.r, fov, disc)
        _rasterize(_densify(trunk), 2, trunks)
        if len(trunk) < 8:
            continue

        for j in range(BRANCHES_PER_TRUNK):
            at = int(len(trunk) * (j + 1) / (BRANCHES_PER_TRUNK + 1))
            side = 1.0 if j % 2 == 0 else -1.0
            branch_heading = _heading_at(trunk, at) + side * rng.uniform(0.4, 0.9)
            branch = _walk(rng, trunk[at], branch_heading, BRANCH_LENGTH * fov.r, fov, disc)
            _rasterize(_densify(branch), 1, thin)
            if len(branch) < 6:
                continue

            for i in range(TWIGS_PER_BRANCH):
                at_twig = int(len(branch) * (i + 1) / (TWIGS_PER_BRANCH + 1))
                twig_side = 1.0 if (i + j) % 2 == 0 else -1.0
                twig_heading = _heading_at(branch, at_twig) + twig_side * rng.uniform(0.5, 1.0)
                twig = _walk(rng, branch[at_twig], twig_heading, TWIG_LENGTH * fov.r, fov, disc)
                _rasterize(_densify(twig), 1, thin)

    fov_mask = circle_mask(FovCircle(fov.cx, fov.cy, fov.r - 2.0), size, size)
    return trunks & fov_mask, thin & ~trunks & fov_mask


def _anatomy(seed: int, size: int) -> Tuple[np.ndarray, SyntheticTruth]:
    rng = np.random.default_rng([seed, 0])
    fov = FovCircle(
        (size - 1) / 2.0 + rng.uniform(-2.0, 2.0),
        (size - 1) / 2.0 + rng.uniform(-2.0, 2.0),
        FOV_RADIUS * size * (1.0 + rng.uniform(-0.02, 0.02)),
    )
    angle = rng.uniform(0.0, 2.0 * math.pi)
    distance = rng.uniform(*DISC_DISTANCE) * fov.r
    disc = FovCircle(
        fov.cx + distance * math.cos(angle),
        fov.cy + distance * math.sin(angle),
        DISC_RADIUS * fov.r,
    )

    colour = np.clip(BACKGROUND_COLOUR + rng.uniform(-0.03, 0.03, 3), 0.0, 1.0)
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 20.0)
    texture /= max(texture.std(), 1e-12)
    img = colour[None, None, :] * (1.0 + TEXTURE_AMPLITUDE * texture)[:, :, None]

    trunks, thin = _vessel_tree(rng, fov, disc, size)
    shade = np.ones((size, size))
    shade[thin] = THIN_SHADE
    shade[trunks] = TRUNK_SHADE
    img = img * shade[:, :, None]

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    disc_alpha = np.clip(disc.r - np.hypot(xx - disc.cx, yy - disc.cy) + 0.5, 0.0, 1.0)
    img = img * (1.0 - disc_alpha[:, :, None]) + DISC_COLOUR * disc_alpha[:, :, None]

    vessels = trunks | thin
    return img, SyntheticTruth(fov, disc, vessels & ~(disc_alpha > 0))


def washout_veil(img: np.ndarray, fov: np.ndarray, sigma: float) -> np.ndarray:
    """Colourless veil carrying the gray level of a heavily blurred copy."""
    gray = masked_blur(img, fov, sigma) @ GRAY_COEFFS
    return np.repeat(gray[:, :, None], 3, axis=2)


def _degrade_usable(rng: np.random.Generator, img: np.ndarray, truth: SyntheticTruth) -> np.ndarray:
    fov = truth.fov_mask()
    size = img.shape[0]
    # washed-out far side of a random chord through the centre
    chord = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = ((xx - truth.fov.cx) * math.cos(chord) + (yy - truth.fov.cy) * math.sin(chord)) / truth.fov.r
    weight = USABLE_WASHOUT * _smoothstep((u + 0.1) / 0.2)[:, :, None]
    img = (1.0 - weight) * img + weight * washout_veil(img, fov, USABLE_WASHOUT_SIGMA)
    return apply_illumination(img, _gradient_field(rng, truth.fov, size), USABLE_GRADIENT)


def _blob_centre(rng: np.random.Generator, truth: SyntheticTruth, radius: float) -> Tuple[float, float]:
    reach = BLOB_REACH * truth.fov.r
    clearance = truth.disc.r + radius + 5.0
    for _ in range(100):
        angle = rng.uniform(0.0, 2.0 * math.pi)
        distance = reach * math.sqrt(rng.uniform(0.0, 1.0))
        x = truth.fov.cx + distance * math.cos(angle)
        y = truth.fov.cy + distance * math.sin(angle)
        if math.hypot(x - truth.disc.cx, y - truth.disc.cy) >= clearance:
            return x, y
    # opposite the disc
    dx, dy = truth.fov.cx - truth.disc.cx, truth.fov.cy - truth.disc.cy
    norm = max(math.hypot(dx, dy), 1e-9)
    return truth.fov.cx + reach * dx / norm, truth.fov.cy + reach * dy / norm


def _degrade_reject(rng: np.random.Generator, img: np.ndarray, truth: SyntheticTruth) -> np.ndarray:
    fov = truth.fov_mask()
    size = img.shape[0]
    img = masked_blur(img, fov, REJECT_BLUR_SIGMA)
    img = (1.0 - HAZE_BLEND) * img + HAZE_BLEND * HAZE_COLOUR
    img = apply_illumination(img, _gradient_field(rng, truth.fov, size), REJECT_GRADIENT)

    radius = BLOB_RADIUS * truth.fov.r
    bx, by = _blob_centre(rng, truth, radius)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    alpha = _smoothstep((radius - np.hypot(xx - bx, yy - by)) / 2.0 + 0.5)
    return img * (1.0 - BLOB_ATTENUATION * alpha)[:, :, None]


def generate_synthetic(
    label: QualityLabel, rng_seed: int, size: int = DEFAULT_SIZE
) -> Tuple[RasterImage, SyntheticTruth]:
    """Render one synthetic fundus photograph of the given grade.

    Returns the image and its ground truth (FoV circle, disc circle, vessel
    pixels). Identical (label, seed) pairs give identical images.
    """
    label = QualityLabel(label)
    img, truth = _anatomy(rng_seed, size)
    rng = np.random.default_rng([rng_seed, 1, int(label)])
    if label is QualityLabel.USABLE:
        img = _degrade_usable(rng, img, truth)
    elif label is QualityLabel.REJECT:
        img = _degrade_reject(rng, img, truth)

    img = np.clip(img, 0.0, 1.0) * truth.fov_mask()[:, :, None]
    return RasterImage(img), truth
