"""Tiny-size salient structures (vessels) via a multi-scale line detector.

At every scale s the response is the best line contrast over 12 orientations:
the mean along an s-pixel line through the pixel minus the mean of the s x s
window around it. Both means only count pixels inside the frame.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from app.errors import DimensionMismatch, EmptyFov, StageMismatch, WrongChannelCount
from app.raster.image import RasterImage, encode_pgm, to_gray

logger = logging.getLogger(__name__)

SCALES = (1, 3, 5, 7)
ANGLES = tuple(range(0, 180, 15))
TS_THRESHOLD = 0.56
MIN_STD = 1e-12


class LineStage(Enum):
    RAW = "raw"
    ENHANCED = "enhanced"
    STANDARDIZED = "standardized"


@dataclass
class LineResponseMap:
    data: np.ndarray
    stage: LineStage


def line_offsets(s: int, angle: float) -> List[Tuple[int, int]]:
    """(dx, dy) pixel offsets of an s-pixel line at `angle` degrees, y down."""
    half = (s - 1) // 2
    cos_a = math.cos(math.radians(angle))
    sin_a = math.sin(math.radians(angle))
    offsets: List[Tuple[int, int]] = []
    for t in range(-half, half + 1):
        offset = (round(t * cos_a), round(t * sin_a))
        if offset not in offsets:
            offsets.append(offset)
    return offsets


def _clipped_mean(values: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Mean of the kernel's footprint counting only pixels inside the frame."""
    total = ndimage.correlate(values, kernel, mode="constant", cval=0.0)
    count = ndimage.correlate(np.ones_like(values), kernel, mode="constant", cval=0.0)
    return total / count


def scale_response(inv_gray: np.ndarray, s: int) -> Tuple[np.ndarray, np.ndarray]:
    """Best line contrast at scale s and the index into ANGLES that gave it.

    Ties go to the first angle.
    """
    values = np.asarray(inv_gray, dtype=np.float64)
    if s == 1:
        return np.zeros_like(values), np.zeros(values.shape, dtype=int)

    window = _clipped_mean(values, np.ones((s, s)))
    half = (s - 1) // 2
    contrasts = []
    for angle in ANGLES:
        kernel = np.zeros((s, s))
        for dx, dy in line_offsets(s, angle):
            kernel[half + dy, half + dx] = 1.0
        contrasts.append(_clipped_mean(values, kernel) - window)
    stacked = np.stack(contrasts)
    best = np.argmax(stacked, axis=0)
    return np.take_along_axis(stacked, best[None], axis=0)[0], best


def _single_plane(img: RasterImage) -> np.ndarray:
    if img.channels != 1:
        raise WrongChannelCount(f"expected a single-channel image, got {img.channels}")
    return img.plane(0)


def _check_fov(fov: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    fov = np.asarray(fov, dtype=bool)
    if fov.shape != shape:
        raise DimensionMismatch(f"FoV mask {fov.shape} does not match map {shape}")
    return fov


def line_response(inv_gray: RasterImage, fov: np.ndarray) -> LineResponseMap:
    values = _single_plane(inv_gray)
    fov = _check_fov(fov, values.shape)
    total = np.zeros_like(values)
    for s in SCALES:
        best, _ = scale_response(values, s)
        total += best
    raw = total / len(SCALES)
    raw[~fov] = 0.0
    return LineResponseMap(raw, LineStage.RAW)


def enhance(raw: LineResponseMap, inv_gray: RasterImage) -> LineResponseMap:
    """Fold the inverted intensity back in as one more 'scale'."""
    if raw.stage is not LineStage.RAW:
        raise StageMismatch(f"enhance expects a raw response, got {raw.stage.value}")
    values = _single_plane(inv_gray)
    if values.shape != raw.data.shape:
        raise DimensionMismatch(f"response {raw.data.shape} vs image {values.shape}")
    n = len(SCALES)
    return LineResponseMap((n * raw.data + values) / (n + 1), LineStage.ENHANCED)


def zscore(enhanced: LineResponseMap, fov: np.ndarray) -> LineResponseMap:
    """Standardize over FoV pixels (population statistics)."""
    if enhanced.stage is not LineStage.ENHANCED:
        raise StageMismatch(f"zscore expects an enhanced response, got {enhanced.stage.value}")
    fov = _check_fov(fov, enhanced.data.shape)
    if not fov.any():
        raise EmptyFov("FoV mask has no pixels")

    inside = enhanced.data[fov]
    mu = inside.mean()
    sigma = inside.std()
    if sigma < MIN_STD:
        return LineResponseMap(np.zeros_like(enhanced.data), LineStage.STANDARDIZED)

    standardized = (enhanced.data - mu) / sigma
    standardized[~fov] = standardized[fov].min()
    return LineResponseMap(standardized, LineStage.STANDARDIZED)


def threshold_ts(standardized: LineResponseMap, fov: np.ndarray) -> np.ndarray:
    if standardized.stage is not LineStage.STANDARDIZED:
        raise StageMismatch(f"threshold_ts expects a standardized response, got {standardized.stage.value}")
    fov = _check_fov(fov, standardized.data.shape)
    return (standardized.data >= TS_THRESHOLD) & fov


def detect_tiny(rgb: RasterImage, fov: np.ndarray) -> Tuple[LineResponseMap, np.ndarray]:
    """Return (R''_line, M_TS) for a preprocessed colour image."""
    inv_gray = RasterImage(1.0 - to_gray(rgb).data)
    raw = line_response(inv_gray, fov)
    standardized = zscore(enhance(raw, inv_gray), fov)
    mask = threshold_ts(standardized, fov)
    logger.debug(f"tiny structures: {int(mask.sum())} pixels")
    return standardized, mask


def export_line_response_pgm(response: LineResponseMap) -> bytes:
    """Affine remap [min, max] -> [0, 255]; a flat map exports as black."""
    values = response.data
    low, high = float(values.min()), float(values.max())
    if high - low <= 0.0:
        return encode_pgm(np.zeros_like(values))
    return encode_pgm((values - low) / (high - low))
