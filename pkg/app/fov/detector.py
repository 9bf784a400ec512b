"""Field-of-view detection and the crop / pad / rescale front end.

The FoV is found with a circle Hough transform over Sobel edges; the
preprocessed image is the FoV's square crop (zero padded where the circle
leaves the frame) resized to target x target, with everything outside the FoV
forced to 0.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage
from skimage.transform import hough_circle

from app.errors import NoFovFound, WrongChannelCount
from app.raster.image import RasterImage, resize_array, resize_bilinear, to_gray

logger = logging.getLogger(__name__)

EDGE_FRACTION = 0.1
RADIUS_RANGE = (0.30, 0.50)
RADIUS_STEP = 2
MIN_SUPPORT = 0.25
MAX_DETECT_SIDE = 512
REFINE_FRACTION = 0.95
REFINE_WINDOW = 3


@dataclass(frozen=True)
class FovCircle:
    cx: float
    cy: float
    r: float

    def scaled(self, factor: float) -> "FovCircle":
        """Map the circle through a pixel-centre aligned rescale."""
        return FovCircle(
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            self.r * factor,
        )


def circle_mask(circle: FovCircle, width: int, height: int) -> np.ndarray:
    """Boolean mask of the pixels whose centres lie inside the circle."""
    yy, xx = np.mgrid[0:height, 0:width]
    return (xx - circle.cx) ** 2 + (yy - circle.cy) ** 2 <= circle.r ** 2


def edge_map(gray: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude thresholded at a fraction of its maximum."""
    gx = ndimage.sobel(gray, axis=1)
    gy = ndimage.sobel(gray, axis=0)
    magnitude = np.hypot(gx, gy)
    peak = magnitude.max()
    if peak <= 0.0:
        raise NoFovFound("image has no edges")
    return magnitude >= EDGE_FRACTION * peak


def _candidate_radii(min_side: int) -> np.ndarray:
    low = math.ceil(RADIUS_RANGE[0] * min_side)
    high = math.floor(RADIUS_RANGE[1] * min_side)
    return np.arange(low, high + 1, RADIUS_STEP)


def _refine_peak(accumulator: np.ndarray, radii: np.ndarray) -> Tuple[float, float, float, float]:
    peak_index = np.unravel_index(int(np.argmax(accumulator)), accumulator.shape)
    ri, y, x = (int(v) for v in peak_index)
    votes = float(accumulator[ri, y, x])

    r_lo, r_hi = max(ri - 1, 0), min(ri + 2, len(radii))
    y_lo, y_hi = max(y - REFINE_WINDOW, 0), min(y + REFINE_WINDOW + 1, accumulator.shape[1])
    x_lo, x_hi = max(x - REFINE_WINDOW, 0), min(x + REFINE_WINDOW + 1, accumulator.shape[2])
    window = accumulator[r_lo:r_hi, y_lo:y_hi, x_lo:x_hi]

    weights = np.where(window >= REFINE_FRACTION * votes, window, 0.0)
    rr, yy, xx = np.meshgrid(
        radii[r_lo:r_hi].astype(np.float64),
        np.arange(y_lo, y_hi, dtype=np.float64),
        np.arange(x_lo, x_hi, dtype=np.float64),
        indexing="ij",
    )
    total = weights.sum()
    return (
        float((weights * xx).sum() / total),
        float((weights * yy).sum() / total),
        float((weights * rr).sum() / total),
        votes,
    )


def detect_fov(gray: RasterImage) -> FovCircle:
    """Locate the circular field of view of a single-channel fundus image.

    Large frames are searched on a copy whose longer side is at most 512 px;
    the result is mapped back to input coordinates.

    Raises:
        NoFovFound: no edges, image too small, or weak circle support
    """
    if gray.channels != 1:
        raise WrongChannelCount(f"detect_fov needs 1 channel, got {gray.channels}")
    values = gray.plane(0)
    height, width = values.shape
    if min(width, height) < 64:
        raise NoFovFound(f"image {width}x{height} is too small for FoV detection")

    scale = 1.0
    if max(width, height) > MAX_DETECT_SIDE:
        scale = MAX_DETECT_SIDE / max(width, height)
        values = resize_array(values, max(1, round(width * scale)), max(1, round(height * scale)))

    edges = edge_map(values)
    radii = _candidate_radii(min(values.shape))
    accumulator = hough_circle(edges.astype(np.uint8), radii, normalize=False)
    cx, cy, r, votes = _refine_peak(accumulator, radii)

    support = MIN_SUPPORT * 2.0 * math.pi * r
    if votes < support:
        raise NoFovFound(f"peak support {votes:.0f} below {support:.0f} edge pixels")

    circle = FovCircle(cx, cy, r)
    if scale != 1.0:
        circle = circle.scaled(1.0 / scale)
    logger.debug(f"FoV at ({circle.cx:.1f}, {circle.cy:.1f}) r={circle.r:.1f}, {votes:.0f} votes")
    return circle


def _crop_pad(values: np.ndarray, circle: FovCircle) -> np.ndarray:
    half = math.ceil(circle.r)
    side = 2 * half
    x0 = math.floor(circle.cx + 0.5) - half
    y0 = math.floor(circle.cy + 0.5) - half
    height, width = values.shape[:2]

    out = np.zeros((side, side) + values.shape[2:], dtype=values.dtype)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + side, width), min(y0 + side, height)
    if sx0 < sx1 and sy0 < sy1:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = values[sy0:sy1, sx0:sx1]
    return out


def crop_pad_square(img: RasterImage, circle: FovCircle) -> RasterImage:
    """Square of side 2*ceil(r) centred on the circle; outside the frame is 0."""
    return RasterImage(_crop_pad(img.data, circle))


def full_frame_circle(width: int, height: int) -> FovCircle:
    return FovCircle((width - 1) / 2.0, (height - 1) / 2.0, max(width, height) / 2.0)


@dataclass
class PreprocessResult:
    image: RasterImage
    fov: np.ndarray
    circle: FovCircle
    used_fallback: bool


def preprocess_detailed(img: RasterImage, target: int = 224, fallback: str = "error") -> PreprocessResult:
    """detect_fov -> crop_pad_square -> resize, carrying the FoV mask along.

    With fallback="full-frame" a failed detection keeps the whole frame as the
    FoV instead of raising.
    """
    if img.channels != 3:
        raise WrongChannelCount(f"preprocess needs 3 channels, got {img.channels}")
    used_fallback = False
    try:
        circle = detect_fov(to_gray(img))
        frame_mask = circle_mask(circle, img.width, img.height)
    except NoFovFound as e:
        if fallback != "full-frame":
            raise
        logger.warning(f"FoV detection failed ({e}); using the full frame")
        circle = full_frame_circle(img.width, img.height)
        frame_mask = np.ones((img.height, img.width), dtype=bool)
        used_fallback = True

    square = crop_pad_square(img, circle)
    resized = resize_bilinear(square, target, target)
    fov = resize_array(_crop_pad(frame_mask, circle), target, target, order=0)
    data = resized.data * fov[:, :, None]
    return PreprocessResult(RasterImage(data), fov, circle, used_fallback)


def preprocess(img: RasterImage, target: int = 224) -> Tuple[RasterImage, np.ndarray]:
    """Preprocessed target x target image and its FoV mask."""
    result = preprocess_detailed(img, target)
    return result.image, result.fov
