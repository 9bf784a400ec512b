"""Large-size salient structures (optic disc, exudates).

Frequency-tuned contrast: the distance in Lab between the FoV mean colour and
a 5x5 low-passed copy of the image. This is the limit of a bank of
difference-of-Gaussian band-passes whose widest Gaussian tends to the global
mean, so no explicit filter bank is built.
"""

import logging
from typing import Tuple

import numpy as np

from app.errors import DimensionMismatch, EmptyFov, NegativeInput
from app.raster.image import LabImage, RasterImage, encode_pgm, gaussian5, rgb_to_lab

logger = logging.getLogger(__name__)

THRESHOLD_FACTOR = 2.0


def _check_fov(fov: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    fov = np.asarray(fov, dtype=bool)
    if fov.shape != shape:
        raise DimensionMismatch(f"FoV mask {fov.shape} does not match map {shape}")
    if not fov.any():
        raise EmptyFov("FoV mask has no pixels")
    return fov


def contrast_map(lab: LabImage, fov: np.ndarray) -> np.ndarray:
    """Euclidean Lab distance between the FoV mean and the blurred image.

    Pixels outside the FoV take the mean colour before blurring and read 0 in
    the output.
    """
    fov = _check_fov(fov, (lab.height, lab.width))
    mean = lab.data[fov].mean(axis=0)

    filled = np.where(fov[:, :, None], lab.data, mean)
    blurred = np.stack([gaussian5(filled[:, :, c]) for c in range(3)], axis=2)
    distance = np.sqrt(((blurred - mean) ** 2).sum(axis=2))
    distance[~fov] = 0.0
    return distance


def normalize_max(values: np.ndarray) -> np.ndarray:
    """Scale a non-negative map so its maximum is 1; an all-zero map stays 0."""
    values = np.asarray(values, dtype=np.float64)
    if (values < 0).any():
        raise NegativeInput("saliency values must be non-negative")
    peak = values.max()
    if peak == 0.0:
        return np.zeros_like(values)
    return values / peak


def threshold_ls(saliency: np.ndarray, fov: np.ndarray) -> np.ndarray:
    """Adaptive threshold at twice the FoV mean, capped at 1."""
    fov = _check_fov(fov, saliency.shape)
    tau = min(THRESHOLD_FACTOR * float(saliency[fov].mean()), 1.0)
    return (saliency >= tau) & (saliency > 0.0) & fov


def detect_large(rgb: RasterImage, fov: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return (P_LS, M_LS) for a preprocessed colour image."""
    contrast = contrast_map(rgb_to_lab(rgb), fov)
    saliency = normalize_max(contrast)
    mask = threshold_ls(saliency, fov)
    logger.debug(f"large structures: {int(mask.sum())} pixels")
    return saliency, mask


def export_saliency_pgm(saliency: np.ndarray) -> bytes:
    return encode_pgm(saliency)


def export_mask_pgm(mask: np.ndarray) -> bytes:
    """Binary mask as PGM with values {0, 255}."""
    return encode_pgm(np.asarray(mask, dtype=np.float64))
