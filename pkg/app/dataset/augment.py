import logging
from typing import Tuple

import numpy as np

from app.dataset.stacking import ChannelStack
from app.raster.image import flip_h_array, flip_v_array, rotate_array

logger = logging.getLogger(__name__)

RGB_CHANNELS = 3


def augment_draws(rng_seed: int, rotation_range: float = 30.0) -> Tuple[bool, bool, float]:
    """The (flip_h, flip_v, angle) a seed stands for, drawn in that order."""
    rng = np.random.default_rng(rng_seed)
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-rotation_range, rotation_range))
    return flip_h, flip_v, angle


def augment(stack: ChannelStack, rng_seed: int, rotation_range: float = 30.0) -> ChannelStack:
    """Random flips and rotation shared by every channel.

    Colour planes are resampled bilinearly, mask planes by nearest neighbour
    so they stay binary.
    """
    flip_h, flip_v, angle = augment_draws(rng_seed, rotation_range)
    planes = []
    for c in range(stack.data.shape[0]):
        plane = stack.data[c]
        if flip_h:
            plane = flip_h_array(plane)
        if flip_v:
            plane = flip_v_array(plane)
        interp = "bilinear" if c < RGB_CHANNELS else "nearest"
        planes.append(rotate_array(plane, angle, interp))
    out = np.stack(planes).astype(np.float32)
    np.clip(out[:RGB_CHANNELS], 0.0, 1.0, out=out[:RGB_CHANNELS])
    return ChannelStack(out, stack.order)


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from integers such as (seed, epoch, sample index)."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])
