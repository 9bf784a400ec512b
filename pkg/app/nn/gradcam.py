import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.errors import ShapeMismatch
from app.nn import layers
from app.nn.model import NUM_CLASSES, ModelParams, forward
from app.raster.image import resize_array

logger = logging.getLogger(__name__)


def grad_cam(
    params: ModelParams,
    inputs: Sequence[np.ndarray],
    target_class: Optional[int] = None,
) -> Tuple[List[np.ndarray], int]:
    """Gradient-weighted class activation maps, one per branch.

    Args:
        params: Trained model parameters
        inputs: One (C, H, W) array per branch
        target_class: Class whose logit is explained; defaults to the prediction

    Returns:
        (maps, target_class). Each map is (H, W) in [0, 1], built from the
        last block's ReLU output before pooling.
    """
    batch = []
    for x in inputs:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3:
            raise ShapeMismatch(f"grad_cam explains one sample at a time, got shape {x.shape}")
        batch.append(x[None])

    cache = forward(params, batch)
    if target_class is None:
        target_class = int(np.argmax(cache.probs[0]))
    if not 0 <= target_class < NUM_CLASSES:
        raise ValueError(f"target class {target_class} outside 0..{NUM_CLASSES - 1}")

    dlogits = np.zeros((1, NUM_CLASSES))
    dlogits[0, target_class] = 1.0
    dfeat = dlogits @ params.head.w.astype(np.float64)

    height, width = batch[0].shape[2], batch[0].shape[3]
    maps: List[np.ndarray] = []
    offset = 0
    for blocks, shape in zip(cache.blocks, cache.last_shapes):
        channels = shape[1]
        dpooled = layers.gap_backward(dfeat[:, offset:offset + channels], shape)
        offset += channels

        last = blocks[-1]
        dact = layers.maxpool2x2_backward(dpooled, last.argmax)[0]
        weights = dact.mean(axis=(1, 2))
        cam = np.maximum(np.tensordot(weights, last.act[0], axes=1), 0.0)
        cam = np.maximum(resize_array(cam, width, height, order=1), 0.0)

        peak = cam.max()
        maps.append(cam / peak if peak > 0 else np.zeros_like(cam))

    logger.debug(f"grad-cam for class {target_class}: {len(maps)} map(s)")
    return maps, target_class
