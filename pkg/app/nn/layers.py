"""Layer primitives with hand-written backward passes.

Activations are planar (N, C, H, W) float arrays. Every forward returns what
its backward needs; nothing is stored on the side.
"""

import logging
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.errors import OddDimension, ShapeMismatch

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def _check_tensor4(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeMismatch(f"{name} must be (N, C, H, W), got shape {x.shape}")


def _windows(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W, 3, 3) view of the zero-padded 3x3 neighbourhoods."""
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(padded, (3, 3), axis=(2, 3))


def conv3x3_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1, zero-padded 3x3 cross-correlation.

    Args:
        x: (N, C_in, H, W)
        kernels: (C_out, C_in, 3, 3)
        bias: (C_out,)

    Returns:
        (N, C_out, H, W)
    """
    _check_tensor4(x)
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3) or kernels.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"kernels {kernels.shape} do not fit input with {x.shape[1]} channels")
    if bias.shape != (kernels.shape[0],):
        raise ShapeMismatch(f"bias {bias.shape} does not match {kernels.shape[0]} output channels")

    out = np.tensordot(_windows(x), kernels, axes=([1, 4, 5], [1, 2, 3]))
    return np.transpose(out, (0, 3, 1, 2)) + bias[None, :, None, None]


def conv3x3_backward(
    dout: np.ndarray, x: np.ndarray, kernels: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. (input, kernels, bias)."""
    _check_tensor4(dout, "gradient")
    n, _, h, w = x.shape
    if dout.shape != (n, kernels.shape[0], h, w):
        raise ShapeMismatch(f"gradient {dout.shape} does not match conv output")

    dbias = dout.sum(axis=(0, 2, 3))
    dkernels = np.tensordot(dout, _windows(x), axes=([0, 2, 3], [0, 2, 3]))

    dpadded = np.zeros((n, x.shape[1], h + 2, w + 2), dtype=np.result_type(dout, kernels))
    for i in range(3):
        for j in range(3):
            # (N, H, W, C_in)
            contrib = np.tensordot(dout, kernels[:, :, i, j], axes=([1], [0]))
            dpadded[:, :, i:i + h, j:j + w] += np.transpose(contrib, (0, 3, 1, 2))
    return dpadded[:, :, 1:-1, 1:-1], dkernels, dbias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def _blocks(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def maxpool2x2_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pooling.

    Returns:
        (pooled, argmax) where argmax indexes the row-major position inside
        each 2x2 block; ties keep the first maximum.
    """
    _check_tensor4(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise OddDimension(f"max pooling needs even spatial dims, got {x.shape[2]}x{x.shape[3]}")
    blocks = _blocks(x)
    argmax = np.argmax(blocks, axis=-1)
    pooled = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return pooled, argmax


def maxpool2x2_backward(dout: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    if dout.shape != argmax.shape:
        raise ShapeMismatch(f"gradient {dout.shape} does not match pooled map {argmax.shape}")
    n, c, hh, hw = dout.shape
    blocks = np.zeros((n, c, hh, hw, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, argmax[..., None], dout[..., None], axis=-1)
    return blocks.reshape(n, c, hh, hw, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * hh, 2 * hw)


def gap_forward(x: np.ndarray) -> np.ndarray:
    """Global average pooling: (N, C, H, W) -> (N, C)."""
    _check_tensor4(x)
    return x.mean(axis=(2, 3))


def gap_backward(dout: np.ndarray, shape: Tuple[int, int, int, int]) -> np.ndarray:
    h, w = shape[2], shape[3]
    return np.broadcast_to(dout[:, :, None, None] / (h * w), shape).copy()


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def head_logits(features: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Logits w f + b for a feature batch (N, D) or a single vector (D,)."""
    if features.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"feature dim {features.shape[-1]} does not match head width {w.shape[1]}")
    return features @ w.T + b


def head_forward(features: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return softmax(head_logits(features, w, b))


def head_backward(
    dlogits: np.ndarray, features: np.ndarray, w: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. (features, w, b) for a batch."""
    return dlogits @ w, dlogits.T @ features, dlogits.sum(axis=0)


def cross_entropy(probs: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """Mean -log p[label] and its gradient at the logits, (p - onehot) / N.

    Accepts a single probability vector with a scalar label as well.
    """
    single = probs.ndim == 1
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if labels.shape[0] != probs.shape[0]:
        raise ShapeMismatch(f"{labels.shape[0]} labels for {probs.shape[0]} predictions")

    rows = np.arange(probs.shape[0])
    picked = np.maximum(probs[rows, labels], PROB_FLOOR)
    loss = float(-np.log(picked).mean())

    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= probs.shape[0]
    return loss, (dlogits[0] if single else dlogits)
