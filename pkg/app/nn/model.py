"""Single- and dual-branch classifiers on top of the layer primitives.

Each branch is a backbone of [3x3 conv, ReLU, 2x2 max pool] blocks followed
by global average pooling. Branch features are concatenated in branch order
(LS before TS for the dual model) and fed to one softmax head.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from app.dataset.manifest import QualityLabel
from app.dataset.stacking import BRANCH_CHANNELS
from app.errors import ShapeMismatch
from app.nn import layers

logger = logging.getLogger(__name__)

NUM_CLASSES = 3
HEAD_STD = 0.001

ARCHITECTURE_TAGS: Dict[str, int] = {"single": 0, "dual": 1, "rgb": 2, "rgb_ls": 3, "rgb_ts": 4}


def input_channels(architecture: str) -> int:
    """Channel count of each branch input (all branches share it)."""
    return len(BRANCH_CHANNELS[architecture][0])


def branch_count(architecture: str) -> int:
    return len(BRANCH_CHANNELS[architecture])


@dataclass
class BackboneParams:
    kernels: List[np.ndarray]
    biases: List[np.ndarray]

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(k.shape[0] for k in self.kernels)


@dataclass
class HeadParams:
    w: np.ndarray
    b: np.ndarray


@dataclass
class ModelParams:
    architecture: str
    backbones: List[BackboneParams]
    head: HeadParams

    @property
    def widths(self) -> Tuple[int, ...]:
        return self.backbones[0].widths

    @property
    def feature_dim(self) -> int:
        return self.head.w.shape[1]

    def arrays(self) -> List[np.ndarray]:
        """Every parameter array in declaration order: per branch and block
        kernel then bias, then head w and b."""
        out: List[np.ndarray] = []
        for backbone in self.backbones:
            for k, b in zip(backbone.kernels, backbone.biases):
                out.extend([k, b])
        out.extend([self.head.w, self.head.b])
        return out

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.architecture,
            [
                BackboneParams([k.astype(dtype) for k in bb.kernels], [b.astype(dtype) for b in bb.biases])
                for bb in self.backbones
            ],
            HeadParams(self.head.w.astype(dtype), self.head.b.astype(dtype)),
        )


def params_from_arrays(architecture: str, widths: Sequence[int], arrays: Sequence[np.ndarray]) -> ModelParams:
    """Inverse of ModelParams.arrays()."""
    arrays = list(arrays)
    blocks = len(widths)
    backbones = []
    for branch in range(branch_count(architecture)):
        chunk = arrays[branch * 2 * blocks:(branch + 1) * 2 * blocks]
        backbones.append(BackboneParams(list(chunk[0::2]), list(chunk[1::2])))
    return ModelParams(architecture, backbones, HeadParams(arrays[-2], arrays[-1]))


def param_shapes(architecture: str, widths: Sequence[int]) -> List[Tuple[int, ...]]:
    shapes: List[Tuple[int, ...]] = []
    for _ in range(branch_count(architecture)):
        c_in = input_channels(architecture)
        for width in widths:
            shapes.extend([(width, c_in, 3, 3), (width,)])
            c_in = width
    feature_dim = widths[-1] * branch_count(architecture)
    shapes.extend([(NUM_CLASSES, feature_dim), (NUM_CLASSES,)])
    return shapes


def init_params(architecture: str, widths: Sequence[int], rng_seed: int) -> ModelParams:
    """He-scaled Gaussian conv kernels, zero conv biases, N(0, 0.001^2) head.

    Parameters are float32; forward and backward passes run in float64.
    """
    if architecture not in ARCHITECTURE_TAGS:
        raise ValueError(f"unknown architecture {architecture!r}")
    rng = np.random.default_rng(rng_seed)

    backbones = []
    for _ in range(branch_count(architecture)):
        kernels, biases = [], []
        c_in = input_channels(architecture)
        for width in widths:
            std = np.sqrt(2.0 / (c_in * 9))
            kernels.append(rng.normal(0.0, std, size=(width, c_in, 3, 3)).astype(np.float32))
            biases.append(np.zeros(width, dtype=np.float32))
            c_in = width
        backbones.append(BackboneParams(kernels, biases))

    feature_dim = widths[-1] * len(backbones)
    head = HeadParams(
        rng.normal(0.0, HEAD_STD, size=(NUM_CLASSES, feature_dim)).astype(np.float32),
        rng.normal(0.0, HEAD_STD, size=NUM_CLASSES).astype(np.float32),
    )
    logger.debug(f"initialized {architecture} model, widths {tuple(widths)}, feature dim {feature_dim}")
    return ModelParams(architecture, backbones, head)


@dataclass
class BlockCache:
    x: np.ndarray
    pre: np.ndarray
    act: np.ndarray
    argmax: np.ndarray


@dataclass
class ForwardCache:
    inputs: Tuple[np.ndarray, ...]
    blocks: List[List[BlockCache]]
    last_shapes: List[Tuple[int, int, int, int]]
    features: np.ndarray
    logits: np.ndarray
    probs: np.ndarray = field(repr=False)


def _check_inputs(params: ModelParams, inputs: Sequence[np.ndarray]) -> Tuple[np.ndarray, ...]:
    if len(inputs) != len(params.backbones):
        raise ShapeMismatch(f"{params.architecture} model takes {len(params.backbones)} inputs, got {len(inputs)}")
    checked = []
    factor = 2 ** len(params.widths)
    c_in = input_channels(params.architecture)
    for x in inputs:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != c_in:
            raise ShapeMismatch(f"{params.architecture} branch expects {c_in} channels, got shape {x.shape}")
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ShapeMismatch(f"spatial dims {x.shape[2]}x{x.shape[3]} not divisible by {factor}")
        checked.append(x)
    if len({x.shape for x in checked}) > 1:
        raise ShapeMismatch("branch inputs differ in shape")
    return tuple(checked)


def _backbone_forward(x: np.ndarray, backbone: BackboneParams) -> Tuple[np.ndarray, List[BlockCache]]:
    caches = []
    for k, b in zip(backbone.kernels, backbone.biases):
        pre = layers.conv3x3_forward(x, k.astype(np.float64), b.astype(np.float64))
        act = layers.relu_forward(pre)
        pooled, argmax = layers.maxpool2x2_forward(act)
        caches.append(BlockCache(x, pre, act, argmax))
        x = pooled
    return x, caches


def forward(params: ModelParams, inputs: Sequence[np.ndarray]) -> ForwardCache:
    """Run every branch, concatenate GAP features, apply the head."""
    inputs = _check_inputs(params, inputs)
    blocks, shapes, features = [], [], []
    for x, backbone in zip(inputs, params.backbones):
        last, caches = _backbone_forward(x, backbone)
        blocks.append(caches)
        shapes.append(last.shape)
        features.append(layers.gap_forward(last))
    f = np.concatenate(features, axis=1)
    logits = layers.head_logits(f, params.head.w.astype(np.float64), params.head.b.astype(np.float64))
    return ForwardCache(inputs, blocks, shapes, f, logits, layers.softmax(logits))


def forward_single(params: ModelParams, stack: np.ndarray) -> np.ndarray:
    """Class probabilities for 5-channel [R, G, B, M_LS, M_TS] input(s)."""
    return forward(params, (stack,)).probs


def forward_dual(params: ModelParams, s_ls: np.ndarray, s_ts: np.ndarray) -> np.ndarray:
    return forward(params, (s_ls, s_ts)).probs


def _backbone_backward(
    dlast: np.ndarray, caches: List[BlockCache], backbone: BackboneParams
) -> List[np.ndarray]:
    grads: List[np.ndarray] = []
    d = dlast
    for cache, k in zip(reversed(caches), reversed(backbone.kernels)):
        d = layers.maxpool2x2_backward(d, cache.argmax)
        d = layers.relu_backward(d, cache.pre)
        d, dk, db = layers.conv3x3_backward(d, cache.x, k.astype(np.float64))
        grads[:0] = [dk, db]
    return grads


def backward(params: ModelParams, cache: ForwardCache, dlogits: np.ndarray) -> List[np.ndarray]:
    """Parameter gradients in ModelParams.arrays() order."""
    dfeat, dw, db = layers.head_backward(dlogits, cache.features, params.head.w.astype(np.float64))
    grads: List[np.ndarray] = []
    offset = 0
    for caches, shape, backbone in zip(cache.blocks, cache.last_shapes, params.backbones):
        width = shape[1]
        dlast = layers.gap_backward(dfeat[:, offset:offset + width], shape)
        offset += width
        grads.extend(_backbone_backward(dlast, caches, backbone))
    grads.extend([dw, db])
    return grads


def loss_and_grads(
    params: ModelParams, inputs: Sequence[np.ndarray], labels: Sequence[int]
) -> Tuple[float, List[np.ndarray]]:
    cache = forward(params, inputs)
    loss, dlogits = layers.cross_entropy(cache.probs, labels)
    return loss, backward(params, cache, dlogits)


def sgd_step(params: ModelParams, grads: Sequence[np.ndarray], lr: float) -> None:
    """Plain SGD in place; the update is computed in float64 and stored back
    at the parameters' own precision."""
    for p, g in zip(params.arrays(), grads):
        p[...] = p.astype(np.float64) - lr * g


def predict(params: ModelParams, inputs: Sequence[np.ndarray]) -> Tuple[List[QualityLabel], np.ndarray]:
    """Argmax labels (ties go to the lower class index) and probabilities."""
    probs = forward(params, inputs).probs
    return [QualityLabel(int(i)) for i in np.argmax(probs, axis=1)], probs
