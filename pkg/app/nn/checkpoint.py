"""SIQA checkpoint format.

Layout (little-endian): magic "SIQA", version u16, architecture tag u8,
block count u8, widths u16[blocks], input channels u8, feature dim u16,
parameters as f32 in ModelParams.arrays() order, epoch u16, then the 32-byte
PCG64 state of the shuffling generator (state, increment; 16 bytes each).
"""

import logging
import struct
from dataclasses import dataclass
from typing import List

import numpy as np

from app.errors import CorruptCheckpoint, IoFailure
from app.nn.model import (
    ARCHITECTURE_TAGS,
    ModelParams,
    branch_count,
    input_channels,
    param_shapes,
    params_from_arrays,
)

logger = logging.getLogger(__name__)

MAGIC = b"SIQA"
VERSION = 1
RNG_STATE_BYTES = 32

_HEAD = struct.Struct("<4sHBB")
_SHAPE_INFO = struct.Struct("<BH")
_EPOCH = struct.Struct("<H")

_TAG_NAMES = {tag: name for name, tag in ARCHITECTURE_TAGS.items()}


@dataclass
class ModelCheckpoint:
    params: ModelParams
    epoch: int
    rng_state: bytes

    @property
    def architecture(self) -> str:
        return self.params.architecture


def rng_state_bytes(rng: np.random.Generator) -> bytes:
    state = rng.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise ValueError(f"only PCG64 state can be stored, got {state['bit_generator']}")
    inner = state["state"]
    return int(inner["state"]).to_bytes(16, "little") + int(inner["inc"]).to_bytes(16, "little")


def restore_rng(raw: bytes) -> np.random.Generator:
    """Generator continuing from a stored PCG64 state."""
    if len(raw) != RNG_STATE_BYTES:
        raise CorruptCheckpoint(f"rng state must be {RNG_STATE_BYTES} bytes, got {len(raw)}")
    bit_generator = np.random.PCG64()
    bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int.from_bytes(raw[:16], "little"), "inc": int.from_bytes(raw[16:], "little")},
        "has_uint32": 0,
        "uinteger": 0,
    }
    return np.random.Generator(bit_generator)


def encode_checkpoint(checkpoint: ModelCheckpoint) -> bytes:
    params = checkpoint.params
    widths = params.widths
    parts: List[bytes] = [
        _HEAD.pack(MAGIC, VERSION, ARCHITECTURE_TAGS[params.architecture], len(widths)),
        struct.pack(f"<{len(widths)}H", *widths),
        _SHAPE_INFO.pack(input_channels(params.architecture), params.feature_dim),
    ]
    parts.extend(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays())
    parts.append(_EPOCH.pack(checkpoint.epoch))
    parts.append(checkpoint.rng_state)
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> ModelCheckpoint:
    try:
        magic, version, tag, blocks = _HEAD.unpack_from(raw, 0)
        offset = _HEAD.size
        if magic != MAGIC:
            raise CorruptCheckpoint(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptCheckpoint(f"unsupported version {version}")
        if tag not in _TAG_NAMES:
            raise CorruptCheckpoint(f"unknown architecture tag {tag}")
        architecture = _TAG_NAMES[tag]
        if blocks == 0:
            raise CorruptCheckpoint("checkpoint has no backbone blocks")

        widths = struct.unpack_from(f"<{blocks}H", raw, offset)
        offset += 2 * blocks
        channels, feature_dim = _SHAPE_INFO.unpack_from(raw, offset)
        offset += _SHAPE_INFO.size
    except struct.error as e:
        raise CorruptCheckpoint(f"truncated header: {e}") from e

    if channels != input_channels(architecture):
        raise CorruptCheckpoint(f"{architecture} expects {input_channels(architecture)} input channels, header says {channels}")
    if feature_dim != widths[-1] * branch_count(architecture):
        raise CorruptCheckpoint(f"feature dim {feature_dim} inconsistent with widths {widths}")

    shapes = param_shapes(architecture, widths)
    sizes = [int(np.prod(s)) for s in shapes]
    expected = offset + 4 * sum(sizes) + _EPOCH.size + RNG_STATE_BYTES
    if len(raw) != expected:
        raise CorruptCheckpoint(f"checkpoint is {len(raw)} bytes, expected {expected}")

    arrays = []
    for shape, size in zip(shapes, sizes):
        arrays.append(np.frombuffer(raw, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32))
        offset += 4 * size
    (epoch,) = _EPOCH.unpack_from(raw, offset)
    offset += _EPOCH.size
    rng_state = bytes(raw[offset:offset + RNG_STATE_BYTES])

    params = params_from_arrays(architecture, widths, arrays)
    return ModelCheckpoint(params, epoch, rng_state)


def save_checkpoint(checkpoint: ModelCheckpoint, path: str) -> None:
    try:
        with open(path, "wb") as f:
            f.write(encode_checkpoint(checkpoint))
    except OSError as e:
        raise IoFailure(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"✓ Saved {checkpoint.architecture} checkpoint (epoch {checkpoint.epoch}) to {path}")


def load_checkpoint(path: str) -> ModelCheckpoint:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoFailure(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(raw)
