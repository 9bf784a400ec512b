"""Prior-channel stacks and the RSTK on-disk format.

RSTK layout (little-endian): magic "RSTK", version u16, width u32, height u32,
channels u8, order u8, then width*height*channels float32 values, planar.
"""

import logging
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Tuple

import numpy as np

from app.errors import CorruptStack, DimensionMismatch, IoFailure, MissingMask, WrongChannelCount
from app.raster.image import RasterImage

logger = logging.getLogger(__name__)

RSTK_MAGIC = b"RSTK"
RSTK_VERSION = 1
RSTK_HEADER = struct.Struct("<4sHIIBB")

# channels of an RGB+LS+TS stack fed to each branch, per architecture
BRANCH_CHANNELS = {
    "single": ((0, 1, 2, 3, 4),),
    "dual": ((0, 1, 2, 3), (0, 1, 2, 4)),
    "rgb": ((0, 1, 2),),
    "rgb_ls": ((0, 1, 2, 3),),
    "rgb_ts": ((0, 1, 2, 4),),
}


class StackOrder(IntEnum):
    RGB_LS = 0
    RGB_TS = 1
    RGB_LS_TS = 2

    @property
    def channels(self) -> int:
        return 5 if self is StackOrder.RGB_LS_TS else 4

    @property
    def suffix(self) -> str:
        return {StackOrder.RGB_LS: "ls", StackOrder.RGB_TS: "ts", StackOrder.RGB_LS_TS: "lsts"}[self]


@dataclass
class ChannelStack:
    """Planar (C, H, W) float32 stack: R, G, B then the mask channels."""

    data: np.ndarray
    order: StackOrder

    def __post_init__(self) -> None:
        self.order = StackOrder(self.order)
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] != self.order.channels:
            raise DimensionMismatch(
                f"{self.order.name} needs {self.order.channels} channels, got shape {self.data.shape}"
            )

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def rgb(self) -> np.ndarray:
        """Interleaved (H, W, 3) view of the colour planes."""
        return np.transpose(self.data[:3], (1, 2, 0))


def _mask_plane(mask: Optional[np.ndarray], name: str, shape: Tuple[int, int]) -> np.ndarray:
    if mask is None:
        raise MissingMask(f"stack order needs {name}")
    mask = np.asarray(mask)
    if mask.shape != shape:
        raise DimensionMismatch(f"{name} shape {mask.shape} does not match image {shape}")
    return (mask > 0).astype(np.float32)


def stack_channels(
    img: RasterImage,
    ls: Optional[np.ndarray],
    ts: Optional[np.ndarray],
    order: StackOrder,
) -> ChannelStack:
    """Planar [R, G, B, (M_LS), (M_TS)] in the requested order."""
    if img.channels != 3:
        raise WrongChannelCount(f"stack needs a 3-channel image, got {img.channels}")
    order = StackOrder(order)
    shape = (img.height, img.width)
    planes = [np.transpose(img.data, (2, 0, 1)).astype(np.float32)]
    if order in (StackOrder.RGB_LS, StackOrder.RGB_LS_TS):
        planes.append(_mask_plane(ls, "M_LS", shape)[None])
    if order in (StackOrder.RGB_TS, StackOrder.RGB_LS_TS):
        planes.append(_mask_plane(ts, "M_TS", shape)[None])
    return ChannelStack(np.concatenate(planes, axis=0), order)


def encode_stack(stack: ChannelStack) -> bytes:
    header = RSTK_HEADER.pack(
        RSTK_MAGIC, RSTK_VERSION, stack.width, stack.height, stack.channels, int(stack.order)
    )
    return header + stack.data.astype("<f4").tobytes()


def decode_stack(raw: bytes) -> ChannelStack:
    if len(raw) < RSTK_HEADER.size:
        raise CorruptStack(f"file too short for a header ({len(raw)} bytes)")
    magic, version, width, height, channels, order = RSTK_HEADER.unpack_from(raw)
    if magic != RSTK_MAGIC:
        raise CorruptStack(f"bad magic {magic!r}")
    if version != RSTK_VERSION:
        raise CorruptStack(f"unsupported version {version}")
    try:
        order = StackOrder(order)
    except ValueError as e:
        raise CorruptStack(f"unknown channel order {order}") from e
    if channels != order.channels:
        raise CorruptStack(f"{order.name} cannot have {channels} channels")

    expected = width * height * channels * 4
    payload = raw[RSTK_HEADER.size:]
    if len(payload) != expected:
        raise CorruptStack(f"payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(channels, height, width)
    return ChannelStack(data.astype(np.float32), order)


def save_stack(stack: ChannelStack, path: str) -> None:
    try:
        with open(path, "wb") as f:
            f.write(encode_stack(stack))
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_stack(path: str) -> ChannelStack:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    return decode_stack(raw)


def branch_inputs(kind: str, stack: ChannelStack) -> Tuple[np.ndarray, ...]:
    """Select the channels each architecture consumes from a 5-channel stack."""
    if stack.order is not StackOrder.RGB_LS_TS:
        raise MissingMask(f"{kind} inputs are cut from an RGB+LS+TS stack, got {stack.order.name}")
    if kind not in BRANCH_CHANNELS:
        raise ValueError(f"unknown architecture {kind!r}")
    return tuple(stack.data[list(channels)] for channels in BRANCH_CHANNELS[kind])
