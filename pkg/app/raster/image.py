"""Pixel containers, codecs, colour conversion, filtering and geometry.

Every downstream stage works on `RasterImage` (H x W x C floats in [0, 1]) or on
plain 2-D float / bool arrays for single-channel maps and masks.
"""

import io
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from app.errors import CorruptData, UnsupportedFormat, WrongChannelCount

logger = logging.getLogger(__name__)

# Rec.601 luma
GRAY_COEFFS = np.array([0.299, 0.587, 0.114])

# sRGB primaries, D65 white
SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
# white point = image of sRGB (1,1,1), so white maps to (100, 0, 0) exactly
D65_WHITE = SRGB_TO_XYZ.sum(axis=1)

BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0

PNG_MAGIC = b"\x89PNG"
JPEG_MAGIC = b"\xff\xd8"


@dataclass
class RasterImage:
    """H x W x C raster, channel-interleaved, values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise WrongChannelCount(f"expected 1 or 3 channels, got shape {data.shape}")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("raster values must lie in [0, 1]")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def plane(self, index: int = 0) -> np.ndarray:
        """Return one channel as a 2-D array."""
        return self.data[:, :, index]


@dataclass
class LabImage:
    """Per-pixel (L, a, b) triples; L in [0, 100]."""

    data: np.ndarray

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


# ---------------------------
# Netpbm / external codecs
# ---------------------------

def _read_header_tokens(raw: bytes, count: int) -> Tuple[List[bytes], int]:
    """Read `count` whitespace separated header tokens, skipping comments."""
    tokens: List[bytes] = []
    pos = 2
    n = len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise CorruptData("truncated Netpbm header")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not raw[pos:pos + 1].isspace():
        raise CorruptData("missing whitespace after Netpbm header")
    return tokens, pos + 1


def _decode_netpbm(raw: bytes, channels: int) -> RasterImage:
    tokens, offset = _read_header_tokens(raw, 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise CorruptData(f"non-numeric Netpbm header: {e}") from e
    if width < 1 or height < 1:
        raise CorruptData(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormat(f"only 8-bit Netpbm is supported (maxval={maxval})")

    expected = width * height * channels
    payload = raw[offset:offset + expected]
    if len(payload) < expected:
        raise CorruptData(f"truncated payload: {len(payload)} of {expected} bytes")

    values = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return RasterImage(values.astype(np.float64) / 255.0)


def _decode_with_pillow(raw: bytes) -> RasterImage:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(raw)) as im:
            im.load()
            mode = "L" if im.mode in ("L", "1", "I;16", "I", "F") else "RGB"
            values = np.asarray(im.convert(mode), dtype=np.uint8)
    except UnidentifiedImageError as e:
        raise UnsupportedFormat(str(e)) from e
    except (OSError, SyntaxError) as e:
        raise CorruptData(f"codec failed: {e}") from e
    return RasterImage(values.astype(np.float64) / 255.0)


def decode_image(raw: bytes) -> RasterImage:
    """Decode PPM (P6) / PGM (P5) natively, PNG / JPEG through Pillow.

    Raises:
        UnsupportedFormat: unknown magic or unsupported bit depth
        CorruptData: truncated or malformed payload
    """
    if raw[:2] == b"P6":
        return _decode_netpbm(raw, 3)
    if raw[:2] == b"P5":
        return _decode_netpbm(raw, 1)
    if raw[:4] == PNG_MAGIC or raw[:2] == JPEG_MAGIC:
        return _decode_with_pillow(raw)
    raise UnsupportedFormat(f"unknown magic {raw[:2]!r}")


def _to_bytes(values: np.ndarray) -> bytes:
    return np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8).tobytes()


def encode_ppm(img: RasterImage) -> bytes:
    """Binary P6 encoding of a 3-channel raster."""
    if img.channels != 3:
        raise WrongChannelCount(f"PPM needs 3 channels, got {img.channels}")
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + _to_bytes(img.data)


def encode_pgm(values: np.ndarray) -> bytes:
    """Binary P5 encoding of a 2-D map with values in [0, 1]."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3 and values.shape[2] == 1:
        values = values[:, :, 0]
    if values.ndim != 2:
        raise WrongChannelCount(f"PGM needs a single channel, got shape {values.shape}")
    height, width = values.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    return header + _to_bytes(values)


# ---------------------------
# Colour
# ---------------------------

def to_gray(img: RasterImage) -> RasterImage:
    """Rec.601 luma of a 3-channel image."""
    if img.channels != 3:
        raise WrongChannelCount(f"to_gray needs 3 channels, got {img.channels}")
    gray = img.data @ GRAY_COEFFS
    return RasterImage(np.clip(gray, 0.0, 1.0))


def srgb_to_linear(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    linear_portion = values <= 0.04045
    out[linear_portion] = values[linear_portion] / 12.92
    out[~linear_portion] = ((values[~linear_portion] + 0.055) / 1.055) ** 2.4
    return out


def linear_to_srgb(values: np.ndarray) -> np.ndarray:
    values = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.where(values <= 0.0031308, values * 12.92, 1.055 * values ** (1.0 / 2.4) - 0.055)


def _lab_f(t: np.ndarray) -> np.ndarray:
    delta = 6.0 / 29.0
    return np.where(t > delta ** 3, np.cbrt(t), t / (3.0 * delta ** 2) + 4.0 / 29.0)


def rgb_to_lab(img: RasterImage) -> LabImage:
    """sRGB -> linear RGB -> XYZ (D65) -> CIELAB."""
    if img.channels != 3:
        raise WrongChannelCount(f"rgb_to_lab needs 3 channels, got {img.channels}")
    linear = srgb_to_linear(img.data)
    xyz = linear @ SRGB_TO_XYZ.T
    f = _lab_f(xyz / D65_WHITE)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return LabImage(lab)


# ---------------------------
# Filtering
# ---------------------------

def gaussian5(values: np.ndarray) -> np.ndarray:
    """Separable [1,4,6,4,1]/16 blur, rows then columns, edge replication."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise WrongChannelCount(f"gaussian5 needs a single-channel map, got shape {values.shape}")
    out = ndimage.convolve1d(values, BINOMIAL5, axis=1, mode="nearest")
    return ndimage.convolve1d(out, BINOMIAL5, axis=0, mode="nearest")


# ---------------------------
# Geometry
# ---------------------------

def _source_coords(dst: int, src: int) -> np.ndarray:
    scale = src / dst
    return np.clip((np.arange(dst) + 0.5) * scale - 0.5, 0.0, src - 1)


def resize_array(values: np.ndarray, width: int, height: int, order: int = 1) -> np.ndarray:
    """Resample an (H,W) or (H,W,C) array with pixel-centre alignment.

    order=1 is bilinear on clamped source coordinates; order=0 picks
    floor((dst + 0.5) * scale), clamped.
    """
    if width < 1 or height < 1:
        raise ValueError(f"target size must be positive, got {width}x{height}")
    values = np.asarray(values)
    src_h, src_w = values.shape[:2]
    if (src_w, src_h) == (width, height):
        return values.copy()

    if order == 0:
        ys = np.minimum(np.floor((np.arange(height) + 0.5) * (src_h / height)).astype(int), src_h - 1)
        xs = np.minimum(np.floor((np.arange(width) + 0.5) * (src_w / width)).astype(int), src_w - 1)
        return values[ys][:, xs]

    ys = _source_coords(height, src_h)
    xs = _source_coords(width, src_w)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    planes = values[:, :, None] if values.ndim == 2 else values
    out = np.stack(
        [
            ndimage.map_coordinates(planes[:, :, c].astype(np.float64), [grid_y, grid_x], order=1, mode="nearest")
            for c in range(planes.shape[2])
        ],
        axis=2,
    )
    return out[:, :, 0] if values.ndim == 2 else out


def resize_bilinear(img: RasterImage, width: int, height: int) -> RasterImage:
    out = resize_array(img.data, width, height, order=1)
    return RasterImage(np.clip(out, 0.0, 1.0))


def resize_nearest(img: RasterImage, width: int, height: int) -> RasterImage:
    return RasterImage(resize_array(img.data, width, height, order=0))


def flip_h_array(values: np.ndarray) -> np.ndarray:
    """Mirror (H,W) or (H,W,C) left to right."""
    return np.ascontiguousarray(np.asarray(values)[:, ::-1])


def flip_v_array(values: np.ndarray) -> np.ndarray:
    """Mirror (H,W) or (H,W,C) top to bottom."""
    return np.ascontiguousarray(np.asarray(values)[::-1])


def flip_h(img: RasterImage) -> RasterImage:
    return RasterImage(flip_h_array(img.data))


def flip_v(img: RasterImage) -> RasterImage:
    return RasterImage(flip_v_array(img.data))


def rotate_array(values: np.ndarray, angle: float, interp: str = "bilinear") -> np.ndarray:
    """Rotate (H,W) or (H,W,C) about the frame centre; outside samples are 0.

    Positive angles turn the content counter-clockwise as displayed (y down).
    """
    if interp not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if not np.isfinite(angle):
        raise ValueError("rotation angle must be finite")
    values = np.asarray(values)
    if angle % 360.0 == 0.0:
        return values.copy()

    height, width = values.shape[:2]
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    theta = np.deg2rad(angle)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    dx, dy = xx - cx, yy - cy
    # inverse mapping: destination -> source
    src_x = cos_t * dx - sin_t * dy + cx
    src_y = sin_t * dx + cos_t * dy + cy

    order = 1 if interp == "bilinear" else 0
    planes = values[:, :, None] if values.ndim == 2 else values
    out = np.stack(
        [
            ndimage.map_coordinates(planes[:, :, c].astype(np.float64), [src_y, src_x], order=order, mode="constant", cval=0.0)
            for c in range(planes.shape[2])
        ],
        axis=2,
    )
    out = out.astype(values.dtype, copy=False)
    return out[:, :, 0] if values.ndim == 2 else out


def rotate(img: RasterImage, angle: float, interp: str = "bilinear") -> RasterImage:
    return RasterImage(np.clip(rotate_array(img.data, angle, interp), 0.0, 1.0))
