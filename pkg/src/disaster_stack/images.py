"""Image bytes and rasters: format sniffing, decoding, resampling, perceptual hashes."""

from __future__ import annotations

import io
from typing import NamedTuple

import numpy as np
import scipy.fft
from PIL import Image

from .errors import DataError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
JPEG_PREFIX = b"\xff\xd8\xff"
JPEG_END = b"\xff\xd9"
PNG_IEND = b"\x00\x00\x00\x00IEND\xaeB`\x82"

HASH_BITS = 64
HASH_SIDE = 32
LOWFREQ = 8
_COEF_DECIMALS = 6


class DecodeError(DataError):
    pass


class ImageCheck(NamedTuple):
    format: str | None
    reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.format is not None


def validate_image(data: bytes) -> ImageCheck:
    """Classify raw bytes by magic number; never raises.

    JPEG needs the FF D8 FF prefix and an FF D9 end marker (trailing zero
    padding tolerated). PNG needs the 8-byte signature, an IHDR first chunk
    and a closing IEND chunk.
    """
    if data.startswith(JPEG_PREFIX):
        if data.rstrip(b"\x00").endswith(JPEG_END):
            return ImageCheck("jpeg")
        return ImageCheck(None, "corrupt: jpeg without end marker")
    if data.startswith(PNG_SIGNATURE):
        if len(data) < 8 + 25 + 12 or data[12:16] != b"IHDR" or data[8:12] != b"\x00\x00\x00\x0d":
            return ImageCheck(None, "corrupt: png without IHDR chunk")
        if not data.endswith(PNG_IEND):
            return ImageCheck(None, "corrupt: png without IEND chunk")
        return ImageCheck("png")
    return ImageCheck(None, "unsupported: unrecognised magic bytes")


def decode_image(data: bytes) -> np.ndarray:
    """Decode to an (H, W, 3) uint8 RGB array."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except Exception as exc:  # Pillow raises a zoo of exception types
        raise DecodeError(f"cannot decode image: {exc}") from None


def encode_png(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def encode_jpeg(rgb: np.ndarray, quality=95) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(buf, format="JPEG", quality=quality)
    return buf.getvalue()


def luma(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def bilinear_sample(image: np.ndarray, src_y: np.ndarray, src_x: np.ndarray) -> np.ndarray:
    """Sample ``image`` (H, W[, C]) at fractional coordinates, clamping to the edge."""
    h, w = image.shape[:2]
    y = np.clip(src_y, 0.0, h - 1)
    x = np.clip(src_x, 0.0, w - 1)
    y0 = np.floor(y).astype(np.intp)
    x0 = np.floor(x).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = y - y0
    wx = x - x0
    if image.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    src = image.astype(np.float64, copy=False)
    top = src[y0, x0] * (1.0 - wx) + src[y0, x1] * wx
    bottom = src[y1, x0] * (1.0 - wx) + src[y1, x1] * wx
    return (top * (1.0 - wy) + bottom * wy).astype(image.dtype if image.dtype.kind == "f" else np.float64)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize; a same-size resize is exact."""
    h, w = image.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(image, yy, xx)


def compute_phash(gray: np.ndarray) -> int:
    """64-bit DCT perceptual hash of a 2-D grayscale raster (0..255 scale).

    Resize to 32x32, orthonormal 2-D DCT-II, keep the top-left 8x8 block
    (DC included), set bit i (row-major, most significant first) when the
    coefficient is strictly above the block median. Coefficients are
    rounded to 1e-6 first so exact ties (e.g. flat images) are exact.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or gray.size == 0:
        raise DecodeError(f"phash needs a non-empty 2-D raster, got shape {gray.shape}")
    small = resize_bilinear(gray, HASH_SIDE, HASH_SIDE)
    coef = scipy.fft.dctn(small, type=2, norm="ortho")
    block = np.round(coef[:LOWFREQ, :LOWFREQ], _COEF_DECIMALS).reshape(-1)
    bits = block > np.median(block)
    value = 0
    for bit in bits:
        value = (value << 1) | int(bit)
    return value


def phash_bytes(data: bytes) -> int:
    return compute_phash(luma(decode_image(data)))


def hamming(a: int, b: int) -> int:
    return (a ^ b).bit_count()


def similarity(a: int, b: int) -> float:
    return 1.0 - hamming(a, b) / HASH_BITS


def max_distance(threshold: float) -> int:
    """Largest Hamming distance whose similarity still reaches ``threshold``."""
    return int(np.floor(HASH_BITS * (1.0 - threshold) + 1e-9))
