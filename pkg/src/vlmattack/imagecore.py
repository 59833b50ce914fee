"""Pixel-space types, L-infinity projection semantics, and PNG persistence.

Images are real-valued H x W x 3 arrays on the [0, 255] scale.  All types
are immutable after construction and all operations are pure, so values
can be shared freely between workers.  Quantization to 8-bit integers
happens only when a PNG is written; attack loops accumulate real-valued
steps without compounding rounding error.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ImageError

CHANNELS = 3
PIXEL_MIN = 0.0
PIXEL_MAX = 255.0


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


class PixelImage:
    """An H x W x 3 image with every value finite and in [0, 255]."""

    __slots__ = ("_pixels",)

    def __init__(self, pixels: np.ndarray):
        arr = np.asarray(pixels, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != CHANNELS:
            raise ImageError(
                f"expected an (H, W, {CHANNELS}) array, got shape {arr.shape}"
            )
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ImageError(f"empty image: shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ImageError("pixel values must all be finite")
        if arr.min() < PIXEL_MIN or arr.max() > PIXEL_MAX:
            raise ImageError(
                f"pixel values must lie in [{PIXEL_MIN}, {PIXEL_MAX}], "
                f"got [{arr.min()}, {arr.max()}]"
            )
        self._pixels = _readonly(arr)

    @property
    def pixels(self) -> np.ndarray:
        return self._pixels

    @property
    def height(self) -> int:
        return self._pixels.shape[0]

    @property
    def width(self) -> int:
        return self._pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self._pixels.shape

    def flatten(self) -> np.ndarray:
        """Row-major (height, width, channel) flattening, read-only view."""
        return self._pixels.reshape(-1)

    def __eq__(self, other) -> bool:
        return isinstance(other, PixelImage) and np.array_equal(
            self._pixels, other._pixels
        )

    def __repr__(self) -> str:
        return f"PixelImage({self.height}x{self.width})"


@dataclass(frozen=True)
class LinfBudget:
    """Maximum per-pixel perturbation magnitude, in [0, 255] pixel units."""

    epsilon: float = 8.0

    def __post_init__(self):
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ImageError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if self.epsilon > PIXEL_MAX:
            raise ImageError(f"epsilon {self.epsilon} exceeds the pixel range")


@dataclass(frozen=True)
class Perturbation:
    """Additive noise bounded entrywise by its budget's epsilon."""

    deltas: np.ndarray
    budget: LinfBudget
    # deltas are validated and frozen in __post_init__
    _checked: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        arr = np.asarray(self.deltas, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ImageError("perturbation entries must all be finite")
        if arr.size and np.abs(arr).max() > self.budget.epsilon:
            raise ImageError(
                f"perturbation exceeds budget: max |delta| = {np.abs(arr).max()} "
                f"> epsilon = {self.budget.epsilon}"
            )
        object.__setattr__(self, "deltas", _readonly(arr))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.deltas.shape


def clamp_pixels(raw: np.ndarray) -> np.ndarray:
    """Elementwise clamp of a raw array onto the valid pixel range."""
    return np.clip(raw, PIXEL_MIN, PIXEL_MAX)


def apply_perturbation(x_cle: PixelImage, delta: Perturbation) -> PixelImage:
    """x_cle + delta, then clamped to [0, 255].  Inputs are untouched."""
    if delta.shape != x_cle.shape:
        raise ImageError(
            f"shape mismatch: image {x_cle.shape} vs perturbation {delta.shape}"
        )
    return PixelImage(clamp_pixels(x_cle.pixels + delta.deltas))


def project_delta(raw: np.ndarray, budget: LinfBudget) -> Perturbation:
    """Project a raw array onto the L-infinity ball of the budget.

    Entrywise clamp to [-epsilon, +epsilon]; idempotent and monotone per
    element.  Non-finite entries are rejected.
    """
    arr = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ImageError("cannot project non-finite perturbation entries")
    return Perturbation(np.clip(arr, -budget.epsilon, budget.epsilon), budget)


def quantize(x: PixelImage) -> np.ndarray:
    """Round to nearest 8-bit integer, halves away from zero.

    Pixels are nonnegative, so this is floor(v + 0.5); 127.5 stores as 128.
    """
    return np.floor(x.pixels + 0.5).astype(np.uint8)


def _check_png_header(data: bytes, source: str) -> None:
    # IHDR layout: 8-byte signature, 4-byte length, b"IHDR", width(4),
    # height(4), bit depth(1), color type(1).  Color type 2 = truecolor RGB.
    if len(data) < 26 or data[:8] != b"\x89PNG\r\n\x1a\n" or data[12:16] != b"IHDR":
        raise ImageError(f"{source}: not a PNG file")
    bit_depth, color_type = struct.unpack(">BB", data[24:26])
    if bit_depth != 8:
        raise ImageError(f"{source}: only 8-bit PNGs are supported, got {bit_depth}-bit")
    if color_type != 2:
        raise ImageError(
            f"{source}: only 3-channel RGB PNGs are supported "
            f"(color type {color_type}; grayscale/alpha/palette are rejected)"
        )


def encode_png(x: PixelImage) -> bytes:
    """Lossless 8-bit RGB PNG bytes for an image (after quantization)."""
    buf = io.BytesIO()
    Image.fromarray(quantize(x), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes, source: str = "<bytes>") -> PixelImage:
    _check_png_header(data, source)
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise ImageError(f"{source}: unreadable PNG ({exc})") from exc
    return PixelImage(np.asarray(img, dtype=np.float64))


def save_png(x: PixelImage, path: str | Path) -> None:
    Path(path).write_bytes(encode_png(x))


def load_png(path: str | Path) -> PixelImage:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise ImageError(f"{p}: cannot read file ({exc})") from exc
    return decode_png(data, source=str(p))
