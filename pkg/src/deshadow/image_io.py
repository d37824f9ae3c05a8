"""Image buffers and lossless file I/O (PNG and binary PPM)."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

# ITU-R BT.601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)

_SUPPORTED_EXT = {".png", ".ppm"}


class ImageFormatError(ValueError):
    """Unsupported or malformed image file."""


@dataclass(frozen=True)
class ImageBuffer:
    """An H x W x C float32 raster with samples nominally in [0, 1].

    C is 1 (grayscale) or 3 (RGB). The underlying array is made read-only
    at construction; every operation returns a new buffer. Construction
    rejects non-finite samples.
    """

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise ValueError(f"expected an (H, W, 1|3) array, got shape {a.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"empty image: shape {a.shape}")
        a = np.ascontiguousarray(a, dtype=np.float32)
        if not np.isfinite(a).all():
            raise ValueError("image contains NaN or Inf samples")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def load_image(path: str | Path) -> ImageBuffer:
    """Load an 8- or 16-bit PNG/PPM, scaled to [0, 1] by the format maximum.

    Images with an alpha channel are rejected rather than silently flattened.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    if path.suffix.lower() not in _SUPPORTED_EXT:
        raise ImageFormatError(f"unsupported format {path.suffix!r} (PNG/PPM only): {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageFormatError(f"could not decode image: {path}")
    if raw.ndim == 3 and raw.shape[2] == 4:
        raise ImageFormatError(f"alpha channel not supported: {path}")
    if raw.ndim == 3 and raw.shape[2] == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    elif raw.ndim != 2:
        raise ImageFormatError(f"unsupported channel layout {raw.shape}: {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageFormatError(f"unsupported sample type {raw.dtype}: {path}")
    return ImageBuffer(raw.astype(np.float32) / np.float32(scale))


def save_image(img: ImageBuffer, path: str | Path) -> None:
    """Write an 8-bit PNG or binary PPM (P6), clamping and rounding samples.

    Samples are clamped to [0, 1] and quantized with round-half-to-even.
    PPM holds 3-channel images only.
    """
    path = Path(path)
    ext = path.suffix.lower()
    if ext not in _SUPPORTED_EXT:
        raise ImageFormatError(f"unsupported output format {ext!r} (PNG/PPM only): {path}")
    q = np.rint(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    if img.channels == 3:
        out = cv2.cvtColor(q, cv2.COLOR_RGB2BGR)
    else:
        if ext == ".ppm":
            raise ImageFormatError("PPM (P6) holds 3-channel images only; use PNG for grayscale")
        out = q[:, :, 0]
    parent = path.parent
    if str(parent) and not parent.is_dir():
        raise OSError(f"output directory does not exist: {parent}")
    if not cv2.imwrite(str(path), out):
        raise OSError(f"could not write image: {path}")


def to_luminance(img: ImageBuffer) -> ImageBuffer:
    """BT.601 luma for 3-channel input; identity for single-channel."""
    if img.channels == 1:
        return img
    lum = img.data.astype(np.float64) @ LUMA_WEIGHTS
    return ImageBuffer(lum.astype(np.float32))


def resize_bilinear(img: ImageBuffer, height: int, width: int) -> ImageBuffer:
    """Bilinear resize with half-pixel centers and clamp-to-edge sampling."""
    if height < 1 or width < 1:
        raise ValueError(f"target dimensions must be >= 1, got {height}x{width}")
    src = img.data.astype(np.float64)
    h, w = src.shape[:2]
    sy = np.clip((np.arange(height, dtype=np.float64) + 0.5) * (h / height) - 0.5, 0.0, h - 1.0)
    sx = np.clip((np.arange(width, dtype=np.float64) + 0.5) * (w / width) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[:, None, None]
    wx = (sx - x0)[None, :, None]
    top = src[y0][:, x0] * (1.0 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1.0 - wx) + src[y1][:, x1] * wx
    out = top * (1.0 - wy) + bottom * wy
    return ImageBuffer(out.astype(np.float32))
