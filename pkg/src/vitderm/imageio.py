"""Netpbm reading/writing, optional Pillow decoding, bilinear resizing."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, DimensionError

IMAGE_EXTENSIONS = (".ppm", ".jpg", ".jpeg", ".png", ".bmp")


def _read_header_tokens(raw: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated netpbm header")
        tokens.append(int(raw[start:pos]))
    # exactly one whitespace byte separates the header from binary data
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read a binary P6 (RGB) or P5 (gray) file with maxval <= 255 as uint8."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P6", b"P5"):
        raise DataError(f"{path}: not a binary PPM/PGM file")
    (w, h, maxval), offset = _read_header_tokens(raw, 3)
    if not 0 < maxval < 256:
        raise DataError(f"{path}: only 8-bit netpbm files are supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    data = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset) if len(raw) >= offset + n else None
    if data is None:
        raise DataError(f"{path}: truncated pixel data")
    img = data.reshape(h, w, channels)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * 255 / maxval).astype(np.uint8)
    return img if channels == 3 else img[..., 0]


def _to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write ``[H, W, 3]`` (uint8, or floats in [0, 1]) as binary P6."""
    img = _to_uint8(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"PPM needs [H, W, 3], got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Write ``[H, W]`` (uint8, or floats in [0, 1]) as binary P5."""
    img = _to_uint8(image)
    if img.ndim != 2:
        raise DimensionError(f"PGM needs [H, W], got {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_rgb(path) -> np.ndarray:
    """Decode an 8-bit RGB image.  Netpbm is built in; other formats go through Pillow."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        img = read_pnm(path)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        return img
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - Pillow is optional
        raise DataError(f"{path}: decoding {path.suffix} files needs Pillow") from exc
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping; works on [H, W] or [H, W, C]."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if (h, w) == (height, width):
        return image.copy()

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_weights(h, height)
    x0, x1, fx = axis_weights(w, width)
    extra = (1,) * (image.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bottom = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def load_image(path, size: int) -> np.ndarray:
    """Read an RGB file as floats in [0, 1], resized to ``size x size`` when needed."""
    img = read_rgb(path).astype(np.float64) / 255.0
    if img.shape[:2] != (size, size):
        img = np.clip(resize_bilinear(img, size, size), 0.0, 1.0)
    return img


def find_image(image_dir, image_id: str) -> Path:
    """Locate ``<image_id>.<ext>`` inside ``image_dir``."""
    base = Path(image_dir)
    for ext in IMAGE_EXTENSIONS:
        for candidate in (base / f"{image_id}{ext}", base / f"{image_id}{ext.upper()}"):
            if candidate.is_file():
                return candidate
    raise DataError(f"no image file for {image_id!r} in {os.fspath(base)}")
