"""Attention rollout maps and heatmap overlays.

Rollout: per layer average the heads, add the identity (residual path),
renormalize rows, and multiply layers with the deepest last.  The class
token's row, minus its own column, is reshaped to the patch grid and
min-max normalized; a constant map becomes all zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError
from .imageio import resize_bilinear, write_pgm, write_ppm
from .model import AttentionRecord

# (position, r, g, b); dark violet -> blue -> teal -> green -> yellow
COLORMAP_STOPS = np.array([
    [0.00, 0.267, 0.005, 0.329],
    [0.25, 0.229, 0.322, 0.546],
    [0.50, 0.128, 0.567, 0.551],
    [0.75, 0.369, 0.789, 0.383],
    [1.00, 0.993, 0.906, 0.144],
])


@dataclass(frozen=True)
class AttentionMap:
    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise DimensionError(f"attention map must be a square grid, got {g.shape}")
        if np.any(g < 0) or np.any(g > 1):
            raise ConfigurationError("attention map values must lie in [0, 1]")
        object.__setattr__(self, "grid", g)


def _grid_side(seq_len: int) -> int:
    side = math.isqrt(seq_len - 1)
    if seq_len < 2 or side * side != seq_len - 1:
        raise DimensionError(f"sequence length {seq_len} is not 1 + a square patch count")
    return side


def _check(record: AttentionRecord) -> np.ndarray:
    w = np.asarray(getattr(record, "weights", record), dtype=np.float64)
    if w.ndim != 4 or w.shape[-1] != w.shape[-2] or w.shape[0] < 1 or w.shape[1] < 1:
        raise DimensionError(f"attention record must be [depth, heads, S, S], got {w.shape}")
    _grid_side(w.shape[-1])
    return w


def _layer_matrix(layer: np.ndarray, head: Optional[int]) -> np.ndarray:
    if head is not None:
        if not 0 <= head < layer.shape[0]:
            raise ConfigurationError(f"head {head} out of range 0..{layer.shape[0] - 1}")
        a = layer[head]
    else:
        a = layer.mean(axis=0)
    a = a + np.eye(a.shape[0])
    return a / a.sum(axis=1, keepdims=True)


def rollout_matrices(record: AttentionRecord, layer: Optional[int] = None,
                     head: Optional[int] = None) -> List[np.ndarray]:
    """Rolled matrices after each layer up to ``layer`` (default: all)."""
    w = _check(record)
    last = w.shape[0] - 1 if layer is None else layer
    if not 0 <= last < w.shape[0]:
        raise ConfigurationError(f"layer {layer} out of range 0..{w.shape[0] - 1}")
    rolled = np.eye(w.shape[-1])
    out = []
    for i in range(last + 1):
        rolled = _layer_matrix(w[i], head) @ rolled
        out.append(rolled)
    return out


def _to_map(cls_row: np.ndarray) -> AttentionMap:
    values = cls_row[1:]
    side = _grid_side(len(cls_row))
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        norm = np.zeros_like(values)
    else:
        norm = (values - lo) / (hi - lo)
    return AttentionMap(norm.reshape(side, side))


def attention_rollout(record: AttentionRecord, mode: str = "rollout", layer: Optional[int] = None,
                      head: Optional[int] = None, return_intermediates: bool = False):
    """Saliency map from one sample's attention.

    ``mode="last"`` uses only the class-token attention of one layer
    (``layer``, default the deepest) without identity mixing.  ``head``
    selects a single head instead of the head average.
    """
    if mode == "rollout":
        mats = rollout_matrices(record, layer, head)
        amap = _to_map(mats[-1][0])
        return (amap, mats) if return_intermediates else amap
    if mode == "last":
        w = _check(record)
        idx = w.shape[0] - 1 if layer is None else layer
        if not 0 <= idx < w.shape[0]:
            raise ConfigurationError(f"layer {layer} out of range 0..{w.shape[0] - 1}")
        if head is not None and not 0 <= head < w.shape[1]:
            raise ConfigurationError(f"head {head} out of range 0..{w.shape[1] - 1}")
        a = w[idx, head] if head is not None else w[idx].mean(axis=0)
        amap = _to_map(a[0])
        return (amap, [a]) if return_intermediates else amap
    raise ConfigurationError(f"attention mode must be 'rollout' or 'last', got {mode!r}")


def colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to RGB by linear interpolation between the five stops."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    pos = COLORMAP_STOPS[:, 0]
    return np.stack([np.interp(v, pos, COLORMAP_STOPS[:, c]) for c in (1, 2, 3)], axis=-1)


def render_heatmap(amap: AttentionMap, image: np.ndarray, alpha: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """Returns ``(overlay [H, W, 3], upsampled map [H, W])``, both in [0, 1]."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"image must be [H, W, 3], got {image.shape}")
    g = amap.grid.shape[0]
    h, w = image.shape[:2]
    if h % g or w % g:
        raise DimensionError(f"map grid {g}x{g} does not divide image {h}x{w}")
    up = resize_bilinear(amap.grid, h, w)
    overlay = (1.0 - alpha) * image + alpha * colormap(up)
    return overlay, up


def write_attention(out_dir, image_id: str, overlay: np.ndarray, raw: np.ndarray) -> Tuple[Path, Path]:
    """Write ``<image_id>.attn.ppm`` (overlay) and ``<image_id>.attn.pgm`` (raw map)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ppm, pgm = out / f"{image_id}.attn.ppm", out / f"{image_id}.attn.pgm"
    write_ppm(ppm, overlay)
    write_pgm(pgm, raw)
    return ppm, pgm
