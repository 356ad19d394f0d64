"""Affine/brightness augmentation and class balancing of the training split."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .data import CLASSES, LesionRecord
from .errors import ConfigurationError, DataError

_KEYS = (("rot", "rotation_deg"), ("sx", "shift_x"), ("sy", "shift_y"), ("shear", "shear_deg"),
         ("bright", "brightness"), ("zoom", "zoom"))


@dataclass(frozen=True)
class AugmentParams:
    """One concrete augmentation.  Shifts are fractions of width/height."""

    rotation_deg: float = 0.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    shear_deg: float = 0.0
    brightness: float = 1.0
    zoom: float = 1.0
    fill: str = "nearest"

    def __post_init__(self):
        if self.fill != "nearest":
            raise ConfigurationError(f"fill mode is fixed to 'nearest', got {self.fill!r}")
        for name in ("rotation_deg", "shift_x", "shift_y", "shear_deg", "brightness", "zoom"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"{name} must be finite")
        if abs(self.rotation_deg) > 180:
            raise ConfigurationError(f"rotation_deg {self.rotation_deg} outside [-180, 180]")
        if self.brightness < 0 or self.zoom <= 0:
            raise ConfigurationError("brightness must be >= 0 and zoom > 0")

    def serialize(self) -> str:
        return ";".join(f"{short}={getattr(self, long)!r}" for short, long in _KEYS)

    @classmethod
    def parse(cls, text: str) -> "AugmentParams":
        values = {}
        lookup = dict(_KEYS)
        for item in text.split(";"):
            key, _, value = item.partition("=")
            if key not in lookup:
                raise DataError(f"unknown augmentation key {key!r} in {text!r}")
            values[lookup[key]] = float(value)
        return cls(**values)


IDENTITY = AugmentParams()


@dataclass(frozen=True)
class AugmentRanges:
    """Sampling ranges; rotation/shear are symmetric bounds in degrees."""

    rotation_deg: float = 180.0
    shift: float = 0.1
    shear_deg: float = 10.0
    brightness: tuple = (0.8, 1.2)
    zoom: tuple = (0.9, 1.1)

    def __post_init__(self):
        if not 0 <= self.rotation_deg <= 180:
            raise ConfigurationError("rotation range must lie in [0, 180]")
        if self.shift < 0 or self.shear_deg < 0:
            raise ConfigurationError("shift and shear ranges must be nonnegative")
        if not (0 <= self.brightness[0] <= self.brightness[1]) or not (0 < self.zoom[0] <= self.zoom[1]):
            raise ConfigurationError("brightness/zoom ranges must be ordered and positive")

    def contains(self, p: AugmentParams) -> bool:
        return (abs(p.rotation_deg) <= self.rotation_deg and abs(p.shift_x) <= self.shift
                and abs(p.shift_y) <= self.shift and abs(p.shear_deg) <= self.shear_deg
                and self.brightness[0] <= p.brightness <= self.brightness[1]
                and self.zoom[0] <= p.zoom <= self.zoom[1])


def sample_params(rng: np.random.Generator, ranges: AugmentRanges = AugmentRanges()) -> AugmentParams:
    return AugmentParams(
        rotation_deg=float(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg)),
        shift_x=float(rng.uniform(-ranges.shift, ranges.shift)),
        shift_y=float(rng.uniform(-ranges.shift, ranges.shift)),
        shear_deg=float(rng.uniform(-ranges.shear_deg, ranges.shear_deg)),
        brightness=float(rng.uniform(*ranges.brightness)),
        zoom=float(rng.uniform(*ranges.zoom)),
    )


def affine_matrix(params: AugmentParams) -> np.ndarray:
    """2x2 forward map in (x, y) = (column, row) coordinates: rotation . shear . zoom."""
    th = math.radians(params.rotation_deg)
    sh = math.radians(params.shear_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    shear = np.array([[1.0, math.tan(sh)], [0.0, 1.0]])
    zoom = np.diag([params.zoom, params.zoom])
    return rot @ shear @ zoom


def transform_image(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply one combined affine map about the image centre, then brightness.

    Output pixel ``p`` samples the input at ``A^-1 (p - c - t) + c`` with
    bilinear interpolation; coordinates outside the image take the nearest
    edge pixel.  Brightness multiplies every channel and the result is
    clipped to [0, 1].
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    shift = np.array([params.shift_x * w, params.shift_y * h])
    inv = np.linalg.inv(affine_matrix(params))

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out_xy = np.stack([xs.ravel(), ys.ravel()])  # [2, H*W]
    in_xy = inv @ (out_xy - (centre + shift)[:, None]) + centre[:, None]
    coords = np.stack([in_xy[1], in_xy[0]])  # map_coordinates wants (row, col)

    channels = image[..., None] if image.ndim == 2 else image
    result = np.empty(channels.shape, dtype=np.float64)
    for c in range(channels.shape[2]):
        result[..., c] = ndimage.map_coordinates(channels[..., c], coords, order=1, mode="nearest").reshape(h, w)
    result = np.clip(result * params.brightness, 0.0, 1.0)
    return result if image.ndim == 3 else result[..., 0]


@dataclass(frozen=True)
class SyntheticSample:
    image_id: str
    source_image_id: str
    dx: str
    params: AugmentParams


def sample_stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for synthetic sample ``index`` (order/parallelism safe)."""
    return np.random.default_rng([seed, index])


def augment_class_balance(train: Sequence[LesionRecord], target: Union[int, Mapping[str, int], None] = None,
                          seed: int = 0, ranges: AugmentRanges = AugmentRanges(),
                          exclude: Sequence[str] = ("nv",)) -> List[SyntheticSample]:
    """Plan synthetic samples that lift every non-excluded class to ``target``.

    ``target`` defaults to the nv count (full balance).  Classes already at
    or above their target get no synthetic samples; excluded classes are
    never augmented.  Each sample picks its source uniformly among the
    class's originals and draws fresh parameters from its own substream.
    """
    counts = Counter(r.dx for r in train)
    by_class: Dict[str, List[LesionRecord]] = {dx: [] for dx in CLASSES}
    for r in train:
        by_class[r.dx].append(r)
    if target is None:
        target = counts.get("nv") or max(counts.values(), default=0)

    samples: List[SyntheticSample] = []
    index = 0
    for dx in CLASSES:
        if dx in exclude:
            continue
        goal = target.get(dx, counts[dx]) if isinstance(target, Mapping) else int(target)
        need = goal - counts[dx]
        if need <= 0:
            continue
        originals = by_class[dx]
        if not originals:
            raise DataError(f"class {dx!r} has no training images to augment")
        for _ in range(need):
            rng = sample_stream(seed, index)
            src = originals[int(rng.integers(len(originals)))]
            params = sample_params(rng, ranges)
            samples.append(SyntheticSample(f"{src.image_id}_aug{index:06d}", src.image_id, dx, params))
            index += 1
    return samples
