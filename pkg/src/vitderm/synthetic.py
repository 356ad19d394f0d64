"""Small synthetic lesion datasets for demos and tests.

Each class is a coloured blob on a skin-toned background; the blob colour
and position depend on the class so that a tiny model can learn them.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .data import CLASSES, COLUMNS
from .imageio import write_ppm

_COLOURS = np.array([
    [0.55, 0.25, 0.20], [0.80, 0.45, 0.45], [0.45, 0.35, 0.25], [0.65, 0.50, 0.35],
    [0.15, 0.10, 0.10], [0.40, 0.25, 0.15], [0.70, 0.10, 0.25],
])
_SITES = ("back", "lower extremity", "trunk", "upper extremity", "abdomen", "face", "chest", "scalp")


def lesion_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Render one ``[size, size, 3]`` image in [0, 1] for class ``label``."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = 2 * np.pi * label / len(CLASSES)
    cy, cx = 0.5 + 0.25 * np.sin(angle), 0.5 + 0.25 * np.cos(angle)
    radius = 0.22 + 0.03 * rng.standard_normal()
    blob = ((yy - cy) ** 2 + (xx - cx) ** 2) < radius ** 2
    skin = np.array([0.85, 0.68, 0.58]) + 0.03 * rng.standard_normal(3)
    img = np.broadcast_to(skin, (size, size, 3)).copy()
    img[blob] = _COLOURS[label] + 0.03 * rng.standard_normal(3)
    img += 0.02 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def make_dataset(out_dir, counts: Optional[Dict[str, int]] = None, image_size: int = 8, seed: int = 0,
                 images_per_lesion: int = 1, missing_every: int = 0) -> Path:
    """Write ``metadata.csv`` plus ``images/<image_id>.ppm`` and return the metadata path.

    ``missing_every`` > 0 marks every n-th row with unknown sex so that
    cleansing has something to remove.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    counts = counts or {dx: 6 for dx in CLASSES}
    rng = np.random.default_rng(seed)
    rows: List[dict] = []
    n = 0
    for dx in CLASSES:
        label = CLASSES.index(dx)
        for k in range(counts.get(dx, 0)):
            lesion = f"SYN_{len(rows) // images_per_lesion:07d}" if images_per_lesion > 1 else f"SYN_{n:07d}"
            image_id = f"IMG_{n:07d}"
            n += 1
            sex = str(rng.choice(["male", "female"]))
            if missing_every and n % missing_every == 0:
                sex = "unknown"
            rows.append(dict(lesion_id=lesion, image_id=image_id, dx=dx, dx_type="synthetic",
                             age=f"{5 * int(rng.integers(2, 18)):.1f}", sex=sex,
                             localization=str(rng.choice(_SITES))))
            write_ppm(out / "images" / f"{image_id}.ppm", lesion_image(label, image_size, rng))
    meta = out / "metadata.csv"
    with open(meta, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(COLUMNS))
        writer.writeheader()
        writer.writerows(rows)
    return meta
