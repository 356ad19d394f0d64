"""Split manifests and in-memory image datasets built from them."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .augment import AugmentParams, SyntheticSample, transform_image
from .data import CLASS_INDEX, SplitDataset
from .errors import DataError
from .imageio import find_image, load_image

HEADER = "# split\timage_id\tdx\tsynthetic\tsource_image_id\taugment"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    image_id: str
    dx: str
    synthetic: bool = False
    source_image_id: str = ""
    params: Optional[AugmentParams] = None

    @property
    def source(self) -> str:
        return self.source_image_id or self.image_id

    @property
    def label(self) -> int:
        return CLASS_INDEX[self.dx]

    def to_line(self) -> str:
        aug = self.params.serialize() if self.params is not None else "-"
        return "\t".join([self.split, self.image_id, self.dx, "1" if self.synthetic else "0", self.source, aug])


def build_manifest(splits: SplitDataset, synthetic: Iterable[SyntheticSample] = ()) -> List[ManifestEntry]:
    entries = []
    for name, records in splits.parts().items():
        entries += [ManifestEntry(name, r.image_id, r.dx, False, r.image_id) for r in records]
    entries += [ManifestEntry("train", s.image_id, s.dx, True, s.source_image_id, s.params) for s in synthetic]
    return entries


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(HEADER + "\n")
        for e in entries:
            fh.write(e.to_line() + "\n")


def read_manifest(path) -> List[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise DataError(f"{path}, line {lineno}: expected 6 tab-separated fields, got {len(parts)}")
            split, image_id, dx, flag, source, aug = parts
            if split not in SPLITS or dx not in CLASS_INDEX or flag not in ("0", "1"):
                raise DataError(f"{path}, line {lineno}: malformed entry {line!r}")
            params = None if aug == "-" else AugmentParams.parse(aug)
            entries.append(ManifestEntry(split, image_id, dx, flag == "1", source, params))
    return entries


@dataclass
class ArrayDataset:
    """Images ``[n, H, W, 3]`` in [0, 1] with integer labels and their ids."""

    images: np.ndarray
    labels: np.ndarray
    ids: List[str]

    def __len__(self) -> int:
        return len(self.labels)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")


def load_split(entries: Sequence[ManifestEntry], split: str, image_dir, image_size: int,
               dtype=np.float32) -> ArrayDataset:
    """Materialize one split; synthetic entries are rendered from their source image."""
    chosen = [e for e in entries if e.split == split]
    cache: Dict[str, np.ndarray] = {}
    images = np.empty((len(chosen), image_size, image_size, 3), dtype=dtype)
    for i, e in enumerate(chosen):
        if e.source not in cache:
            cache[e.source] = load_image(find_image(image_dir, e.source), image_size)
        img = cache[e.source]
        if e.synthetic and e.params is not None:
            img = transform_image(img, e.params)
        images[i] = img
    return ArrayDataset(images, np.array([e.label for e in chosen], dtype=np.int64), [e.image_id for e in chosen])
