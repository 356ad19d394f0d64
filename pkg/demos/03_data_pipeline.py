"""
From metadata to a split manifest
=================================

Cleansing, lesion-grouped splitting and class balancing on a small
synthetic dataset laid out like HAM10000.
"""

import tempfile
from collections import Counter
from pathlib import Path

from vitderm.augment import augment_class_balance
from vitderm.data import CLASSES, cleanse, load_metadata, split, stats_report
from vitderm.manifest import build_manifest, load_split, write_manifest
from vitderm.synthetic import make_dataset

work = Path(tempfile.mkdtemp(prefix="vitderm_demo_"))
counts = {"akiec": 6, "bcc": 8, "bkl": 10, "df": 4, "mel": 10, "nv": 40, "vasc": 4}
meta = make_dataset(work, counts=counts, image_size=16, seed=0, images_per_lesion=2, missing_every=11)

records = load_metadata(meta)
kept = cleanse(records)
print(f"{len(records)} rows, {len(kept)} after dropping unknown sex / missing age")
print(stats_report(kept).to_text().split("\n\n")[2])

parts = split(kept, seed=42)
print("split sizes (train, val, test):", parts.sizes())
lesions = [{r.lesion_id for r in p} for p in (parts.train, parts.val, parts.test)]
print("lesions shared between splits:", len(lesions[0] & lesions[1]) + len(lesions[0] & lesions[2])
      + len(lesions[1] & lesions[2]))

# lift every class except nv up to the nv count with random affine copies
synthetic = augment_class_balance(parts.train, seed=42)
balanced = Counter(r.dx for r in parts.train) + Counter(s.dx for s in synthetic)
print("balanced train counts:", {dx: balanced[dx] for dx in CLASSES})
print("one synthetic sample:", synthetic[0].image_id, synthetic[0].params.serialize())

entries = build_manifest(parts, synthetic)
write_manifest(work / "split.txt", entries)
train_set = load_split(entries, "train", work / "images", image_size=16)
print("materialized train images:", train_set.images.shape, "->", work / "split.txt")
