"""Lesion metadata: ingestion, cleansing, lesion-grouped splitting, EDA tables, manifests."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter, OrderedDict, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

CLASSES = ("akiec", "bcc", "bkl", "df", "mel", "nv", "vasc")
CLASS_INDEX = {dx: i for i, dx in enumerate(CLASSES)}
COLUMNS = ("lesion_id", "image_id", "dx", "dx_type", "age", "sex", "localization")
UNKNOWN = "unknown"

# reference values reported for the cleansed HAM10000 metadata
REFERENCE_CLEANSED_COUNT = 9948
REFERENCE_SPLIT_COUNTS = {"train": 7976, "val": 987, "test": 985}


@dataclass(frozen=True)
class LesionRecord:
    lesion_id: str
    image_id: str
    dx: str
    dx_type: str = ""
    age: Optional[float] = None
    sex: str = UNKNOWN
    localization: str = UNKNOWN

    def __post_init__(self):
        if self.dx not in CLASS_INDEX:
            raise DataError(f"unknown diagnosis label {self.dx!r}")

    @property
    def label(self) -> int:
        return CLASS_INDEX[self.dx]


def load_metadata(path) -> List[LesionRecord]:
    """Parse a HAM10000-style metadata CSV.

    Columns may come in any order; extra columns are ignored.  Blank age is
    stored as ``None``; blank sex/localization become ``"unknown"``.
    """
    records: List[LesionRecord] = []
    seen: Dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        reader.fieldnames = header
        for row in reader:
            line = reader.line_num
            row = {k: (v or "").strip() for k, v in row.items() if k is not None}
            dx = row["dx"]
            if dx not in CLASS_INDEX:
                raise DataError(f"{path}, line {line}: unknown dx label {dx!r}")
            age_text = row["age"]
            if age_text == "" or age_text.lower() in ("nan", UNKNOWN):
                age = None
            else:
                try:
                    age = float(age_text)
                except ValueError:
                    raise DataError(f"{path}, line {line}: unparseable age {age_text!r}") from None
                if not math.isfinite(age) or age < 0:
                    raise DataError(f"{path}, line {line}: invalid age {age_text!r}")
            image_id = row["image_id"]
            if image_id in seen:
                raise DataError(f"{path}, line {line}: duplicate image_id {image_id!r} (first on line {seen[image_id]})")
            seen[image_id] = line
            records.append(LesionRecord(
                lesion_id=row["lesion_id"], image_id=image_id, dx=dx, dx_type=row["dx_type"], age=age,
                sex=row["sex"] or UNKNOWN, localization=row["localization"] or UNKNOWN))
    return records


def missing_field_counts(records: Iterable[LesionRecord]) -> Dict[str, int]:
    counts = {"sex": 0, "age": 0, "localization": 0}
    for r in records:
        counts["sex"] += r.sex == UNKNOWN
        counts["age"] += r.age is None
        counts["localization"] += r.localization == UNKNOWN
    return counts


def cleanse(records: Sequence[LesionRecord], drop_unknown_localization: bool = False) -> List[LesionRecord]:
    """Drop records with unknown sex or missing age (optionally unknown localization too).

    Per-field missing counts and the achieved total are logged next to the
    reference count of 9,948.
    """
    records = list(records)
    counts = missing_field_counts(records)
    kept = [r for r in records
            if r.sex != UNKNOWN and r.age is not None
            and not (drop_unknown_localization and r.localization == UNKNOWN)]
    logger.info("cleanse: %d -> %d records (missing sex=%d, age=%d, localization=%d; reference %d)",
                len(records), len(kept), counts["sex"], counts["age"], counts["localization"],
                REFERENCE_CLEANSED_COUNT)
    return kept


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitDataset:
    train: List[LesionRecord]
    val: List[LesionRecord]
    test: List[LesionRecord]
    seed: int
    class_index: Dict[str, int] = field(default_factory=lambda: dict(CLASS_INDEX))

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def parts(self) -> Dict[str, List[LesionRecord]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def split(records: Sequence[LesionRecord], ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1),
          seed: int = 0) -> SplitDataset:
    """Lesion-grouped train/val/test split.

    Lesion groups are shuffled with ``seed`` and assigned whole, greedily:
    to test until it reaches its target size, then to val, the rest to train.
    Images of one lesion therefore never straddle two splits.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    groups: Dict[str, List[LesionRecord]] = defaultdict(list)
    for r in records:
        groups[r.lesion_id].append(r)
    if len(groups) < 3:
        raise DataError(f"need at least 3 lesion groups to split, got {len(groups)}")
    total = len(records)
    n_val = int(round(ratios[1] * total))
    n_test = int(round(ratios[2] * total))

    keys = sorted(groups)
    order = np.random.default_rng(seed).permutation(len(keys))
    train, val, test = [], [], []
    for idx in order:
        members = groups[keys[idx]]
        if len(test) < n_test:
            test.extend(members)
        elif len(val) < n_val:
            val.extend(members)
        else:
            train.extend(members)
    logger.info("split(seed=%d): train=%d val=%d test=%d (reference %s)", seed, len(train), len(val), len(test),
                REFERENCE_SPLIT_COUNTS)
    return SplitDataset(train, val, test, seed)


# ---------------------------------------------------------------------------
# exploratory statistics
# ---------------------------------------------------------------------------

def age_bin(age: float) -> str:
    lo = int(age // 5) * 5
    return f"{lo}-{lo + 4}"


def _bin_sort_key(label: str) -> int:
    return int(label.split("-")[0])


@dataclass
class StatsReport:
    n: int
    gender_share: Dict[str, float]
    age_mean: Optional[float]
    age_mean_by_sex: Dict[str, float]
    age_histogram: Dict[str, int]
    dx: Dict[str, int]
    dx_by_sex: Dict[str, Dict[str, int]]
    dx_by_age: Dict[str, Dict[str, int]]
    localization: Dict[str, int]
    localization_by_sex: Dict[str, Dict[str, int]]
    localization_by_age: Dict[str, Dict[str, int]]

    def key_values(self) -> List[str]:
        lines = [f"n={self.n}"]
        lines += [f"gender_share.{k}={v:.4f}" for k, v in self.gender_share.items()]
        if self.age_mean is not None:
            lines.append(f"age_mean={self.age_mean:.4f}")
        lines += [f"age_mean.{k}={v:.4f}" for k, v in self.age_mean_by_sex.items()]
        lines += [f"age_hist.{k}={v}" for k, v in self.age_histogram.items()]
        lines += [f"dx.{k}={v}" for k, v in self.dx.items()]
        lines += [f"localization.{k}={v}" for k, v in self.localization.items()]
        return lines

    def to_text(self) -> str:
        blocks = [
            _table("Gender distribution", ["sex", "share"],
                   [[k, f"{100 * v:.2f}%"] for k, v in self.gender_share.items()]),
            _table("Age distribution (5-year bins)", ["age", "count"],
                   [[k, str(v)] for k, v in self.age_histogram.items()]),
            _table("Skin cancer types", ["dx", "count"], [[k, str(v)] for k, v in self.dx.items()]),
            _crosstab("Skin cancer types by gender", "dx", self.dx_by_sex),
            _crosstab("Skin cancer types by age", "dx", self.dx_by_age),
            _table("Body localization areas", ["localization", "count"],
                   [[k, str(v)] for k, v in self.localization.items()]),
            _crosstab("Body localization areas by gender", "localization", self.localization_by_sex),
            _crosstab("Body localization areas by age", "localization", self.localization_by_age),
        ]
        return "\n\n".join(blocks) + "\n\n" + "\n".join(self.key_values()) + "\n"


def _table(title: str, header: List[str], rows: List[List[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)] if rows else [len(h) for h in header]
    fmt = "  ".join(f"{{:<{w}}}" if i == 0 else f"{{:>{w}}}" for i, w in enumerate(widths))
    lines = [title, fmt.format(*header)]
    lines += [fmt.format(*row) for row in rows]
    return "\n".join(lines)


def _crosstab(title: str, row_name: str, table: Dict[str, Dict[str, int]]) -> str:
    cols = list(table)
    row_keys = sorted({k for d in table.values() for k in d})
    rows = [[rk] + [str(table[c].get(rk, 0)) for c in cols] for rk in row_keys]
    return _table(title, [row_name] + cols, rows)


def stats_report(records: Sequence[LesionRecord]) -> StatsReport:
    """Descriptive statistics behind the gender/age/diagnosis/localization figures."""
    records = list(records)
    n = len(records)
    sexes = Counter(r.sex for r in records)
    gender_share = {k: v / n for k, v in sorted(sexes.items())} if n else {}
    ages = [r.age for r in records if r.age is not None]
    age_mean = float(np.mean(ages)) if ages else None
    by_sex_ages: Dict[str, List[float]] = defaultdict(list)
    for r in records:
        if r.age is not None:
            by_sex_ages[r.sex].append(r.age)
    hist = Counter(age_bin(a) for a in ages)
    age_histogram = OrderedDict((k, hist[k]) for k in sorted(hist, key=_bin_sort_key))

    def crosstab(key_fn, group_fn, group_order=None):
        out: Dict[str, Counter] = defaultdict(Counter)
        for r in records:
            g = group_fn(r)
            if g is None:
                continue
            out[g][key_fn(r)] += 1
        order = group_order or sorted(out)
        return OrderedDict((g, dict(sorted(out[g].items()))) for g in order if g in out)

    def age_group(r):
        return None if r.age is None else age_bin(r.age)

    age_order = sorted({age_bin(a) for a in ages}, key=_bin_sort_key)
    dx_counts = Counter(r.dx for r in records)
    loc_counts = Counter(r.localization for r in records)
    return StatsReport(
        n=n,
        gender_share=gender_share,
        age_mean=age_mean,
        age_mean_by_sex={k: float(np.mean(v)) for k, v in sorted(by_sex_ages.items())},
        age_histogram=age_histogram,
        dx=OrderedDict((dx, dx_counts[dx]) for dx in CLASSES if dx_counts[dx]),
        dx_by_sex=crosstab(lambda r: r.dx, lambda r: r.sex),
        dx_by_age=crosstab(lambda r: r.dx, age_group, age_order),
        localization=OrderedDict(loc_counts.most_common()),
        localization_by_sex=crosstab(lambda r: r.localization, lambda r: r.sex),
        localization_by_age=crosstab(lambda r: r.localization, age_group, age_order),
    )
