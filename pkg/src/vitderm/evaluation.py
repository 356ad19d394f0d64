"""Confusion matrix, accuracy and per-class recall, plus the comparison report.

Orientation is fixed: rows are the true class, columns the predicted class,
both in alphabetical diagnosis order (``data.CLASSES``).
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .data import CLASSES
from .errors import DataError, UndefinedRecallError

MEL = CLASSES.index("mel")

# accuracy / melanoma recall in percent, reported as constants
REFERENCE_ROWS: Dict[str, Tuple[float, float]] = {
    "DTC": (61.06, 24.78),
    "KNN": (65.45, 6.19),
    "ViT_B32": (74.73, 41.03),
    "ViT_B16": (81.88, 17.95),
    "CNN": (90.51, 57.57),
}


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray
    labels: Tuple[str, ...] = CLASSES

    def __post_init__(self):
        c = np.asarray(self.counts)
        k = len(self.labels)
        if c.shape != (k, k):
            raise DataError(f"confusion matrix must be {k}x{k}, got {c.shape}")
        if np.any(c < 0):
            raise DataError("confusion matrix entries must be nonnegative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self, class_id: int) -> int:
        return int(self.counts[class_id].sum())

    def to_grid(self) -> str:
        """One line per true class, space-separated integer counts."""
        return "\n".join(" ".join(str(int(v)) for v in row) for row in self.counts) + "\n"


def confusion_matrix(preds, labels, n_classes: int = len(CLASSES)) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise DataError(f"preds and labels differ in length ({len(preds)} vs {len(labels)})")
    for name, ids in (("prediction", preds), ("label", labels)):
        bad = ids[(ids < 0) | (ids >= n_classes)]
        if bad.size:
            raise DataError(f"{name} id {int(bad[0])} outside 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts, CLASSES if n_classes == len(CLASSES) else tuple(map(str, range(n_classes))))


def predict_classes(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=1)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise DataError("accuracy of an empty confusion matrix is undefined")
    return int(np.trace(cm.counts)) / cm.total


def recall(cm: ConfusionMatrix, class_id: int) -> float:
    row = cm.support(class_id)
    if row == 0:
        raise UndefinedRecallError(f"class {cm.labels[class_id]!r} has no actual positives")
    return int(cm.counts[class_id, class_id]) / row


def format_percent(value: Union[float, Fraction, None]) -> str:
    """``0.58536..`` -> ``"58.54%"``; two decimals, half-up; ``None`` -> ``"n/a"``."""
    if value is None:
        return "n/a"
    if isinstance(value, Fraction):
        d = Decimal(value.numerator) * 100 / Decimal(value.denominator)
    else:
        d = Decimal(float(value)) * 100
    return f"{d.quantize(Decimal('0.01'), rounding=ROUND_HALF_UP)}%"


def recall_percent(cm: ConfusionMatrix, class_id: int) -> str:
    row = cm.support(class_id)
    if row == 0:
        return "n/a"
    return format_percent(Fraction(int(cm.counts[class_id, class_id]), row))


def accuracy_percent(cm: ConfusionMatrix) -> str:
    accuracy(cm)  # raises on empty
    return format_percent(Fraction(int(np.trace(cm.counts)), cm.total))


def _pct(value: float) -> str:
    return f"{Decimal(repr(value)).quantize(Decimal('0.01'), rounding=ROUND_HALF_UP)}%"


def report(cm: ConfusionMatrix, extra_rows: Optional[Mapping[str, Tuple[float, float]]] = None,
           model_name: str = "measured", include_reference: bool = True) -> str:
    """Plain-text report: matrix grid with recall column, accuracy, comparison table.

    ``extra_rows`` values are (accuracy %, melanoma recall %) for other
    measured models.  Reference constants are appended and flagged.
    """
    labels = cm.labels
    width = max(7, max(len(str(v)) for v in cm.counts.ravel()) + 1, max(map(len, labels)) + 1)
    lines = ["Confusion matrix (rows = true class, columns = predicted class)"]
    lines.append("true\\pred".ljust(10) + "".join(l.rjust(width) for l in labels) + "support".rjust(9)
                 + "recall".rjust(10))
    for i, name in enumerate(labels):
        row = "".join(str(int(v)).rjust(width) for v in cm.counts[i])
        lines.append(name.ljust(10) + row + str(cm.support(i)).rjust(9) + recall_percent(cm, i).rjust(10))
    lines.append("")
    lines.append(f"Accuracy: {accuracy_percent(cm)} ({int(np.trace(cm.counts))}/{cm.total})")
    lines.append("")
    lines.append("Per-class recall:")
    for i, name in enumerate(labels):
        lines.append(f"  {name:<6} {recall_percent(cm, i)}")

    rows = [(model_name, accuracy_percent(cm), recall_percent(cm, MEL) if len(labels) > MEL else "n/a",
             "measured")]
    for name, (acc, rec) in (extra_rows or {}).items():
        rows.append((name, _pct(acc), _pct(rec), "measured"))
    if include_reference:
        for name, (acc, rec) in REFERENCE_ROWS.items():
            rows.append((name, _pct(acc), _pct(rec), "reference"))
    lines.append("")
    lines.append("Comparison:")
    name_w = max(len("Model"), *(len(r[0]) for r in rows)) + 2
    lines.append("Model".ljust(name_w) + "Accuracy".rjust(10) + "Mel recall".rjust(12) + "  Source")
    for name, acc, rec, src in rows:
        lines.append(name.ljust(name_w) + acc.rjust(10) + rec.rjust(12) + "  " + src)
    return "\n".join(lines) + "\n"


def report_csv(cm: ConfusionMatrix) -> str:
    """``label,support,recall`` per class, then an accuracy footer."""
    out = ["label,support,recall"]
    for i, name in enumerate(cm.labels):
        out.append(f"{name},{cm.support(i)},{recall_percent(cm, i)}")
    out.append(f"accuracy,{cm.total},{accuracy_percent(cm)}")
    return "\n".join(out) + "\n"


def write_reports(cm: ConfusionMatrix, out_dir, stem: str = "report", **kwargs) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"text": out / f"{stem}.txt", "csv": out / f"{stem}.csv", "grid": out / f"{stem}.confusion.txt"}
    paths["text"].write_text(report(cm, **kwargs), encoding="utf-8")
    paths["csv"].write_text(report_csv(cm), encoding="utf-8")
    paths["grid"].write_text(cm.to_grid(), encoding="utf-8")
    return paths
