"""
Accuracy, recall and the comparison table
=========================================

Builds a confusion matrix with a melanoma row of 24 hits out of 41 and
prints the text report next to the reference rows.
"""

import numpy as np

from vitderm.data import CLASSES
from vitderm.evaluation import MEL, confusion_matrix, recall, recall_percent, report, report_csv

rng = np.random.default_rng(0)
labels, preds = [], []
for c in range(len(CLASSES)):
    n = 41 if c == MEL else int(rng.integers(10, 60))
    hits = 24 if c == MEL else int(rng.integers(n // 2, n))
    labels += [c] * n
    preds += [c] * hits + list(rng.choice([k for k in range(7) if k != c], size=n - hits))

cm = confusion_matrix(preds, labels)
print(f"melanoma recall {recall(cm, MEL):.6f} -> {recall_percent(cm, MEL)}")
print(report(cm, model_name="demo"))
print(report_csv(cm))
