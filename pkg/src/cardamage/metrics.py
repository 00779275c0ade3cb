"""Confusion matrices and accuracy / macro precision / macro recall reports."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns are predicted classes."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    confusion: ConfusionMatrix

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "confusion": self.confusion.counts.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def confusion(preds, labels, num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions but {len(labels)} labels")
    for name, v in (("prediction", preds), ("label", labels)):
        bad = (v < 0) | (v >= num_classes)
        if bad.any():
            raise ValueError(f"{name} {int(v[bad][0])} outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def _safe_div(num: np.ndarray, den: np.ndarray, empty: float) -> np.ndarray:
    out = np.full(num.shape, float(empty))
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def per_class(cm: ConfusionMatrix, empty: float = 0.0):
    """Per-class precision and recall as fractions; ``empty`` fills 0/0 cases."""
    c = cm.counts.astype(np.float64)
    diag = np.diag(c)
    return _safe_div(diag, c.sum(axis=0), empty), _safe_div(diag, c.sum(axis=1), empty)


def metrics(cm: ConfusionMatrix, empty: float = 0.0, decimals: int | None = 2) -> Metrics:
    """Accuracy and macro-averaged precision/recall, as percentages.

    A class whose predicted column (precision) or true row (recall) is empty
    scores ``empty``. Values are rounded to ``decimals`` places (None keeps
    full precision).
    """
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    prec, rec = per_class(cm, empty)
    vals = [100.0 * np.trace(cm.counts) / total, 100.0 * prec.mean(), 100.0 * rec.mean()]
    if decimals is not None:
        vals = [round(float(v), decimals) for v in vals]
    return Metrics(*(float(v) for v in vals), cm)


def report_table(rows: dict[str, Metrics]) -> str:
    """Text table with one ``Acc Prec Recall`` row per method."""
    width = max([len("Method")] + [len(k) for k in rows])
    lines = [f"{'Method':<{width}}  {'Acc':>7}  {'Prec':>7}  {'Recall':>7}"]
    for name, m in rows.items():
        lines.append(f"{name:<{width}}  {m.accuracy:7.2f}  {m.precision:7.2f}  {m.recall:7.2f}")
    return "\n".join(lines) + "\n"
