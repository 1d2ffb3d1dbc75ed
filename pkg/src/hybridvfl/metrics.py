"""Confusion matrix and macro-averaged classification metrics.

Undefined per-class precision or recall (zero denominator) counts as 0 in
the macro mean and is flagged in ``per_class``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricsValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[t, p]``: samples of true class t predicted as p."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(y_true, y_pred, num_classes: int) -> ConfusionMatrix:
    t = np.asarray(y_true, dtype=np.int64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise MetricsValidationError(f"{t.size} true labels but {p.size} predictions")
    for name, arr in (("true", t), ("predicted", p)):
        bad = arr[(arr < 0) | (arr >= num_classes)]
        if bad.size:
            raise MetricsValidationError(f"{name} class index {int(bad[0])} outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    precision_defined: bool = True
    recall_defined: bool = True


@dataclass(frozen=True)
class MetricsReport:
    macro_f1: float
    macro_precision: float
    macro_recall: float
    accuracy: float
    balanced_accuracy: float
    per_class: list[ClassMetrics] = field(default_factory=list)

    def to_record(self) -> dict[str, str]:
        rec = {
            "macro_f1": repr(self.macro_f1),
            "macro_precision": repr(self.macro_precision),
            "macro_recall": repr(self.macro_recall),
            "accuracy": repr(self.accuracy),
            "balanced_accuracy": repr(self.balanced_accuracy),
        }
        for k, c in enumerate(self.per_class):
            rec[f"class{k}.precision"] = repr(c.precision)
            rec[f"class{k}.recall"] = repr(c.recall)
            rec[f"class{k}.f1"] = repr(c.f1)
            rec[f"class{k}.support"] = str(c.support)
            if not (c.precision_defined and c.recall_defined):
                rec[f"class{k}.undefined"] = ",".join(
                    name for name, ok in (("precision", c.precision_defined), ("recall", c.recall_defined)) if not ok
                )
        return rec


def macro_metrics(cm: ConfusionMatrix) -> MetricsReport:
    counts = cm.counts.astype(np.float64)
    k = counts.shape[0]
    if k < 2:
        raise MetricsValidationError("macro metrics need at least two classes")
    total = counts.sum()
    if total == 0:
        raise MetricsValidationError("metrics are undefined on an empty confusion matrix")
    tp = np.diag(counts)
    pred_pos = counts.sum(axis=0)
    actual = counts.sum(axis=1)
    per_class = []
    for c in range(k):
        p_ok, r_ok = pred_pos[c] > 0, actual[c] > 0
        prec = tp[c] / pred_pos[c] if p_ok else 0.0
        rec = tp[c] / actual[c] if r_ok else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        per_class.append(ClassMetrics(float(prec), float(rec), float(f1), int(actual[c]), bool(p_ok), bool(r_ok)))
    macro_recall = float(np.mean([c.recall for c in per_class]))
    return MetricsReport(
        macro_f1=float(np.mean([c.f1 for c in per_class])),
        macro_precision=float(np.mean([c.precision for c in per_class])),
        macro_recall=macro_recall,
        accuracy=float(tp.sum() / total),
        balanced_accuracy=macro_recall,
        per_class=per_class,
    )


def evaluate(y_true, y_pred, num_classes: int) -> MetricsReport:
    return macro_metrics(confusion(y_true, y_pred, num_classes))


def write_record(path, record: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(record):
            fh.write(f"{key}={record[key]}\n")


def read_record(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                out[key] = value
    return out
