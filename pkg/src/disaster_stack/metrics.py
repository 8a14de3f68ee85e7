"""Confusion matrices, per-class classification reports and F1 comparisons.

Ratios are computed from Python integers so every metric is the correctly
rounded quotient of its counts. Rounding to two decimals happens only when a
report is rendered as text.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .labels import NUM_CLASSES, ClassLabel


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (4, 4) int64, rows = truth, columns = prediction

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.shape != (NUM_CLASSES, NUM_CLASSES):
            raise DataError(f"confusion matrix must be {NUM_CLASSES}x{NUM_CLASSES}, got {c.shape}")
        if not np.issubdtype(c.dtype, np.integer):
            raise DataError("confusion matrix entries must be integers")
        if (c < 0).any():
            raise DataError("confusion matrix entries must be non-negative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def supports(self) -> list[int]:
        return [int(v) for v in self.counts.sum(axis=1)]

    @property
    def trace(self) -> int:
        return int(np.trace(self.counts))


def confusion_matrix(truths, preds) -> ConfusionMatrix:
    truths = [int(ClassLabel.parse(t)) for t in truths]
    preds = [int(ClassLabel.parse(p)) for p in preds]
    if len(truths) != len(preds):
        raise DataError(f"{len(truths)} truths but {len(preds)} predictions")
    if not truths:
        raise DataError("confusion matrix needs at least one sample")
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(counts, (np.asarray(truths), np.asarray(preds)), 1)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class ClassMetrics:
    label: ClassLabel
    precision: float
    recall: float
    f1: float
    support: int
    undefined: tuple = ()  # names of metrics forced to 0 by a zero denominator


@dataclass(frozen=True)
class ClassificationReport:
    model: str
    classes: tuple  # ClassMetrics in class-code order
    accuracy: float
    confusion: ConfusionMatrix | None = field(default=None, compare=False)

    def by_label(self, label) -> ClassMetrics:
        return self.classes[int(ClassLabel.parse(label))]


def _ratio(num: int, den: int):
    return (num / den, False) if den > 0 else (0.0, True)


def classification_report(cm: ConfusionMatrix, model: str = "model") -> ClassificationReport:
    total = cm.total
    if total == 0:
        raise DataError("cannot report on an empty confusion matrix")
    rows = cm.counts.sum(axis=1)
    cols = cm.counts.sum(axis=0)
    classes = []
    for label in ClassLabel:
        j = int(label)
        tp = int(cm.counts[j, j])
        precision, p_undef = _ratio(tp, int(cols[j]))
        recall, r_undef = _ratio(tp, int(rows[j]))
        if precision + recall > 0:
            f1, f_undef = 2 * precision * recall / (precision + recall), False
        else:
            f1, f_undef = 0.0, True
        undefined = tuple(
            name for name, flag in (("precision", p_undef), ("recall", r_undef), ("f1", f_undef))
            if flag
        )
        classes.append(ClassMetrics(label, precision, recall, f1, int(rows[j]), undefined))
    return ClassificationReport(model, tuple(classes), cm.trace / total, cm)


def micro_averages(cm: ConfusionMatrix):
    """``(precision, recall)`` pooled over classes; both equal accuracy."""
    tp = cm.trace
    fp = int(cm.counts.sum(axis=0).sum()) - tp
    fn = int(cm.counts.sum(axis=1).sum()) - tp
    return tp / (tp + fp), tp / (tp + fn)


# ------------------------------------------------------------------ exports


def f1_comparison(reports):
    """``(header, rows)`` with one row per class and one F1 column per report."""
    reports = list(reports)
    header = ["class"] + [r.model for r in reports]
    rows = [[label.folder] + [r.classes[int(label)].f1 for r in reports] for label in ClassLabel]
    return header, rows


def compare_f1(reports) -> str:
    """Plot-ready CSV text: ``class,<model1>,<model2>,...``."""
    header, rows = f1_comparison(reports)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return buf.getvalue()


def render_report(report: ClassificationReport) -> str:
    """Fixed-width table: class rows, metric columns, accuracy on the first row."""
    head = f"{'Model':<24}{'Class':<12}{'Precision':>10}{'Recall':>8}{'F1 Score':>10}{'Support':>9}{'Accuracy':>10}"
    lines = [head, "-" * len(head)]
    for i, m in enumerate(report.classes):
        name = report.model if i == 0 else ""
        acc = f"{report.accuracy:.2f}" if i == 0 else ""
        lines.append(
            f"{name:<24}{m.label.folder:<12}{m.precision:>10.2f}{m.recall:>8.2f}"
            f"{m.f1:>10.2f}{m.support:>9d}{acc:>10}"
        )
    return "\n".join(lines) + "\n"


def report_to_dict(report: ClassificationReport) -> dict:
    return {
        "model": report.model,
        "classes": [
            {
                "label": m.label.folder,
                "precision": m.precision,
                "recall": m.recall,
                "f1": m.f1,
                "support": m.support,
                "undefined": list(m.undefined),
            }
            for m in report.classes
        ],
        "accuracy": report.accuracy,
    }


def report_to_json(report: ClassificationReport) -> str:
    return json.dumps(report_to_dict(report), indent=2) + "\n"


def report_from_json(text: str) -> ClassificationReport:
    try:
        doc = json.loads(text)
        classes = tuple(
            ClassMetrics(
                ClassLabel.parse(c["label"]),
                float(c["precision"]),
                float(c["recall"]),
                float(c["f1"]),
                int(c["support"]),
                tuple(c.get("undefined", ())),
            )
            for c in doc["classes"]
        )
        report = ClassificationReport(str(doc["model"]), classes, float(doc["accuracy"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed report document: {exc}") from exc
    if [int(m.label) for m in classes] != list(range(NUM_CLASSES)):
        raise DataError("report classes must list every class once in code order")
    return report


def confusion_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["truth\\pred"] + [label.folder for label in ClassLabel])
    for label in ClassLabel:
        w.writerow([label.folder] + [int(v) for v in cm.counts[int(label)]])
    return buf.getvalue()


def predictions_csv(items) -> str:
    """``items``: (identifier, truth, prediction) triples."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "truth", "prediction"])
    for ident, truth, pred in items:
        w.writerow([ident, ClassLabel.parse(truth).folder, ClassLabel.parse(pred).folder])
    return buf.getvalue()


def read_predictions_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["id", "truth", "prediction"]:
        raise DataError(f"{path} is not a predictions file")
    return [(r[0], ClassLabel.parse(r[1]), ClassLabel.parse(r[2])) for r in rows[1:]]
