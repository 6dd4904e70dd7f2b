"""Confusion matrices, summary metrics and embedding export."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import MiNet
from .train import embed_all
from .wfdb_io import ARRHYTHMIA_CLASSES, MI_CLASSES


class EvalError(ValueError):
    pass


class ExportError(OSError):
    pass


def confusion_matrix(y_true, y_pred, n_classes):
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size and (y_true.min() < 0 or y_true.max() >= n_classes):
        raise EvalError(f"true label outside [0, {n_classes})")
    if y_pred.size and (y_pred.min() < 0 or y_pred.max() >= n_classes):
        raise EvalError(f"predicted label outside [0, {n_classes})")
    flat = np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes)
    return flat.reshape(n_classes, n_classes)


def _safe_ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


@dataclass(frozen=True)
class EvalReport:
    confusion: np.ndarray
    class_names: tuple

    @property
    def n_samples(self):
        return int(self.confusion.sum())

    @property
    def precision(self):
        return _safe_ratio(np.diag(self.confusion), self.confusion.sum(axis=0))

    @property
    def recall(self):
        return _safe_ratio(np.diag(self.confusion), self.confusion.sum(axis=1))

    @property
    def accuracy(self):
        """Overall accuracy: trace / total."""
        return float(np.trace(self.confusion) / self.n_samples) if self.n_samples else 0.0

    @property
    def macro_precision(self):
        return float(self.precision.mean())

    @property
    def macro_recall(self):
        return float(self.recall.mean())

    def normalized(self):
        """Row-normalized confusion (fractions of each true class)."""
        return _safe_ratio(self.confusion, self.confusion.sum(axis=1, keepdims=True))

    def to_text(self):
        names = [str(n) for n in self.class_names]
        width = max(8, *(len(n) + 2 for n in names))
        lines = ["confusion (rows = true, columns = predicted; row fraction in brackets)"]
        lines.append(" " * width + "".join(f"{n:>{width + 8}}" for n in names) + f"{'total':>{width}}")
        norm = self.normalized()
        for i, name in enumerate(names):
            cells = "".join(f"{self.confusion[i, j]:>{width}d} [{norm[i, j]:.2f}]" for j in range(len(names)))
            lines.append(f"{name:<{width}}{cells}{self.confusion[i].sum():>{width}d}")
        lines.append("")
        lines.append(f"{'class':<{width}}{'precision':>12}{'recall':>12}")
        for i, name in enumerate(names):
            lines.append(f"{name:<{width}}{self.precision[i]:>12.4f}{self.recall[i]:>12.4f}")
        lines.append("")
        lines.append(f"samples          {self.n_samples}")
        lines.append(f"accuracy         {self.accuracy:.4f}")
        lines.append(f"macro precision  {self.macro_precision:.4f}")
        lines.append(f"macro recall     {self.macro_recall:.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\predicted", *self.class_names, "precision", "recall"])
            for i, name in enumerate(self.class_names):
                w.writerow([name, *map(int, self.confusion[i]),
                            repr(float(self.precision[i])), repr(float(self.recall[i]))])
            w.writerow([])
            w.writerow(["n_samples", self.n_samples])
            w.writerow(["accuracy", repr(self.accuracy)])
            w.writerow(["macro_precision", repr(self.macro_precision)])
            w.writerow(["macro_recall", repr(self.macro_recall)])


def evaluate(net, beats, class_names=None, batch_size=512):
    """Argmax predictions of ``net`` on labeled beats (ties go to the lowest class)."""
    n_classes = 2 if isinstance(net, MiNet) else net.config.n_classes
    if class_names is None:
        class_names = MI_CLASSES if isinstance(net, MiNet) else ARRHYTHMIA_CLASSES[:n_classes]
    labels = np.asarray(beats.labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise EvalError(f"labels fall outside the network's {n_classes} classes")
    preds = net.predict(beats.samples, batch_size=batch_size)
    return EvalReport(confusion_matrix(labels, preds, n_classes), tuple(class_names))


def report_mi_metrics(report, positive=0):
    """(accuracy, precision, recall) with ``positive`` (MI) as the positive class."""
    if report.confusion.shape != (2, 2):
        raise EvalError("MI metrics need a two-class report")
    return report.accuracy, float(report.precision[positive]), float(report.recall[positive])


def export_embeddings(net, beats, path, batch_size=512):
    """One CSV row per beat: the 64 embedding values then the label."""
    backbone = net.backbone if isinstance(net, MiNet) else net
    emb = embed_all(backbone, beats.samples, batch_size)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for row, label in zip(emb, beats.labels):
                w.writerow([*(f"{v:.9g}" for v in row), int(label)])
    except OSError as exc:
        raise ExportError(f"cannot write embeddings to {path}: {exc}") from exc
    return emb
