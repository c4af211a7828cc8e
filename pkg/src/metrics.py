#!/usr/bin/env python3
"""
Classification quality: confusion matrices, OA / AA / Kappa, and reports.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class MetricsError(Exception):
    """Exception raised when metrics are undefined for a confusion matrix."""
    pass


class Metrics(NamedTuple):
    oa: float
    aa: float
    kappa: float


@dataclass
class ConfusionMatrix:
    """Counts [P_cls, P_cls]: rows are true classes, columns predicted classes (both 1-based ids)."""

    counts: np.ndarray

    @classmethod
    def empty(cls, classes: int) -> 'ConfusionMatrix':
        return cls(np.zeros((classes, classes), dtype=np.int64))

    @classmethod
    def from_labels(cls, truth: np.ndarray, predicted: np.ndarray, classes: int) -> 'ConfusionMatrix':
        truth = np.asarray(truth, dtype=np.int64)
        predicted = np.asarray(predicted, dtype=np.int64)
        if truth.shape != predicted.shape:
            raise MetricsError(f"{truth.size} true labels but {predicted.size} predictions")
        for name, values in (('true', truth), ('predicted', predicted)):
            if values.size and (values.min() < 1 or values.max() > classes):
                raise MetricsError(f"{name} labels must lie in 1..{classes}")
        counts = np.zeros((classes, classes), dtype=np.int64)
        np.add.at(counts, (truth - 1, predicted - 1), 1)
        return cls(counts)

    def __add__(self, other: 'ConfusionMatrix') -> 'ConfusionMatrix':
        if self.counts.shape != other.counts.shape:
            raise MetricsError(f"cannot merge {self.counts.shape} and {other.counts.shape} confusion matrices")
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def recalls(self) -> List[Optional[float]]:
        """Per-class recall, None for classes with no true samples."""
        result = []
        for k in range(self.classes):
            row = int(self.counts[k].sum())
            result.append(float(Fraction(int(self.counts[k, k]), row)) if row else None)
        return result


def metrics(cm: ConfusionMatrix, skip_empty_rows: bool = False) -> Metrics:
    """
    Overall accuracy, average per-class recall and Cohen's kappa.

    Ratios are formed from exact integer fractions and rounded once.

    Args:
        cm: Confusion matrix
        skip_empty_rows: Average recall only over classes with true samples
            instead of failing

    Raises:
        MetricsError: If the matrix is empty, or a class has no true samples
            and skip_empty_rows is False
    """
    counts = [[int(x) for x in row] for row in cm.counts]
    total = sum(sum(row) for row in counts)
    if total <= 0:
        raise MetricsError("confusion matrix is empty")
    classes = len(counts)

    row_sums = [sum(row) for row in counts]
    col_sums = [sum(counts[i][k] for i in range(classes)) for k in range(classes)]
    oa = Fraction(sum(counts[k][k] for k in range(classes)), total)

    recalls = []
    for k in range(classes):
        if row_sums[k] == 0:
            if not skip_empty_rows:
                raise MetricsError(f"class {k + 1} has no true samples, average accuracy is undefined")
            continue
        recalls.append(Fraction(counts[k][k], row_sums[k]))
    aa = sum(recalls, Fraction(0)) / len(recalls)

    p_e = Fraction(sum(row_sums[k] * col_sums[k] for k in range(classes)), total * total)
    kappa = Fraction(1) if p_e == 1 else (oa - p_e) / (1 - p_e)
    return Metrics(float(oa), float(aa), float(kappa))


def format_report(cm: ConfusionMatrix, title: str = 'Classification report',
                  class_names: Optional[Sequence[str]] = None, skip_empty_rows: bool = True) -> str:
    """
    Text table: one recall row per class, then OA / AA / Kappa in percent and the confusion matrix.
    """
    result = metrics(cm, skip_empty_rows=skip_empty_rows)
    names = list(class_names) if class_names else [f"Class {k + 1}" for k in range(cm.classes)]
    width = max(12, max(len(n) for n in names) + 2)
    lines = [title, '=' * (width + 30), f"{'Class':<{width}}{'Samples':>10}{'Accuracy (%)':>16}", '-' * (width + 30)]
    for name, recall, row in zip(names, cm.recalls(), cm.counts):
        value = f"{recall * 100:.2f}" if recall is not None else 'n/a'
        lines.append(f"{name:<{width}}{int(row.sum()):>10}{value:>16}")
    lines.append('-' * (width + 30))
    lines.append(f"{'OA (%)':<{width}}{'':>10}{result.oa * 100:>16.2f}")
    lines.append(f"{'AA (%)':<{width}}{'':>10}{result.aa * 100:>16.2f}")
    lines.append(f"{'Kappa (%)':<{width}}{'':>10}{result.kappa * 100:>16.2f}")
    lines.append('')
    lines.append('Confusion matrix (rows: true, columns: predicted)')
    for row in cm.counts:
        lines.append(' '.join(f"{int(x):>6}" for x in row))
    return '\n'.join(lines) + '\n'


def report_csv(cm: ConfusionMatrix, skip_empty_rows: bool = True) -> str:
    """Comma-separated companion of format_report (ratios as fractions, not percent)."""
    result = metrics(cm, skip_empty_rows=skip_empty_rows)
    lines = ['class,samples,correct,recall']
    for k, recall in enumerate(cm.recalls()):
        value = repr(recall) if recall is not None else ''
        lines.append(f"{k + 1},{int(cm.counts[k].sum())},{int(cm.counts[k, k])},{value}")
    lines.append(f"OA,{cm.total},{int(np.trace(cm.counts))},{result.oa!r}")
    lines.append(f"AA,,,{result.aa!r}")
    lines.append(f"Kappa,,,{result.kappa!r}")
    return '\n'.join(lines) + '\n'


def write_confusion_matrix(path: str, cm: ConfusionMatrix):
    np.savetxt(path, cm.counts, fmt='%d', delimiter=',')
