"""Classification metrics and the |M_TS| size distribution.

Metric values are kept as exact fractions so hand-computed oracles compare
exactly; they are converted to floats only when written out.
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from app.dataset.manifest import QualityLabel
from app.errors import EmptyClass, EmptyInput, EmptyMatrix, LengthMismatch

logger = logging.getLogger(__name__)

NUM_CLASSES = 3


@dataclass
class ConfusionMatrix:
    """counts[true][predicted]."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (NUM_CLASSES, NUM_CLASSES):
            raise ValueError(f"confusion matrix must be 3x3, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(preds: Sequence[int], truths: Sequence[int]) -> ConfusionMatrix:
    if len(preds) != len(truths):
        raise LengthMismatch(f"{len(preds)} predictions for {len(truths)} labels")
    if len(preds) == 0:
        raise EmptyInput("no predictions to tabulate")
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(counts, (np.asarray(truths, dtype=int), np.asarray(preds, dtype=int)), 1)
    return ConfusionMatrix(counts)


@dataclass
class Metrics:
    acc: Fraction
    precision: Tuple[Fraction, ...]
    recall: Tuple[Fraction, ...]
    f: Tuple[Fraction, ...]
    macro_p: Fraction
    macro_r: Fraction
    macro_f: Fraction

    def rows(self) -> List[Tuple[str, float]]:
        """(name, value) pairs in metrics.csv order."""
        out = [("acc", float(self.acc)), ("macro_p", float(self.macro_p)),
               ("macro_r", float(self.macro_r)), ("macro_f", float(self.macro_f))]
        for label in QualityLabel:
            out.append((f"p_{label.slug}", float(self.precision[label])))
            out.append((f"r_{label.slug}", float(self.recall[label])))
            out.append((f"f_{label.slug}", float(self.f[label])))
        return out


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def f_score(p: Fraction, r: Fraction) -> Fraction:
    return 2 * p * r / (p + r) if p + r > 0 else Fraction(0)


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Accuracy plus per-class and macro-averaged precision, recall and F.

    Classes with a zero denominator score 0 and still count in the macro mean.
    """
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix has no samples")
    counts = cm.counts
    diag = [int(counts[i, i]) for i in range(NUM_CLASSES)]
    precision = tuple(_ratio(diag[i], int(counts[:, i].sum())) for i in range(NUM_CLASSES))
    recall = tuple(_ratio(diag[i], int(counts[i, :].sum())) for i in range(NUM_CLASSES))
    f = tuple(f_score(p, r) for p, r in zip(precision, recall))
    return Metrics(
        acc=Fraction(sum(diag), cm.total),
        precision=precision,
        recall=recall,
        f=f,
        macro_p=sum(precision, Fraction(0)) / NUM_CLASSES,
        macro_r=sum(recall, Fraction(0)) / NUM_CLASSES,
        macro_f=sum(f, Fraction(0)) / NUM_CLASSES,
    )


def average_metrics(per_trial: Sequence[Metrics]) -> List[Tuple[str, float, float]]:
    """(name, mean, population std) of every metrics.csv row across trials."""
    if not per_trial:
        raise EmptyInput("no trials to average")
    names = [name for name, _ in per_trial[0].rows()]
    values = np.array([[value for _, value in m.rows()] for m in per_trial])
    return [
        (name, float(mean), float(std))
        for name, mean, std in zip(names, values.mean(axis=0), values.std(axis=0))
    ]


class MtsDistribution:
    """Per-class empirical distribution of vessel-mask sizes."""

    def __init__(self, sizes: Dict[QualityLabel, np.ndarray]):
        self._sizes = {QualityLabel(k): np.sort(np.asarray(v, dtype=np.int64)) for k, v in sizes.items()}

    @property
    def labels(self) -> List[QualityLabel]:
        return [label for label in QualityLabel if label in self._sizes]

    def sizes(self, label: QualityLabel) -> np.ndarray:
        label = QualityLabel(label)
        if label not in self._sizes or self._sizes[label].size == 0:
            raise EmptyClass(f"no samples of class {label.slug}")
        return self._sizes[label]

    def cdf(self, label: QualityLabel, t: float) -> float:
        """Fraction of the class with |M_TS| < t."""
        values = self.sizes(label)
        return int(np.searchsorted(values, t, side="left")) / values.size

    def quantile(self, label: QualityLabel, q: float) -> int:
        """Smallest integer t with cdf(label, t) >= q."""
        if not 0.0 <= q <= 1.0:
            raise ValueError(f"quantile level {q} outside [0, 1]")
        values = self.sizes(label)
        k = math.ceil(round(q * values.size, 9))
        if k == 0:
            return 0
        return int(values[k - 1]) + 1

    def table(self) -> List[Tuple[int, QualityLabel, float]]:
        """(t, class, cdf) at t = 0 and at every observed size + 1, per class."""
        points = {0}
        for values in self._sizes.values():
            points.update(int(v) + 1 for v in values)
        rows = []
        for label in self.labels:
            for t in sorted(points):
                rows.append((t, label, self.cdf(label, t)))
        return rows


def mts_cdf(mask_sizes: Iterable[Tuple[int, int]]) -> MtsDistribution:
    grouped: Dict[QualityLabel, List[int]] = {}
    for size, label in mask_sizes:
        if size < 0:
            raise ValueError(f"mask size {size} is negative")
        grouped.setdefault(QualityLabel(label), []).append(int(size))
    logger.debug(f"mask-size distribution over {sum(len(v) for v in grouped.values())} samples")
    return MtsDistribution({k: np.asarray(v) for k, v in grouped.items()})
