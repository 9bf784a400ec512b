"""
Tests for confusion matrices, accuracy / precision / recall / F and the
|M_TS| cumulative distribution.
"""

import os
from fractions import Fraction

import numpy as np
import pytest

from app.dataset.manifest import QualityLabel
from app.errors import EmptyClass, EmptyInput, EmptyMatrix, LengthMismatch
from app.evaluation.metrics import ConfusionMatrix, average_metrics, confusion, metrics, mts_cdf


def test_diagonal_confusion():
    cm = confusion([0, 1, 2], [0, 1, 2])
    np.testing.assert_array_equal(cm.counts, np.eye(3, dtype=int))


def test_off_diagonal_confusion():
    cm = confusion([1, 1], [0, 2])
    assert cm.counts[0, 1] == 1 and cm.counts[2, 1] == 1
    assert cm.total == 2


def test_column_sums_are_prediction_histogram():
    rng = np.random.default_rng(0)
    preds = rng.integers(0, 3, 1000)
    truths = rng.integers(0, 3, 1000)
    cm = confusion(preds, truths)
    np.testing.assert_array_equal(cm.counts.sum(axis=0), np.bincount(preds, minlength=3))
    np.testing.assert_array_equal(cm.counts.sum(axis=1), np.bincount(truths, minlength=3))


def test_confusion_errors():
    with pytest.raises(LengthMismatch):
        confusion([0, 1], [0])
    with pytest.raises(EmptyInput):
        confusion([], [])


def test_confusion_matrices_add():
    a = confusion([0, 1], [0, 0])
    b = confusion([2], [2])
    np.testing.assert_array_equal((a + b).counts, confusion([0, 1, 2], [0, 0, 2]).counts)


def test_perfect_predictions():
    m = metrics(confusion([0, 1, 2, 2], [0, 1, 2, 2]))
    assert m.acc == m.macro_p == m.macro_r == m.macro_f == 1
    assert m.precision == m.recall == m.f == (1, 1, 1)


def test_swapped_classes():
    m = metrics(ConfusionMatrix([[5, 0, 0], [0, 0, 5], [0, 5, 0]]))
    assert m.acc == Fraction(1, 3)
    assert m.precision == (1, 0, 0)
    assert m.recall == (1, 0, 0)
    assert m.macro_p == m.macro_r == m.macro_f == Fraction(1, 3)


def test_equal_precision_and_recall_give_same_f():
    m = metrics(ConfusionMatrix([[3, 1, 0], [1, 2, 0], [0, 0, 4]]))
    assert m.precision[0] == m.recall[0] == Fraction(3, 4)
    assert m.f[0] == Fraction(3, 4)


def test_average_over_trials():
    perfect = metrics(confusion([0, 1, 2], [0, 1, 2]))
    swapped = metrics(ConfusionMatrix([[5, 0, 0], [0, 0, 5], [0, 5, 0]]))
    summary = {name: (mean, std) for name, mean, std in average_metrics([perfect, swapped])}
    assert list(summary) == [name for name, _ in perfect.rows()]
    assert summary["acc"] == pytest.approx((2 / 3, 1 / 3))
    assert summary["r_good"] == (1.0, 0.0)
    with pytest.raises(EmptyInput):
        average_metrics([])


def test_empty_matrix():
    with pytest.raises(EmptyMatrix):
        metrics(ConfusionMatrix(np.zeros((3, 3))))


def _oracle(counts):
    """Textbook per-class P/R/F with exact fractions, macro means over 3 classes."""
    total = sum(sum(row) for row in counts)
    ps, rs, fs = [], [], []
    for i in range(3):
        col = sum(counts[t][i] for t in range(3))
        row = sum(counts[i])
        p = Fraction(counts[i][i], col) if col else Fraction(0)
        r = Fraction(counts[i][i], row) if row else Fraction(0)
        ps.append(p)
        rs.append(r)
        fs.append(2 * p * r / (p + r) if p + r else Fraction(0))
    acc = Fraction(sum(counts[i][i] for i in range(3)), total)
    return acc, ps, rs, fs, sum(ps) / 3, sum(rs) / 3, sum(fs) / 3


@pytest.mark.parametrize("seed", range(10))
def test_metrics_match_oracle(seed):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 12, (3, 3))
    if seed % 3 == 0:
        # an empty predicted column exercises the zero-denominator rule
        counts[:, 1] = 0
    counts[0, 0] += 1
    m = metrics(ConfusionMatrix(counts))
    acc, ps, rs, fs, mp, mr, mf = _oracle(counts.tolist())
    assert m.acc == acc
    assert list(m.precision) == ps
    assert list(m.recall) == rs
    assert list(m.f) == fs
    assert (m.macro_p, m.macro_r, m.macro_f) == (mp, mr, mf)
    assert min(m.f) <= m.macro_f <= max(m.f)


def test_metrics_ignore_pair_order():
    rng = np.random.default_rng(1)
    preds = rng.integers(0, 3, 50)
    truths = rng.integers(0, 3, 50)
    order = rng.permutation(50)
    assert metrics(confusion(preds, truths)) == metrics(confusion(preds[order], truths[order]))


def test_metric_rows_order():
    names = [name for name, _ in metrics(confusion([0, 1, 2], [0, 1, 2])).rows()]
    assert names[:4] == ["acc", "macro_p", "macro_r", "macro_f"]
    assert names[4:7] == ["p_good", "r_good", "f_good"]
    assert len(names) == 13


def test_cdf_arithmetic():
    dist = mts_cdf([(10, 0), (20, 0), (30, 0)])
    assert dist.cdf(QualityLabel.GOOD, 25) == pytest.approx(2 / 3)
    assert dist.cdf(QualityLabel.GOOD, 10) == 0.0
    assert dist.cdf(QualityLabel.GOOD, 31) == 1.0


def test_quantile_is_smallest_threshold():
    dist = mts_cdf([(10, 2), (20, 2), (30, 2)])
    assert dist.quantile(QualityLabel.REJECT, 0.5) == 21
    assert dist.cdf(QualityLabel.REJECT, 21) >= 0.5
    assert dist.cdf(QualityLabel.REJECT, 20) < 0.5
    assert dist.quantile(QualityLabel.REJECT, 1.0) == 31
    assert dist.quantile(QualityLabel.REJECT, 0.0) == 0


def test_cdf_is_monotone_and_bounded():
    rng = np.random.default_rng(2)
    pairs = [(int(s), int(l)) for s, l in zip(rng.integers(0, 3000, 200), rng.integers(0, 3, 200))]
    dist = mts_cdf(pairs)
    for label in dist.labels:
        values = [dist.cdf(label, t) for t in range(0, 3100, 50)]
        assert values == sorted(values)
        assert values[0] == 0.0 and values[-1] == 1.0


def test_table_covers_every_class_at_shared_thresholds():
    dist = mts_cdf([(5, 0), (9, 1), (9, 1)])
    table = dist.table()
    assert [(t, label) for t, label, _ in table] == [
        (0, QualityLabel.GOOD), (6, QualityLabel.GOOD), (10, QualityLabel.GOOD),
        (0, QualityLabel.USABLE), (6, QualityLabel.USABLE), (10, QualityLabel.USABLE),
    ]
    assert [value for _, _, value in table] == [0.0, 1.0, 1.0, 0.0, 0.0, 1.0]


def test_missing_class_is_an_error():
    dist = mts_cdf([(5, 0)])
    with pytest.raises(EmptyClass):
        dist.cdf(QualityLabel.REJECT, 10)


@pytest.mark.skipif(
    not (os.environ.get("EYEQ_MANIFEST") and os.environ.get("EYEQ_PREPROCESS_LOG")),
    reason="Eye-Quality manifest and preprocess log not supplied",
)
def test_eye_quality_mask_size_thresholds():
    from app.cli.commands import _distribution, read_preprocess_log
    from app.dataset.manifest import read_manifest

    records = [r for r in read_manifest(os.environ["EYEQ_MANIFEST"]) if r.split == "train"]
    dist = _distribution(records, read_preprocess_log(os.environ["EYEQ_PREPROCESS_LOG"]))
    assert dist.cdf(QualityLabel.REJECT, 1513) == pytest.approx(0.70, abs=0.05)
    assert dist.cdf(QualityLabel.USABLE, 1513) == pytest.approx(0.3182, abs=0.05)
    assert dist.cdf(QualityLabel.USABLE, 2160) == pytest.approx(0.70, abs=0.05)
    assert dist.cdf(QualityLabel.GOOD, 2160) == pytest.approx(0.2344, abs=0.05)
