from fractions import Fraction

import numpy as np
import pytest

from affuse.metrics import (MetricsReport, accuracy, confusion_matrix, macro_f1, per_class_f1,
                            summarize)


def oracle_from_labels(y_true, y_pred, classes=range(4)):
    """Exact per-class F1 by counting label pairs one at a time."""
    scores = []
    for c in classes:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        scores.append(Fraction(0) if 2 * tp + fp + fn == 0 else Fraction(2 * tp, 2 * tp + fp + fn))
    correct = sum(1 for t, p in zip(y_true, y_pred) if t == p)
    return scores, sum(scores) / len(scores), Fraction(correct, len(y_true))


def test_perfect():
    y = [0, 1, 2, 3, 3, 1]
    cm = confusion_matrix(y, y)
    assert macro_f1(cm) == 1.0 and accuracy(cm) == 1.0


def test_constant_predictor():
    y = [0, 1, 2, 3] * 10
    cm = confusion_matrix(y, [0] * 40)
    assert accuracy(cm) == 0.25
    assert abs(macro_f1(cm) - 0.1) < 1e-15  # F1 of class 0 is 0.4, others 0


def test_unused_classes_score_zero():
    cm = np.zeros((4, 4), dtype=int)
    cm[0, 0] = cm[1, 1] = 5
    np.testing.assert_array_equal(per_class_f1(cm), [1, 1, 0, 0])
    assert macro_f1(cm) == 0.5


def test_empty_confusion():
    cm = np.zeros((4, 4), dtype=int)
    assert accuracy(cm) == 0.0 and macro_f1(cm) == 0.0


def test_random_matrices_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        y_true = rng.integers(0, 4, size=n).tolist()
        y_pred = rng.integers(0, 4, size=n).tolist()
        cm = confusion_matrix(y_true, y_pred)
        f1s, mac, acc = oracle_from_labels(y_true, y_pred)
        got = per_class_f1(cm)
        for g, f in zip(got, f1s):
            assert abs(g - float(f)) <= 1e-15
        assert abs(macro_f1(cm) - float(mac)) <= 1e-15
        assert abs(accuracy(cm) - float(acc)) <= 1e-15


def test_against_sklearn():
    skm = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(1)
    for _ in range(50):
        y_true, y_pred = rng.integers(0, 4, size=30), rng.integers(0, 4, size=30)
        cm = confusion_matrix(y_true, y_pred)
        ref = skm.f1_score(y_true, y_pred, labels=[0, 1, 2, 3], average="macro", zero_division=0)
        assert abs(macro_f1(cm) - ref) < 1e-12


def test_report_row():
    r = MetricsReport.from_predictions([0, 1, 2, 3], [0, 1, 2, 2], fold_id=3, condition="clean")
    row = r.row()
    assert row["fold"] == 3 and row["accuracy"] == 0.75
    assert row["confusion"].split(";")[3] == "0,0,1,0"
    assert set(f"f1_sat{c}" for c in range(1, 5)) <= set(row)


def test_summarize_population_std():
    mean, std = summarize([1.0, 3.0])
    assert mean == 2.0 and std == 1.0
