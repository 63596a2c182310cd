import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctclip.errors import DataError
from ctclip.metrics import binary_scores, compute_metrics, confusion_matrix, report_from_confusion


def brute_counts(labels, preds, k):
    tp = fp = fn = 0
    for c in range(k):
        for y, p in zip(labels, preds):
            tp += (y == c and p == c)
            fp += (y != c and p == c)
            fn += (y == c and p != c)
    return tp, fp, fn


def test_hand_case_exact():
    assert binary_scores(8, 2, 2) == (0.8, 0.8, 0.8)


def test_hand_case_through_confusion():
    # class 0: 8 right, 2 predicted as 1; class 1 gets 2 false positives into 0
    cm = np.array([[8, 2], [2, 0]])
    rep = report_from_confusion(cm)
    assert rep.precision[0] == 0.8 and rep.recall[0] == 0.8
    assert rep.f1[0] == pytest.approx(0.8, abs=1e-15)


def test_micro_equals_accuracy_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(2, 8))
        n = int(rng.integers(1, 60))
        labels, preds = rng.integers(0, k, n), rng.integers(0, k, n)
        rep = compute_metrics(labels, preds, k)
        tp, fp, fn = brute_counts(labels, preds, k)
        acc = sum(int(y == p) for y, p in zip(labels, preds)) / n
        assert tp / (tp + fp) == pytest.approx(acc, abs=1e-12)
        assert rep.accuracy == pytest.approx(acc, abs=1e-12)
        for m in (rep.micro_precision, rep.micro_recall, rep.micro_f1):
            assert m == pytest.approx(acc, abs=1e-12)


def test_perfect_classifier():
    labels = np.repeat(np.arange(4), 3)
    rep = compute_metrics(labels, labels, 4)
    np.testing.assert_array_equal(rep.confusion, np.diag([3] * 4))
    for v in (rep.accuracy, rep.macro_precision, rep.macro_recall, rep.macro_f1, rep.micro_f1):
        assert v == 1.0


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=40))
def test_confusion_total_and_trace(pairs):
    labels, preds = zip(*pairs)
    cm = confusion_matrix(labels, preds, 5)
    assert cm.sum() == len(pairs)
    assert (cm >= 0).all()
    rep = report_from_confusion(cm)
    assert rep.accuracy == np.trace(cm) / cm.sum()


def test_zero_denominator_is_zero():
    rep = compute_metrics([0, 0], [0, 0], 3)
    assert rep.precision[1] == 0.0 and rep.recall[2] == 0.0 and rep.f1[1] == 0.0


def test_empty_set_rejected():
    with pytest.raises(DataError):
        compute_metrics([], [], 3)


def test_to_dict_structure():
    d = compute_metrics([0, 1, 1], [0, 1, 0], 2, ["a", "b"]).to_dict()
    assert d["confusion"] == [[1, 0], [1, 1]]
    assert set(d["macro"]) == {"precision", "recall", "f1"}
