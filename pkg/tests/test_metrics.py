import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from devo.metrics import Metrics, confusion_matrix, metrics_from_confusion, metrics_from_predictions


def hand_rolled(cm):
    """Plain-float per-class precision/recall/F1 from the textbook formulas."""
    k = len(cm)
    out = []
    for c in range(k):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(k)) - tp
        fn = sum(cm[c]) - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append((prec, rec, f1))
    return out


def test_perfect_predictions():
    m = metrics_from_predictions([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert m.macro_f1 == 1.0 and m.accuracy == 1.0
    assert m.zero_support == []


def test_known_matrix():
    cm = np.array([[5, 1, 0], [2, 3, 1], [0, 0, 4]])
    m = metrics_from_confusion(cm)
    # class 0: tp 5, fp 2, fn 1 -> F1 10/13
    assert m.per_class[0].f1 == 10 / 13
    assert m.per_class[1].precision == 3 / 4
    assert m.per_class[2].recall == 1.0
    assert m.accuracy == 12 / 16


def test_zero_support_class_flagged():
    m = metrics_from_predictions([0, 0, 1], [0, 0, 1], 3)
    assert m.zero_support == [2]
    assert m.per_class[2].f1 == 0.0
    assert m.macro_f1 == pytest.approx(2 / 3)


def test_confusion_orientation():
    cm = confusion_matrix([0, 0, 1], [1, 1, 1], 2)
    assert cm.tolist() == [[0, 2], [0, 1]]


def test_empty_matrix_rejected():
    with pytest.raises(ValueError):
        metrics_from_confusion(np.zeros((2, 2), dtype=int))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6).flatmap(
    lambda k: st.lists(st.lists(st.integers(0, 50), min_size=k, max_size=k), min_size=k, max_size=k)))
def test_matches_hand_rolled_oracle(cm):
    if sum(map(sum, cm)) == 0:
        cm[0][0] = 1
    m = metrics_from_confusion(np.array(cm))
    for got, (p, r, f) in zip(m.per_class, hand_rolled(cm)):
        assert got.precision == pytest.approx(p, rel=1e-12, abs=0)
        assert got.recall == pytest.approx(r, rel=1e-12, abs=0)
        assert got.f1 == pytest.approx(f, rel=1e-12, abs=0)
    assert m.macro_f1 == pytest.approx(sum(f for _, _, f in hand_rolled(cm)) / len(cm), rel=1e-12)


def test_dict_round_trip():
    m = metrics_from_predictions([0, 1, 1, 2], [0, 1, 2, 2], 4)
    back = Metrics.from_dict(m.to_dict())
    assert back.to_dict() == m.to_dict()
