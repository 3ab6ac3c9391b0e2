import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semcycle.segeval import MetricsReport, confusion_matrix


def brute_force(pairs, c):
    cm = [[0] * c for _ in range(c)]
    for pred, gt in pairs:
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            cm[g][p] += 1
    total = sum(map(sum, cm))
    correct = sum(cm[k][k] for k in range(c))
    ious = []
    for k in range(c):
        tp = cm[k][k]
        fp = sum(cm[r][k] for r in range(c)) - tp
        fn = sum(cm[k]) - tp
        ious.append(None if tp + fp + fn == 0 else tp / (tp + fp + fn))
    defined = [v for v in ious if v is not None]
    return np.array(cm), ious, sum(defined) / len(defined), correct / total


def report_for(pairs, c):
    cm = sum(confusion_matrix(g, p, c) for p, g in pairs)
    return MetricsReport.from_confusion(cm)


def test_perfect_prediction(rng):
    gt = rng.integers(0, 4, (10, 10))
    r = report_for([(gt, gt)], 4)
    assert r.miou == 1.0 and r.pixel_accuracy == 1.0
    assert (r.confusion == np.diag(np.diag(r.confusion))).all()


def test_half_and_half():
    gt = np.array([[0, 0, 1, 1]])
    r = report_for([(np.zeros_like(gt), gt)], 2)
    assert r.pixel_accuracy == 0.5
    assert r.per_class_iou == [0.5, 0.0]
    assert r.miou == 0.25


def test_absent_class_excluded():
    gt = np.array([[0, 1]])
    r = report_for([(gt, gt)], 3)
    assert r.per_class_iou[2] is None and r.miou == 1.0


def test_random_pairs_match_oracle(rng):
    pairs = [(rng.integers(0, 6, (32, 32)), rng.integers(0, 6, (32, 32))) for _ in range(50)]
    cm, ious, miou, acc = brute_force(pairs, 6)
    r = report_for(pairs, 6)
    assert np.array_equal(r.confusion, cm)
    assert r.per_class_iou == ious
    assert r.miou == miou and r.pixel_accuracy == acc
    assert r.confusion.sum() == 50 * 32 * 32


def test_merge_associative(rng):
    pairs = [(rng.integers(0, 6, (32, 32)), rng.integers(0, 6, (32, 32))) for _ in range(9)]
    a, b, c = report_for(pairs[:3], 6), report_for(pairs[3:5], 6), report_for(pairs[5:], 6)
    left, right, whole = a.merge(b).merge(c), a.merge(b.merge(c)), report_for(pairs, 6)
    for r in (left, right):
        assert np.array_equal(r.confusion, whole.confusion)
        assert r.miou == whole.miou and r.pixel_accuracy == whole.pixel_accuracy


def test_out_of_range():
    with pytest.raises(ValueError):
        confusion_matrix(np.array([3]), np.array([0]), 3)


def test_empty_rejected():
    with pytest.raises(ValueError):
        MetricsReport.from_confusion(np.zeros((3, 3), np.int64))


def test_round_trip_dict(rng):
    r = report_for([(rng.integers(0, 3, (5, 5)), rng.integers(0, 3, (5, 5)))], 3)
    assert MetricsReport.from_dict(r.to_dict()).to_dict() == r.to_dict()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 7))
def test_permutation_equivariance_and_bounds(seed, c):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, c, (6, 7))
    pred = np.where(rng.random((6, 7)) < 0.6, gt, rng.integers(0, c, (6, 7)))
    perm = rng.permutation(c)
    a = report_for([(pred, gt)], c)
    b = report_for([(perm[pred], perm[gt])], c)
    assert np.array_equal(b.confusion[np.ix_(perm, perm)], a.confusion)
    assert b.pixel_accuracy == a.pixel_accuracy
    assert b.miou == pytest.approx(a.miou, abs=1e-12)
    cm = a.confusion
    for k, iou in enumerate(a.per_class_iou):
        if iou is None:
            continue
        tp = cm[k, k]
        if cm[k].sum():
            assert iou <= tp / cm[k].sum() + 1e-12
        if cm[:, k].sum():
            assert iou <= tp / cm[:, k].sum() + 1e-12
        assert 0 <= iou <= 1
