import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stagedvit import AggregateStat, ConfusionCounts, MetricsReport, accumulate, aggregate, miou


def brute_force_report(pred, truth, count_unknown=True):
    """Python-loop oracle: confusion, accuracy, IoU computed pixel by pixel."""
    m = [[0] * 3 for _ in range(3)]
    for t, p in zip(truth.ravel().tolist(), pred.ravel().tolist()):
        m[t][p] += 1
    total = sum(sum(row) for row in m)
    if count_unknown:
        acc = sum(m[c][c] for c in range(3)) / total
    else:
        kept = sum(sum(m[t]) for t in (0, 1))
        acc = (m[0][0] + m[1][1]) / kept
    ious = []
    for c in range(3):
        tp = m[c][c]
        fn = sum(m[c]) - tp
        fp = sum(m[t][c] for t in range(3)) - tp
        denom = tp + fp + fn
        ious.append(None if denom == 0 else 100.0 * tp / denom)
    included = [v for v in ious if v is not None]
    return 100.0 * acc, ious, sum(included) / len(included)


def test_worked_2x2_example():
    """Fully hand-checked case with one class absent from truth and prediction."""
    truth = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    report = miou(accumulate(pred, truth))
    # 3 of 4 pixels correct
    assert report.accuracy == 75.0
    # fg: TP=1, FN=1, FP=0 -> 1/2; bg: TP=2, FN=0, FP=1 -> 2/3; unknown absent
    assert report.per_class_iou[0] == pytest.approx(50.0, abs=1e-12)
    assert report.per_class_iou[1] == pytest.approx(100.0 * 2 / 3, abs=1e-12)
    assert report.per_class_iou[2] is None
    assert report.excluded_classes == ("unknown",)
    assert report.miou == pytest.approx(100.0 * (1 / 2 + 2 / 3) / 2, abs=1e-12)
    assert report.n_pixels == 4


@given(
    shape=st.tuples(st.integers(1, 6), st.integers(1, 6)),
    seed=st.integers(0, 10_000),
    count_unknown=st.booleans(),
)
def test_miou_matches_pixel_loop_oracle(shape, seed, count_unknown):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 3, size=shape)
    truth = rng.integers(0, 3, size=shape)
    if not count_unknown and not (truth < 2).any():
        truth[0, 0] = 0
    want_acc, want_ious, want_miou = brute_force_report(pred, truth, count_unknown)
    report = miou(accumulate(pred, truth), count_unknown_in_accuracy=count_unknown)
    assert report.accuracy == pytest.approx(want_acc, abs=1e-12)
    assert report.miou == pytest.approx(want_miou, abs=1e-12)
    for got, want in zip(report.per_class_iou, want_ious):
        if want is None:
            assert got is None
        else:
            assert got == pytest.approx(want, abs=1e-12)


def test_accumulate_is_associative():
    rng = np.random.default_rng(3)
    a_p, a_t = rng.integers(0, 3, (4, 4)), rng.integers(0, 3, (4, 4))
    b_p, b_t = rng.integers(0, 3, (2, 8)), rng.integers(0, 3, (2, 8))
    split = accumulate(b_p, b_t, accumulate(a_p, a_t))
    joint = accumulate(
        np.concatenate([a_p.ravel(), b_p.ravel()]),
        np.concatenate([a_t.ravel(), b_t.ravel()]),
    )
    assert (split.counts == joint.counts).all()
    assert split.total == 32


def test_confusion_merge():
    a = accumulate(np.array([0, 1]), np.array([0, 0]))
    b = accumulate(np.array([2, 2]), np.array([2, 1]))
    merged = a.merge(b)
    assert merged.total == 4
    assert merged.counts[0, 0] == 1 and merged.counts[0, 1] == 1
    assert merged.counts[2, 2] == 1 and merged.counts[1, 2] == 1
    # merge leaves the operands untouched
    assert a.total == 2 and b.total == 2


def test_accuracy_unknown_toggle():
    # truth row: fg fg unknown; predictions: fg bg fg
    truth = np.array([0, 0, 2])
    pred = np.array([0, 1, 0])
    counts = accumulate(pred, truth)
    assert miou(counts).accuracy == pytest.approx(100.0 / 3)
    assert miou(counts, count_unknown_in_accuracy=False).accuracy == pytest.approx(50.0)


def test_accumulate_validation():
    with pytest.raises(ValueError):
        accumulate(np.array([0, 3]), np.array([0, 0]))
    with pytest.raises(ValueError):
        accumulate(np.array([0, -1]), np.array([0, 0]))
    with pytest.raises(ValueError):
        accumulate(np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(ValueError):
        miou(ConfusionCounts())


def test_aggregate_known_values():
    stat = aggregate([70.0, 70.5, 71.0])
    assert stat.mean == pytest.approx(70.5, abs=1e-12)
    # sample std of {70, 70.5, 71} is 0.5; stderr = 0.5 / sqrt(3)
    assert stat.std == pytest.approx(0.5, abs=1e-12)
    assert stat.stderr == pytest.approx(0.5 / math.sqrt(3), abs=1e-12)
    assert stat.n == 3
    assert not stat.single_run
    assert stat.format(percent=True) == "70.50 ± 0.29%"
    assert stat.format() == "70.50 ± 0.29"


def test_aggregate_single_run():
    stat = aggregate([42.5])
    assert stat.mean == 42.5
    assert stat.stderr == 0.0 and stat.std == 0.0
    assert stat.single_run


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=2, max_size=12))
def test_aggregate_matches_textbook_formulas(values):
    stat = aggregate(values)
    n = len(values)
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    assert stat.mean == pytest.approx(mean, rel=1e-12, abs=1e-9)
    assert stat.std == pytest.approx(math.sqrt(var), rel=1e-9, abs=1e-9)
    assert stat.stderr == pytest.approx(math.sqrt(var / n), rel=1e-9, abs=1e-9)


def test_aggregate_empty_rejected():
    with pytest.raises(ValueError):
        aggregate([])


def test_report_as_row():
    report = MetricsReport(
        accuracy=90.0, miou=60.0, per_class_iou=(50.0, 70.0, None),
        per_class_precision=(55.0, 75.0, None), n_pixels=100,
        excluded_classes=("unknown",),
    )
    row = report.as_row()
    assert row == {"accuracy": 90.0, "miou": 60.0, "iou_fg": 50.0, "iou_bg": 70.0, "iou_unknown": None}
