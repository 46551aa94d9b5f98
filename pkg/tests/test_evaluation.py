import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgnet.dataio import Sample
from cgnet.evaluation import (ConfusionMatrix, Metrics, category_miou, collapse, evaluate, metrics_from_cm, miou,
                              pixel_accuracy, predict)


def test_cm_hand_count():
    cm = ConfusionMatrix(2)
    cm.accumulate(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]))
    assert cm.counts.tolist() == [[1, 1], [0, 2]]


def test_cm_diagonal_and_ignore():
    cm = ConfusionMatrix(3)
    gt = np.random.default_rng(0).integers(0, 3, (5, 5))
    cm.accumulate(gt, gt)
    assert np.array_equal(cm.counts, np.diag(np.bincount(gt.ravel(), minlength=3)))
    before = cm.counts.copy()
    cm.accumulate(gt, np.full((5, 5), 255))
    assert np.array_equal(cm.counts, before)


def test_cm_errors():
    cm = ConfusionMatrix(2)
    with pytest.raises(ValueError):
        cm.accumulate(np.array([2]), np.array([0]))
    with pytest.raises(ValueError):
        cm.accumulate(np.array([0]), np.array([3]))
    with pytest.raises(ValueError):
        cm.accumulate(np.array([0, 1]), np.array([0]))


def test_miou_formula():
    per, mean = miou(np.array([[1, 1], [0, 2]]))
    assert per[0] == 0.5 and per[1] == pytest.approx(2 / 3)
    assert mean == pytest.approx(0.5833, abs=1e-4)
    per, mean = miou(np.diag([3, 4, 5]))
    assert per.tolist() == [1, 1, 1] and mean == 1.0


def test_absent_class_excluded():
    per, mean = miou(np.array([[1, 1, 0], [0, 2, 0], [0, 0, 0]]))
    assert math.isnan(per[2])
    assert mean == pytest.approx((0.5 + 2 / 3) / 2)


def test_all_undefined_raises():
    with pytest.raises(ValueError):
        miou(np.zeros((3, 3), int))
    with pytest.raises(ValueError):
        pixel_accuracy(np.zeros((3, 3), int))


def _recount(gt, pred, mapping, n_cat):
    cm = np.zeros((n_cat, n_cat), int)
    for t, p in zip(gt.ravel(), pred.ravel()):
        cm[mapping[t], mapping[p]] += 1
    return cm


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_collapse_matches_recount(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 4, 60)
    pred = rng.integers(0, 4, 60)
    mapping = {0: 0, 1: 0, 2: 1, 3: 1}
    cm = ConfusionMatrix(4)
    cm.accumulate(pred, gt)
    assert np.array_equal(collapse(cm, mapping), _recount(gt, pred, mapping, 2))


def test_identity_map_and_single_category():
    rng = np.random.default_rng(3)
    c = rng.integers(0, 20, (4, 4))
    assert category_miou(c, {i: i for i in range(4)}) == miou(c)[1]
    assert category_miou(c, {i: 7 for i in range(4)}) == 1.0
    with pytest.raises(ValueError, match="class 3"):
        collapse(c, {0: 0, 1: 0, 2: 1})


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    c = rng.integers(0, 10, (5, 5))
    perm = rng.permutation(5)
    assert miou(c[np.ix_(perm, perm)])[1] == pytest.approx(miou(c)[1], rel=1e-12)


def test_metrics_text_and_csv():
    m = metrics_from_cm(np.array([[1, 1, 0], [0, 2, 0], [0, 0, 0]]), {0: 0, 1: 1, 2: 1})
    text = m.to_text()
    assert "class 2 nan" in text and "mIoU 0.583333" in text and "pixel_acc 0.750000" in text
    rows = list(csv.DictReader(io.StringIO(m.to_csv())))
    assert rows[0] == {"metric": "iou", "class": "0", "value": "0.500000"}
    assert {r["metric"] for r in rows} == {"iou", "miou", "miou_cat", "pixel_acc"}
    plain = metrics_from_cm(np.eye(2, dtype=int))
    assert "mIoU_cat n/a" in plain.to_text()


class _Cfg:
    num_classes = 4


class OneHotModel:
    """Returns scores that put all mass on a fixed label map; records the input it saw."""

    cfg = _Cfg()
    dtype = np.float64

    def __init__(self, labels):
        self.labels = labels
        self.seen = None

    def forward(self, x, train=False):
        assert not train
        self.seen = x
        out = np.zeros((1, 4, *x.shape[2:]))
        h, w = self.labels.shape
        out[0, 0] = 1
        out[0, 0, :h, :w] = 0
        for k in range(4):
            out[0, k, :h, :w] += self.labels == k
        return out


def test_predict_pads_and_crops():
    labels = np.random.default_rng(0).integers(0, 4, (13, 10))
    model = OneHotModel(labels)
    image = np.full((3, 13, 10), 100.0)
    pred = predict(model, image, means=(100.0, 90.0, 80.0))
    assert model.seen.shape == (1, 3, 16, 16)
    assert (model.seen[0, :, 13:, :] == 0).all() and model.seen[0, 1, 0, 0] == 10
    assert np.array_equal(pred, labels)


def test_evaluate_on_ground_truth_is_perfect():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 4, (16, 16))
    s = Sample(np.zeros((3, 16, 16), np.float32), labels.astype(np.int32))
    m = evaluate(OneHotModel(labels), [s])
    assert m.miou == 1.0 and m.pixel_acc == 1.0


def test_constant_predictor():
    labels = np.repeat(np.arange(4), 16).reshape(8, 8)
    s = Sample(np.zeros((3, 8, 8), np.float32), labels.astype(np.int32))
    m = evaluate(OneHotModel(np.zeros((8, 8), int)), [s])
    # class 0: 16 / 64, classes 1..3: IoU 0
    assert m.miou == pytest.approx(0.25 / 4)
    assert m.per_class[0] == 0.25 and m.pixel_acc == 0.25


def test_metrics_dataclass_fields():
    assert isinstance(metrics_from_cm(np.eye(3, dtype=int)), Metrics)
