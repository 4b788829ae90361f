from __future__ import annotations

import csv

import numpy as np
import pytest

from gzslroute.classify import (
    PREDICTION_COLUMNS, ClassifierHead, GzslPredictor, HeadConfig, predict_gzsl, predict_zsl,
    train_baseline_gzsl, train_head, write_predictions,
)
from gzslroute.dataset import FeatureDataset
from gzslroute.models import MlpSpec, Network


def linear_head(W, b, label_map) -> ClassifierHead:
    W = np.asarray(W, float)
    return ClassifierHead(Network(MlpSpec(W.shape, output_activation="softmax"), [W, np.asarray(b, float)]),
                          label_map)


class ForcedRouter:
    """Routes by a fixed boolean mask, for testing the predictor plumbing."""

    def __init__(self, mask):
        self.mask = np.asarray(mask, bool)

    def is_seen(self, x):
        return self.mask[: len(x)]

    def entropies(self, x):
        return np.where(self.mask[: len(x)], 0.1, 2.0)


def test_head_learns_separable_classes():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(m, 0.2, (30, 2)) for m in ((2, 0), (-2, 0), (0, 2))])
    y = np.repeat([7, 3, 5], 30)
    head = train_head(x, y, [3, 5, 7], HeadConfig(epochs=40, lr=1e-2))
    assert np.mean(head.predict(x) == y) > 0.95
    np.testing.assert_array_equal(head.label_map, [3, 5, 7])


def test_head_rejects_labels_outside_map():
    with pytest.raises(ValueError, match="outside the label map"):
        train_head(np.ones((2, 2)), [0, 9], [0, 1])


def test_ties_go_to_lowest_class_id():
    head = linear_head(np.zeros((2, 3)), np.zeros(3), [4, 8, 9])
    assert head.predict(np.ones((1, 2)))[0] == 4


def test_restricted_head_drops_columns():
    head = linear_head(np.eye(3), np.zeros(3), [0, 1, 2])
    sub = head.restricted([0, 2])
    np.testing.assert_array_equal(sub.label_map, [0, 2])
    assert sub.predict(np.array([[0.0, 5.0, 1.0]]))[0] == 2


def test_predictor_follows_the_router():
    seen = linear_head(np.eye(2), np.zeros(2), [0, 1])
    unseen = linear_head(np.eye(2), np.zeros(2), [2, 3])
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    out = GzslPredictor(ForcedRouter([True, False, False]), seen, unseen).predict(x)
    np.testing.assert_array_equal(out.predicted, [0, 3, 2])
    np.testing.assert_array_equal(out.routed_seen, [True, False, False])
    np.testing.assert_allclose(out.score, [0.1, 2.0, 2.0])
    assert predict_zsl(unseen, x[1]) == 3
    assert predict_gzsl(GzslPredictor(ForcedRouter([False]), seen, unseen), x[0]) == 2


def test_predictor_rejects_overlapping_heads():
    h = linear_head(np.eye(2), np.zeros(2), [0, 1])
    with pytest.raises(ValueError, match="share class ids"):
        GzslPredictor(ForcedRouter([True]), h, h)


def test_baseline_requires_generated_unseen():
    real = FeatureDataset(np.ones((2, 2)), [0, 1], np.eye(2))
    with pytest.raises(ValueError, match="generated"):
        train_baseline_gzsl(real, real)


def test_head_round_trip(tmp_path):
    head = linear_head(np.arange(6.0).reshape(2, 3), [0.5, 0, -0.5], [1, 4, 6])
    head.save(tmp_path)
    back = ClassifierHead.load(tmp_path)
    np.testing.assert_array_equal(back.label_map, [1, 4, 6])
    x = np.array([[0.3, -0.2]])
    np.testing.assert_allclose(back.probabilities(x), head.probabilities(x), atol=1e-6)


def test_prediction_csv_columns(tmp_path):
    p = tmp_path / "pred.csv"
    write_predictions(p, [10, 11], [0, 2], [0, 1], [0.9, 0.4], routed_seen=[True, False], score=[0.1, 1.5])
    rows = list(csv.reader(p.open()))
    assert tuple(rows[0]) == PREDICTION_COLUMNS
    assert rows[1] == ["10", "0", "0", "1", "0.1", "0.9"]
    write_predictions(p, [10], [0], [0], [0.9])
    assert list(csv.reader(p.open()))[1][3:5] == ["", ""]
