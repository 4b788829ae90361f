"""Seen/unseen softmax heads, routed GZSL prediction and the joint baseline."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import FeatureDataset
from .models import Adam, MlpSpec, Network, backward, forward_cache, load_checkpoint, save_checkpoint, softmax


@dataclass
class HeadConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0


class ClassifierHead:
    """Single linear layer + softmax over ``label_map`` (sorted class ids)."""

    def __init__(self, net: Network, label_map):
        self.net = net
        self.label_map = np.asarray(label_map, np.int64)
        if self.net.spec.layer_sizes[-1] != self.label_map.size:
            raise ValueError("head output width must equal the label map size")

    def probabilities(self, x) -> np.ndarray:
        return softmax(self.net.logits(x))

    def predict(self, x) -> np.ndarray:
        # argmax returns the first maximum; label_map is sorted, so ties go to the lowest id
        return self.label_map[np.argmax(self.net.logits(x), axis=1)]

    def predict_with_confidence(self, x):
        p = self.probabilities(x)
        k = np.argmax(p, axis=1)
        return self.label_map[k], p[np.arange(len(k)), k]

    def restricted(self, classes) -> "ClassifierHead":
        """Head over a subset of the label map (same weights, other columns dropped)."""
        cols = np.flatnonzero(np.isin(self.label_map, list(classes)))
        W, b = self.net.params
        spec = MlpSpec((W.shape[0], cols.size), output_activation="softmax")
        return ClassifierHead(Network(spec, [W[:, cols], b[cols]]), self.label_map[cols])

    def save(self, dir_path) -> None:
        save_checkpoint(self.net, dir_path)
        (Path(dir_path) / "labels.json").write_text(json.dumps({"label_map": self.label_map.tolist()}))

    @classmethod
    def load(cls, dir_path) -> "ClassifierHead":
        labels = json.loads((Path(dir_path) / "labels.json").read_text())["label_map"]
        return cls(load_checkpoint(dir_path), labels)


def train_head(features, labels, label_map, cfg: HeadConfig | None = None) -> ClassifierHead:
    cfg = cfg or HeadConfig()
    label_map = np.unique(np.asarray(label_map, np.int64))
    x = np.asarray(features, np.float64)
    labels = np.asarray(labels, np.int64)
    outside = np.setdiff1d(labels, label_map)
    if outside.size:
        raise ValueError(f"labels {outside.tolist()} are outside the label map")
    y = np.searchsorted(label_map, labels)
    spec = MlpSpec((x.shape[1], label_map.size), output_activation="softmax")
    net = Network.init(spec, int(np.random.SeedSequence([cfg.seed, 0xC1]).generate_state(1)[0]))
    opt = Adam(net.params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0xC11])
    for _ in range(cfg.epochs):
        order = rng.permutation(len(y))
        for i in range(0, len(y), cfg.batch_size):
            b = order[i:i + cfg.batch_size]
            out, cache = forward_cache(net.params, spec, x[b])
            p = softmax(out)
            p[np.arange(len(b)), y[b]] -= 1.0
            grads, _ = backward(net.params, spec, cache, p / len(b))
            net.params = opt.step(net.params, grads)
    return ClassifierHead(net, label_map)


@dataclass
class GzslPrediction:
    predicted: np.ndarray
    routed_seen: np.ndarray
    score: np.ndarray
    confidence: np.ndarray


@dataclass
class GzslPredictor:
    od: object  # OdDetector or BinaryDetector: needs is_seen(x) and entropies(x)
    seen_head: ClassifierHead
    unseen_head: ClassifierHead

    def __post_init__(self):
        s, u = set(self.seen_head.label_map.tolist()), set(self.unseen_head.label_map.tolist())
        if s & u:
            raise ValueError("seen and unseen heads share class ids")

    def predict(self, x) -> GzslPrediction:
        x = np.atleast_2d(np.asarray(x, np.float64))
        routed = np.asarray(self.od.is_seen(x), bool)
        ps, cs = self.seen_head.predict_with_confidence(x)
        pu, cu = self.unseen_head.predict_with_confidence(x)
        return GzslPrediction(np.where(routed, ps, pu), routed, self.od.entropies(x), np.where(routed, cs, cu))


def predict_gzsl(pred: GzslPredictor, feature_row) -> int:
    return int(pred.predict(feature_row).predicted[0])


def predict_zsl(unseen_head: ClassifierHead, feature_row) -> int:
    return int(unseen_head.predict(np.atleast_2d(feature_row))[0])


def train_baseline_gzsl(real_seen: FeatureDataset, synth_unseen: FeatureDataset,
                        cfg: HeadConfig | None = None, all_classes=None) -> ClassifierHead:
    """One softmax over seen and unseen classes, no routing."""
    if not synth_unseen.generated:
        raise ValueError("unseen training features must be generated")
    x = np.vstack([real_seen.features, synth_unseen.features])
    y = np.r_[real_seen.labels, synth_unseen.labels]
    label_map = np.unique(y) if all_classes is None else all_classes
    return train_head(x, y, label_map, cfg)


PREDICTION_COLUMNS = ("row_index", "true_class", "predicted_class", "routed_seen", "entropy", "confidence")


def write_predictions(path, row_index, true_class, predicted, confidence, routed_seen=None, score=None) -> None:
    """CSV dump; routing columns are left empty for unrouted methods."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for i in range(len(predicted)):
            w.writerow([
                int(row_index[i]), int(true_class[i]), int(predicted[i]),
                "" if routed_seen is None else int(bool(routed_seen[i])),
                "" if score is None else repr(float(score[i])),
                repr(float(confidence[i])),
            ])
