"""Entropy-trained out-of-distribution detector and the binary baseline.

The detector is an S-way softmax network over the seen classes. Training
pushes seen features towards peaked outputs and generated unseen features
towards uniform outputs; at test time a row whose output entropy is below
the threshold is routed to the seen classifier, otherwise (ties included) to
the unseen one. Natural logarithms throughout.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import FeatureDataset
from .models import (
    Adam, MlpSpec, Network, backward, forward_cache, load_checkpoint, log_softmax,
    save_checkpoint, softmax,
)

LOG_FLOOR = 1e-12


class ProtocolViolation(ValueError):
    """Real unseen-class features were offered where only generated ones are allowed."""


def entropy(p) -> np.ndarray | float:
    """Shannon entropy (nats) of a distribution, or of each row of a matrix."""
    p = np.asarray(p, dtype=np.float64)
    rows = np.atleast_2d(p)
    if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("not a probability distribution (negative entries or sum != 1)")
    h = -(rows * np.log(np.maximum(rows, LOG_FLOOR))).sum(axis=1)
    return float(h[0]) if p.ndim == 1 else h


def entropy_loss(p_seen, labels_seen, p_unseen, nll_weight: float = 1.0) -> float:
    """E[H(p_s)] - E[H(p_u)] + nll_weight * E[-log p_s[y_s]] (log floored at 1e-12)."""
    p_seen = np.atleast_2d(np.asarray(p_seen, np.float64))
    p_unseen = np.atleast_2d(np.asarray(p_unseen, np.float64))
    labels_seen = np.asarray(labels_seen, np.int64)
    S = p_seen.shape[1]
    if labels_seen.size and (labels_seen.min() < 0 or labels_seen.max() >= S):
        raise ValueError("seen labels out of range")
    nll = -np.log(np.maximum(p_seen[np.arange(len(labels_seen)), labels_seen], LOG_FLOOR))
    return float(entropy(p_seen).mean() - entropy(p_unseen).mean() + nll_weight * nll.mean())


def entropy_loss_from_logits(logits_seen, labels_seen, logits_unseen, nll_weight: float = 1.0):
    """Same objective computed from logits; returns ``(value, grad_seen, grad_unseen)``."""
    zs = np.asarray(logits_seen, np.float64)
    zu = np.asarray(logits_unseen, np.float64)
    y = np.asarray(labels_seen, np.int64)
    ls, lu = log_softmax(zs), log_softmax(zu)
    ps, pu = np.exp(ls), np.exp(lu)
    hs = -(ps * ls).sum(axis=1)
    hu = -(pu * lu).sum(axis=1)
    nll = -ls[np.arange(len(y)), y]
    value = float(hs.mean() - hu.mean() + nll_weight * nll.mean())
    Bs, Bu = zs.shape[0], zu.shape[0]
    # dH/dz_j = -p_j (log p_j + H)
    g_s = -ps * (ls + hs[:, None]) / Bs
    onehot = np.zeros_like(ps)
    onehot[np.arange(len(y)), y] = 1.0
    g_s += nll_weight * (ps - onehot) / Bs
    g_u = pu * (lu + hu[:, None]) / Bu
    return value, g_s, g_u


@dataclass
class RoutingDecision:
    entropy: float
    is_seen: bool


@dataclass
class OdConfig:
    hidden: int = 512
    epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 64
    nll_weight: float = 1.0
    seed: int = 0


def _require_generated(ds: FeatureDataset, what: str):
    if not ds.generated:
        raise ProtocolViolation(f"{what} must be generated features, got real ones")
    if ds.n == 0:
        raise ValueError(f"{what} is empty")


class OdDetector:
    def __init__(self, net: Network, threshold: float, seen_classes):
        self.net = net
        self.threshold = float(threshold)
        self.seen_classes = np.asarray(seen_classes, np.int64)

    @property
    def num_seen(self) -> int:
        return self.net.spec.layer_sizes[-1]

    def probabilities(self, x) -> np.ndarray:
        return softmax(self.net.logits(x))

    def entropies(self, x) -> np.ndarray:
        ls = log_softmax(self.net.logits(x))
        return -(np.exp(ls) * ls).sum(axis=1)

    scores = entropies

    def is_seen(self, x) -> np.ndarray:
        return self.entropies(x) < self.threshold

    def save(self, dir_path) -> None:
        d = Path(dir_path)
        save_checkpoint(self.net, d)
        (d / "threshold.json").write_text(json.dumps({"ent_th": self.threshold}))
        (d / "labels.json").write_text(json.dumps({"seen_classes": self.seen_classes.tolist()}))

    @classmethod
    def load(cls, dir_path) -> "OdDetector":
        d = Path(dir_path)
        th = json.loads((d / "threshold.json").read_text())["ent_th"]
        seen = json.loads((d / "labels.json").read_text())["seen_classes"]
        return cls(load_checkpoint(d), th, seen)


def select_threshold(detector, seen_train_features) -> float:
    """Mean output entropy over the seen training rows."""
    x = np.asarray(seen_train_features)
    if x.shape[0] == 0:
        raise ValueError("threshold selection needs at least one seen training row")
    return math.fsum(detector.entropies(x).tolist()) / x.shape[0]


def route(detector, feature_row) -> RoutingDecision:
    h = float(detector.entropies(np.atleast_2d(feature_row))[0])
    return RoutingDecision(h, h < detector.threshold)


def _balanced_batches(n_a: int, n_b: int, bs: int, rng):
    """Yield equal-sized index batches from two pools; an epoch covers pool A once."""
    order = rng.permutation(n_a)
    size = min(bs, n_a)
    for i in range(0, n_a, size):
        a = order[i:i + size]
        yield a, rng.choice(n_b, size=len(a), replace=len(a) > n_b)


def train_od(real_seen: FeatureDataset, synth_unseen: FeatureDataset, cfg: OdConfig | None = None,
             seen_classes=None) -> OdDetector:
    cfg = cfg or OdConfig()
    if real_seen.generated:
        raise ValueError("real_seen must hold real features")
    if real_seen.n == 0:
        raise ValueError("real_seen is empty")
    _require_generated(synth_unseen, "synth_unseen")
    seen = np.unique(real_seen.labels) if seen_classes is None else np.asarray(sorted(seen_classes))
    lookup = {int(c): i for i, c in enumerate(seen)}
    try:
        ys = np.array([lookup[int(c)] for c in real_seen.labels])
    except KeyError as exc:
        raise ValueError(f"seen row with class {exc} outside the seen label map") from None
    xs = real_seen.features.astype(np.float64)
    xu = synth_unseen.features.astype(np.float64)
    spec = MlpSpec((xs.shape[1], cfg.hidden, cfg.hidden, len(seen)), "relu", "softmax")
    net = Network.init(spec, int(np.random.SeedSequence([cfg.seed, 0x0D]).generate_state(1)[0]))
    opt = Adam(net.params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0x0D1])
    for _ in range(cfg.epochs):
        for ia, ib in _balanced_batches(len(xs), len(xu), cfg.batch_size, rng):
            x = np.vstack([xs[ia], xu[ib]])
            out, cache = forward_cache(net.params, spec, x)
            _, g_s, g_u = entropy_loss_from_logits(out[:len(ia)], ys[ia], out[len(ia):], cfg.nll_weight)
            grads, _ = backward(net.params, spec, cache, np.vstack([g_s, g_u]))
            net.params = opt.step(net.params, grads)
    det = OdDetector(net, 0.0, seen)
    det.threshold = select_threshold(det, xs)
    return det


class BinaryDetector:
    """Two-way seen-vs-unseen classifier; column 0 is the seen group."""

    def __init__(self, net: Network):
        self.net = net
        self.threshold = 0.5

    def prob_seen(self, x) -> np.ndarray:
        return softmax(self.net.logits(x))[:, 0]

    def entropies(self, x) -> np.ndarray:
        ls = log_softmax(self.net.logits(x))
        return -(np.exp(ls) * ls).sum(axis=1)

    def scores(self, x) -> np.ndarray:
        return 1.0 - self.prob_seen(x)

    def is_seen(self, x) -> np.ndarray:
        return self.prob_seen(x) > self.threshold

    def save(self, dir_path) -> None:
        save_checkpoint(self.net, dir_path)

    @classmethod
    def load(cls, dir_path) -> "BinaryDetector":
        return cls(load_checkpoint(dir_path))


def route_binary(detector: BinaryDetector, feature_row) -> RoutingDecision:
    row = np.atleast_2d(feature_row)
    return RoutingDecision(float(detector.entropies(row)[0]), bool(detector.is_seen(row)[0]))


def train_od_binary(real_seen: FeatureDataset, synth_seen: FeatureDataset, synth_unseen: FeatureDataset,
                    cfg: OdConfig | None = None) -> BinaryDetector:
    """Cross-entropy seen/unseen classifier on (real + generated seen) vs generated unseen."""
    cfg = cfg or OdConfig()
    if real_seen.generated or real_seen.n == 0:
        raise ValueError("real_seen must hold real features")
    _require_generated(synth_seen, "synth_seen")
    _require_generated(synth_unseen, "synth_unseen")
    xs = np.vstack([real_seen.features, synth_seen.features]).astype(np.float64)
    xu = synth_unseen.features.astype(np.float64)
    spec = MlpSpec((xs.shape[1], cfg.hidden, cfg.hidden, 2), "relu", "softmax")
    net = Network.init(spec, int(np.random.SeedSequence([cfg.seed, 0xB1]).generate_state(1)[0]))
    opt = Adam(net.params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0xB11])
    for _ in range(cfg.epochs):
        for ia, ib in _balanced_batches(len(xs), len(xu), cfg.batch_size, rng):
            x = np.vstack([xs[ia], xu[ib]])
            y = np.r_[np.zeros(len(ia), int), np.ones(len(ib), int)]
            out, cache = forward_cache(net.params, spec, x)
            p = softmax(out)
            p[np.arange(len(y)), y] -= 1.0
            grads, _ = backward(net.params, spec, cache, p / len(y))
            net.params = opt.step(net.params, grads)
    return BinaryDetector(net)
