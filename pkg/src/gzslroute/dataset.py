"""Feature datasets: on-disk format, seen/unseen splits, GZSL test sets,
the synthetic Gaussian benchmark and word-vector to attribute transfer.

Dataset directory layout::

    meta.json            {"n", "dx", "c", "de", "class_names"[, "dm", "generated"]}
    features.f32         little-endian float32, row-major, n x dx
    labels.i32           little-endian int32, n
    embeddings.f32       little-endian float32, row-major, c x de
    embeddings_manual.f32  optional, c x dm
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import Adam, MlpSpec, Network, backward, forward_cache


class DatasetFormatError(ValueError):
    pass


@dataclass
class FeatureDataset:
    features: np.ndarray
    labels: np.ndarray
    embeddings: np.ndarray
    class_names: list[str] = field(default_factory=list)
    embeddings_manual: np.ndarray | None = None
    # True when rows come from a feature generator rather than real data.
    generated: bool = False

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64).ravel()
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        if self.embeddings_manual is not None:
            self.embeddings_manual = np.ascontiguousarray(self.embeddings_manual, dtype=np.float32)
        c = self.embeddings.shape[0] if self.embeddings.ndim == 2 else 0
        if not self.class_names:
            self.class_names = [f"class_{i:03d}" for i in range(c)]
        self.class_names = [str(s) for s in self.class_names]
        self._validate()

    def _validate(self):
        if self.features.ndim != 2 or self.features.shape[1] < 1:
            raise DatasetFormatError(f"features must be N x d_x with d_x > 0, got {self.features.shape}")
        if self.embeddings.ndim != 2 or self.embeddings.shape[1] < 1:
            raise DatasetFormatError(f"embeddings must be C x d_e with d_e > 0, got {self.embeddings.shape}")
        if self.num_classes < 2:
            raise DatasetFormatError("a dataset needs at least 2 classes")
        if self.labels.shape[0] != self.features.shape[0]:
            raise DatasetFormatError(
                f"dimension mismatch: {self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels"
            )
        if len(self.class_names) != self.num_classes:
            raise DatasetFormatError("class_names length must equal the number of embedding rows")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError(f"label out of range [0, {self.num_classes})")
        if self.embeddings_manual is not None and (
            self.embeddings_manual.ndim != 2 or self.embeddings_manual.shape[0] != self.num_classes
        ):
            raise DatasetFormatError("embeddings_manual must have one row per class")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim_feature(self) -> int:
        return self.features.shape[1]

    @property
    def dim_embedding(self) -> int:
        return self.embeddings.shape[1]

    @property
    def num_classes(self) -> int:
        return self.embeddings.shape[0]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx) -> "FeatureDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureDataset(
            self.features[idx], self.labels[idx], self.embeddings, list(self.class_names),
            self.embeddings_manual, self.generated,
        )

    def restrict_classes(self, classes) -> "FeatureDataset":
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))

    def with_embeddings(self, embeddings) -> "FeatureDataset":
        """Same rows, different class-embedding table (e.g. manual or transferred)."""
        return FeatureDataset(
            self.features, self.labels, embeddings, list(self.class_names),
            self.embeddings_manual, self.generated,
        )


def save_dataset(ds: FeatureDataset, dir_path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "n": ds.n, "dx": ds.dim_feature, "c": ds.num_classes, "de": ds.dim_embedding,
        "class_names": list(ds.class_names),
    }
    if ds.embeddings_manual is not None:
        meta["dm"] = int(ds.embeddings_manual.shape[1])
        (d / "embeddings_manual.f32").write_bytes(ds.embeddings_manual.astype("<f4").tobytes())
    if ds.generated:
        meta["generated"] = True
    (d / "features.f32").write_bytes(ds.features.astype("<f4").tobytes())
    (d / "labels.i32").write_bytes(ds.labels.astype("<i4").tobytes())
    (d / "embeddings.f32").write_bytes(ds.embeddings.astype("<f4").tobytes())
    (d / "meta.json").write_text(json.dumps(meta, indent=2))


def _read(path: Path, dtype, count: int, what: str) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"missing file: {path}")
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    if len(raw) != count * itemsize:
        raise DatasetFormatError(
            f"dimension mismatch in {what}: {len(raw)} bytes, expected {count * itemsize}"
        )
    return np.frombuffer(raw, dtype=dtype)


def load_dataset(dir_path) -> FeatureDataset:
    d = Path(dir_path)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing file: {meta_path}")
    meta = json.loads(meta_path.read_text())
    try:
        n, dx, c, de = (int(meta[k]) for k in ("n", "dx", "c", "de"))
        names = list(meta["class_names"])
    except KeyError as exc:
        raise DatasetFormatError(f"meta.json lacks key {exc}") from None
    if n < 1 or dx < 1 or c < 2 or de < 1:
        raise DatasetFormatError(f"invalid sizes in meta.json: n={n} dx={dx} c={c} de={de}")
    feats = _read(d / "features.f32", "<f4", n * dx, "features.f32").reshape(n, dx)
    labels = _read(d / "labels.i32", "<i4", n, "labels.i32")
    emb = _read(d / "embeddings.f32", "<f4", c * de, "embeddings.f32").reshape(c, de)
    manual = None
    if "dm" in meta:
        dm = int(meta["dm"])
        manual = _read(d / "embeddings_manual.f32", "<f4", c * dm, "embeddings_manual.f32").reshape(c, dm)
    if labels.min() < 0 or labels.max() >= c:
        raise DatasetFormatError(f"label out of range [0, {c})")
    zero_rows = np.flatnonzero(~feats.any(axis=1))
    if zero_rows.size:
        raise DatasetFormatError(f"{zero_rows.size} all-zero feature rows (first at row {zero_rows[0]})")
    return FeatureDataset(feats, labels, emb, names, manual, bool(meta.get("generated", False)))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    seen_classes: tuple[int, ...]
    unseen_classes: tuple[int, ...]
    seed: int
    seen_test_fraction: float = 0.2

    def __post_init__(self):
        seen = tuple(int(c) for c in self.seen_classes)
        unseen = tuple(int(c) for c in self.unseen_classes)
        object.__setattr__(self, "seen_classes", seen)
        object.__setattr__(self, "unseen_classes", unseen)
        if not seen or not unseen:
            raise ValueError("a split needs at least one seen and one unseen class")
        if set(seen) & set(unseen):
            raise ValueError("seen and unseen classes overlap")
        if not 0.0 < self.seen_test_fraction < 1.0:
            raise ValueError("seen_test_fraction must lie in (0, 1)")

    def check_covers(self, num_classes: int) -> None:
        if sorted(self.seen_classes + self.unseen_classes) != list(range(num_classes)):
            raise ValueError(f"split does not partition the {num_classes} classes")

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed, "seen": list(self.seen_classes), "unseen": list(self.unseen_classes),
            "seen_test_fraction": self.seen_test_fraction,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        d = json.loads(text)
        return cls(tuple(d["seen"]), tuple(d["unseen"]), int(d["seed"]), float(d["seen_test_fraction"]))


def random_split(ds: FeatureDataset, num_seen: int, seed: int, seen_test_fraction: float = 0.2) -> SplitSpec:
    c = ds.num_classes
    if not 1 <= num_seen < c:
        raise ValueError(f"num_seen must be in [1, {c - 1}], got {num_seen}")
    perm = np.random.default_rng(seed).permutation(c)
    return SplitSpec(tuple(sorted(perm[:num_seen].tolist())), tuple(sorted(perm[num_seen:].tolist())),
                     seed, seen_test_fraction)


def holdout_count(count: int, fraction: float) -> int:
    """Round half up: floor(fraction * count + 0.5)."""
    return int(math.floor(fraction * count + 0.5))


def _seen_holdout(ds: FeatureDataset, split: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    split.check_covers(ds.num_classes)
    rng = np.random.default_rng([split.seed, 0x5EE7])
    test, train = [], []
    for c in split.seen_classes:
        rows = np.flatnonzero(ds.labels == c)
        if rows.size < 2:
            raise ValueError(f"seen class {c} has {rows.size} rows; need >= 2 to hold out a test subset")
        k = holdout_count(rows.size, split.seen_test_fraction)
        if k >= rows.size:
            raise ValueError(f"seen class {c}: holding out {k} of {rows.size} rows leaves nothing to train on")
        picked = np.sort(rng.choice(rows, size=k, replace=False))
        test.append(picked)
        train.append(np.setdiff1d(rows, picked))
    return np.concatenate(test), np.concatenate(train)


@dataclass
class GzslTestSet:
    features: np.ndarray
    labels: np.ndarray
    is_seen_class: np.ndarray
    row_index: np.ndarray

    def __len__(self):
        return self.labels.shape[0]


def build_gzsl_test_set(ds: FeatureDataset, split: SplitSpec) -> GzslTestSet:
    seen_test, _ = _seen_holdout(ds, split)
    unseen_rows = np.flatnonzero(np.isin(ds.labels, split.unseen_classes))
    idx = np.concatenate([seen_test, unseen_rows])
    return GzslTestSet(
        ds.features[idx], ds.labels[idx], np.isin(ds.labels[idx], split.seen_classes), idx,
    )


def build_train_set(ds: FeatureDataset, split: SplitSpec) -> FeatureDataset:
    """Seen-class rows not held out for the GZSL test set."""
    _, train = _seen_holdout(ds, split)
    return ds.subset(train)


# ---------------------------------------------------------------------------
# Synthetic benchmark
# ---------------------------------------------------------------------------

@dataclass
class SyntheticBenchmarkConfig:
    """Gaussian clusters whose means are a fixed linear map of class embeddings.

    Each class draws a latent code ``q`` of size ``latent_dim``. The clean
    semantic vector is ``s = q @ B``, the class mean is ``s @ A`` and the
    published embedding is ``s`` plus ``embedding_noise`` Gaussian noise.
    When ``dim_manual > 0`` a second table ``q @ M`` is emitted as
    ``embeddings_manual``. A small ``latent_dim`` keeps unseen class means
    inside the span a generator can learn from the seen classes.
    """

    num_classes: int = 20
    dim_feature: int = 64
    dim_embedding: int = 16
    samples_per_class: int = 100
    cluster_spread: float = 0.3
    embedding_noise: float = 0.0
    seed: int = 0
    latent_dim: int = 3
    dim_manual: int = 0
    # "spaced": best-candidate sampling in the unit ball (even class spacing); "gaussian": iid normal codes
    code_layout: str = "spaced"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if min(self.dim_feature, self.dim_embedding, self.samples_per_class, self.latent_dim) < 1:
            raise ValueError("dimensions, latent_dim and samples_per_class must be positive")
        if self.cluster_spread < 0 or self.embedding_noise < 0 or self.dim_manual < 0:
            raise ValueError("cluster_spread, embedding_noise and dim_manual must be nonnegative")
        if self.code_layout not in ("spaced", "gaussian"):
            raise ValueError(f"unknown code_layout {self.code_layout!r}")


def _spaced_codes(n: int, k: int, rng, candidates: int = 64) -> np.ndarray:
    """Mitchell best-candidate points in the unit k-ball, rescaled to unit per-axis variance."""
    def ball(m):
        v = rng.standard_normal((m, k))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * rng.uniform(0, 1, (m, 1)) ** (1.0 / k)

    pts = [ball(1)[0]]
    for _ in range(n - 1):
        cand = ball(candidates)
        d = np.linalg.norm(cand[:, None, :] - np.asarray(pts)[None], axis=2).min(axis=1)
        pts.append(cand[np.argmax(d)])
    pts = np.asarray(pts)
    return pts / np.sqrt(k / (k + 2.0))


def make_synthetic_benchmark(cfg: SyntheticBenchmarkConfig) -> FeatureDataset:
    rng = np.random.default_rng(cfg.seed)
    k = cfg.latent_dim
    if cfg.code_layout == "spaced":
        codes = _spaced_codes(cfg.num_classes, k, rng)
    else:
        codes = rng.standard_normal((cfg.num_classes, k))
    to_semantic = rng.standard_normal((k, cfg.dim_embedding)) / np.sqrt(k)
    to_feature = rng.standard_normal((cfg.dim_embedding, cfg.dim_feature)) / np.sqrt(cfg.dim_embedding)
    semantic = codes @ to_semantic
    means = semantic @ to_feature
    labels = np.repeat(np.arange(cfg.num_classes), cfg.samples_per_class)
    feats = means[labels] + cfg.cluster_spread * rng.standard_normal((labels.size, cfg.dim_feature))
    emb = semantic + cfg.embedding_noise * rng.standard_normal(semantic.shape)
    manual = None
    if cfg.dim_manual:
        manual = codes @ (rng.standard_normal((k, cfg.dim_manual)) / np.sqrt(k))
    return FeatureDataset(feats, labels, emb, embeddings_manual=manual)


def class_means(features: np.ndarray, labels: np.ndarray, classes) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    return np.stack([features[labels == c].mean(axis=0) for c in classes])


# ---------------------------------------------------------------------------
# Word-vector -> manual-attribute transfer
# ---------------------------------------------------------------------------

@dataclass
class TransferConfig:
    hidden: int = 128
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 64
    holdout_fraction: float = 0.1
    patience: int = 20
    seed: int = 0


@dataclass
class AttributeRegressor:
    net: Network
    in_mean: np.ndarray
    in_std: np.ndarray
    val_mse: float

    def predict(self, features, word_vectors) -> np.ndarray:
        x = np.hstack([np.asarray(features, np.float64), np.asarray(word_vectors, np.float64)])
        return self.net((x - self.in_mean) / self.in_std)


def fit_attribute_regressor(source: FeatureDataset, cfg: TransferConfig | None = None) -> AttributeRegressor:
    """Two-layer FC regressor (feature ++ word vector) -> manual attributes, MSE loss.

    Early stopping monitors MSE on a held-out ``holdout_fraction`` of the
    source classes (at least one class).
    """
    cfg = cfg or TransferConfig()
    if source.embeddings_manual is None:
        raise ValueError("source dataset needs an embeddings_manual table")
    rng = np.random.default_rng(cfg.seed)
    present = np.flatnonzero(source.class_counts() > 0)
    n_val = max(1, int(round(cfg.holdout_fraction * present.size))) if present.size > 1 else 0
    val_classes = rng.choice(present, size=n_val, replace=False) if n_val else np.array([], int)
    is_val = np.isin(source.labels, val_classes)

    x = np.hstack([source.features.astype(np.float64), source.embeddings[source.labels].astype(np.float64)])
    y = source.embeddings_manual[source.labels].astype(np.float64)
    in_mean, in_std = x[~is_val].mean(axis=0), x[~is_val].std(axis=0) + 1e-8
    x = (x - in_mean) / in_std
    xt, yt, xv, yv = x[~is_val], y[~is_val], x[is_val], y[is_val]

    spec = MlpSpec((x.shape[1], cfg.hidden, y.shape[1]))
    net = Network.init(spec, cfg.seed)
    opt = Adam(net.params, cfg.lr)

    def mse(xs, ys):
        return float(np.mean((net(xs) - ys) ** 2)) if len(xs) else float("nan")

    best, best_params, stale = mse(xv, yv), net.params, 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(xt))
        for i in range(0, len(xt), cfg.batch_size):
            b = order[i:i + cfg.batch_size]
            out, cache = forward_cache(net.params, spec, xt[b])
            grads, _ = backward(net.params, spec, cache, 2.0 * (out - yt[b]) / out.size)
            net.params = opt.step(net.params, grads)
        if not len(xv):
            best_params = net.params
            continue
        cur = mse(xv, yv)
        if cur < best:
            best, best_params, stale = cur, net.params, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    net.params = best_params
    return AttributeRegressor(net, in_mean, in_std, mse(xv, yv))


def transfer_attributes(source: FeatureDataset, target_word_vectors, synth_features, synth_labels,
                        cfg: TransferConfig | None = None) -> np.ndarray:
    """Predict manual attributes for target classes from their word vectors.

    ``synth_features`` must be generated (never real) features for the target
    classes; ``synth_labels[i]`` indexes the row of ``target_word_vectors``
    that row ``i`` belongs to. Each class's attribute row is the mean of the
    regressor outputs over its generated features.
    """
    wv = np.atleast_2d(np.asarray(target_word_vectors, dtype=np.float64))
    synth_features = np.asarray(synth_features, dtype=np.float64)
    synth_labels = np.asarray(synth_labels, dtype=np.int64)
    if wv.shape[1] != source.dim_embedding:
        raise ValueError(f"word-vector dimension mismatch: target {wv.shape[1]} vs source {source.dim_embedding}")
    if synth_features.ndim != 2 or synth_features.shape[1] != source.dim_feature:
        raise ValueError("synthesized feature width does not match the source features")
    missing = set(range(wv.shape[0])) - set(synth_labels.tolist())
    if missing:
        raise ValueError(f"no generated features for target rows {sorted(missing)}")
    reg = fit_attribute_regressor(source, cfg)
    pred = reg.predict(synth_features, wv[synth_labels])
    return np.stack([pred[synth_labels == u].mean(axis=0) for u in range(wv.shape[0])])
