"""GZSL metrics, the seen/unseen bias table, confidence curves and the
multi-split protocol."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .classify import GzslPredictor, HeadConfig, train_baseline_gzsl, train_head, write_predictions
from .dataset import (
    FeatureDataset, TransferConfig, build_gzsl_test_set, build_train_set, class_means, random_split,
    transfer_attributes,
)
from .models import TrainConfig
from .ood import OdConfig, train_od, train_od_binary
from .wgan import synthesize, train_gan

log = logging.getLogger(__name__)

METHODS = ("CEWGAN-OD", "CEWGAN", "CEWGAN-ODbin")
ROUTED = ("CEWGAN-OD", "CEWGAN-ODbin")
EMBEDDING_CHOICES = ("primary", "manual", "transferred")


def per_class_accuracy(true_labels, pred_labels, class_set) -> float:
    """Unweighted mean over ``class_set`` of per-class accuracy, in percent."""
    true_labels = np.asarray(true_labels)
    pred_labels = np.asarray(pred_labels)
    classes = list(class_set)
    if not classes:
        raise ValueError("class_set is empty")
    rates = []
    for c in classes:
        mask = true_labels == c
        if not mask.any():
            raise ValueError(f"class {c} has no test rows")
        rates.append(np.mean(pred_labels[mask] == c))
    return 100.0 * float(np.mean(rates))


def harmonic_mean(s: float, u: float) -> float:
    if s < 0 or u < 0:
        raise ValueError("accuracies must be nonnegative")
    return 0.0 if s + u == 0 else 2.0 * s * u / (s + u)


def bias_metrics(predicted_is_seen, true_is_seen) -> tuple[float, float]:
    """Group-level accuracies (SC, UC) in percent.

    SC is the share of truly-seen rows assigned to the seen group, UC the
    share of truly-unseen rows assigned to the unseen group.
    """
    pred = np.asarray(predicted_is_seen, bool)
    true = np.asarray(true_is_seen, bool)
    if not true.any() or true.all():
        raise ValueError("bias metrics need both seen and unseen rows")
    return 100.0 * float(pred[true].mean()), 100.0 * float((~pred[~true]).mean())


def sorted_confidence_curve(confidence, correct) -> list[tuple[float, float]]:
    """Cumulative accuracy (%) over the top-k most confident rows, k at every 1%."""
    conf = np.asarray(confidence, np.float64)
    ok = np.asarray(correct, bool)
    n = conf.size
    if n == 0:
        raise ValueError("no rows for the confidence curve")
    cum = np.cumsum(ok[np.argsort(-conf, kind="stable")])
    points = []
    for pct in range(1, 101):
        k = max(1, math.ceil(pct * n / 100))
        points.append((pct / 100.0, 100.0 * cum[k - 1] / k))
    return points


@dataclass
class SplitResult:
    seed: int
    seen_acc: float
    unseen_acc: float
    harmonic: float
    zsl_acc: float
    bias_sc: float
    bias_uc: float
    # routed methods only
    detection_acc: float | None = None
    ent_th: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class AggregateReport:
    method: str
    runs: list[SplitResult]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_runs(cls, method: str, runs: list[SplitResult]) -> "AggregateReport":
        keys = [k for k in runs[0].to_dict() if k != "seed"]
        mean, std = {}, {}
        for k in keys:
            vals = np.array([r.to_dict()[k] for r in runs], dtype=np.float64)
            mean[k] = float(vals.mean())
            std[k] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        return cls(method, runs, mean, std)

    def to_dict(self) -> dict:
        return {"method": self.method, "runs": [r.to_dict() for r in self.runs],
                "mean": self.mean, "std": self.std}


@dataclass
class ProtocolConfig:
    num_seen: int
    runs: int = 5
    seeds: list[int] | None = None
    methods: tuple[str, ...] = ("CEWGAN-OD", "CEWGAN")
    gan: TrainConfig = field(default_factory=TrainConfig)
    od: OdConfig = field(default_factory=OdConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    # generated rows per class; None = mean per-class count of seen training rows
    synth_per_class: int | None = None
    seen_test_fraction: float = 0.2
    output_dir: str | None = None
    track_unseen_means: bool = True
    n_jobs: int = 1
    # which class-embedding table conditions the generator
    embedding_choice: str = "primary"
    transfer: TransferConfig = field(default_factory=TransferConfig)

    def __post_init__(self):
        self.methods = tuple(self.methods)
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}; choose from {METHODS}")
        if not self.methods:
            raise ValueError("at least one method is required")
        if self.embedding_choice not in EMBEDDING_CHOICES:
            raise ValueError(f"embedding_choice must be one of {EMBEDDING_CHOICES}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.seeds is not None and len(self.seeds) != self.runs:
            raise ValueError("seeds must list one seed per run")

    def run_seeds(self) -> list[int]:
        return list(self.seeds) if self.seeds is not None else list(range(self.runs))


def desk_scale_config(num_seen: int = 10, runs: int = 5, **overrides) -> ProtocolConfig:
    """Training budget tuned for the synthetic benchmark on a laptop CPU.

    A faster generator schedule (lr 5e-4, Adam betas 0.5/0.9, 200 epochs) and a
    small, briefly trained detector; the library defaults follow the original
    hyperparameters, which need far longer runs.
    """
    base = dict(
        num_seen=num_seen, runs=runs,
        gan=TrainConfig(epochs=200, lr=5e-4, adam_betas=(0.5, 0.9)),
        od=OdConfig(hidden=64, epochs=100, lr=1e-3),
        head=HeadConfig(epochs=30, lr=1e-3),
    )
    base.update(overrides)
    return ProtocolConfig(**base)


class RunError(RuntimeError):
    def __init__(self, seed, exc):
        super().__init__(f"run with seed {seed} failed: {exc!r}")
        self.seed = seed


@dataclass
class SplitOutcome:
    results: dict[str, SplitResult]
    curves: dict[str, list[tuple[float, float]]]
    history: object
    # diagnostics not part of the metric schema
    extras: dict = field(default_factory=dict)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _select_embeddings(ds: FeatureDataset, cfg: ProtocolConfig, split, seed: int) -> FeatureDataset:
    """Swap in the embedding table the generator should be conditioned on.

    ``transferred`` keeps the manual attributes of seen classes and replaces
    the unseen ones with attributes regressed from their word vectors and
    generated (never real) features.
    """
    if cfg.embedding_choice == "primary":
        return ds
    if ds.embeddings_manual is None:
        raise ValueError(f"embedding_choice={cfg.embedding_choice!r} needs an embeddings_manual table")
    if cfg.embedding_choice == "manual":
        return ds.with_embeddings(ds.embeddings_manual)
    train = build_train_set(ds, split)
    seen, unseen = list(split.seen_classes), sorted(split.unseen_classes)
    gan, _ = train_gan(train, replace(cfg.gan, seed=seed), seen_classes=seen)
    per_class = cfg.synth_per_class or int(round(train.n / len(seen)))
    synth = synthesize(gan, ds.embeddings, per_class, seed + 2_000_003, class_ids=unseen)
    attrs = transfer_attributes(train, ds.embeddings[unseen], synth.features,
                                np.searchsorted(unseen, synth.labels), replace(cfg.transfer, seed=seed))
    table = ds.embeddings_manual.astype(np.float64).copy()
    table[unseen] = attrs
    return ds.with_embeddings(table)


def run_split(ds: FeatureDataset, cfg: ProtocolConfig, seed: int) -> SplitOutcome:
    """Train and evaluate every requested method on one random split."""
    split = random_split(ds, cfg.num_seen, seed, cfg.seen_test_fraction)
    ds = _select_embeddings(ds, cfg, split, seed)
    train = build_train_set(ds, split)
    test = build_gzsl_test_set(ds, split)
    seen, unseen = list(split.seen_classes), list(split.unseen_classes)

    monitor = None
    if cfg.track_unseen_means:
        monitor = (ds.embeddings[unseen], class_means(ds.features, ds.labels, unseen))
    gan, hist = train_gan(train, replace(cfg.gan, seed=seed), seen_classes=seen, monitor=monitor)
    per_class = cfg.synth_per_class or int(round(train.n / len(seen)))
    synth_unseen = synthesize(gan, ds.embeddings, per_class, seed, class_ids=unseen)

    head_cfg = replace(cfg.head, seed=seed)
    seen_head = train_head(train.features, train.labels, seen, head_cfg)
    unseen_head = train_head(synth_unseen.features, synth_unseen.labels, unseen, head_cfg)

    true_seen = test.is_seen_class
    run_dir = Path(cfg.output_dir) if cfg.output_dir else None
    results, curves = {}, {}
    for method in cfg.methods:
        od = None
        if method == "CEWGAN":
            head = train_baseline_gzsl(train, synth_unseen, head_cfg, all_classes=seen + unseen)
            pred, conf = head.predict_with_confidence(test.features)
            routed, score = None, None
            zsl_pred = head.restricted(unseen).predict(test.features[~true_seen])
        else:
            od_cfg = replace(cfg.od, seed=seed)
            if method == "CEWGAN-OD":
                od = train_od(train, synth_unseen, od_cfg, seen_classes=seen)
            else:
                synth_seen = synthesize(gan, ds.embeddings, per_class, seed + 1_000_003, class_ids=seen)
                od = train_od_binary(train, synth_seen, synth_unseen, od_cfg)
            out = GzslPredictor(od, seen_head, unseen_head).predict(test.features)
            pred, conf, routed, score = out.predicted, out.confidence, out.routed_seen, out.score
            zsl_pred = unseen_head.predict(test.features[~true_seen])

        s = per_class_accuracy(test.labels[true_seen], pred[true_seen], seen)
        u = per_class_accuracy(test.labels[~true_seen], pred[~true_seen], unseen)
        sc, uc = bias_metrics(np.isin(pred, seen), true_seen)
        res = SplitResult(seed, s, u, harmonic_mean(s, u),
                          per_class_accuracy(test.labels[~true_seen], zsl_pred, unseen), sc, uc)
        if routed is not None:
            rs, ru = bias_metrics(routed, true_seen)
            res.detection_acc = 0.5 * (rs + ru)
            res.ent_th = float(od.threshold) if method == "CEWGAN-OD" else None
        results[method] = res
        curves[method] = sorted_confidence_curve(conf[~true_seen], pred[~true_seen] == test.labels[~true_seen])

        if run_dir is not None:
            d = run_dir / method / str(seed)
            d.mkdir(parents=True, exist_ok=True)
            (d / "split.json").write_text(split.to_json() + "\n")
            gan.save(d / "checkpoints" / "gan")
            if method == "CEWGAN":
                head.save(d / "checkpoints" / "joint_head")
            else:
                od.save(d / "checkpoints" / "detector")
                seen_head.save(d / "checkpoints" / "seen_head")
                unseen_head.save(d / "checkpoints" / "unseen_head")
            write_predictions(d / "predictions.csv", test.row_index, test.labels, pred, conf, routed, score)
            _write_json(d / "metrics.json", res.to_dict())
            hist.to_csv(d / "loss_history.csv")
            _write_curve(d / "curve.csv", curves[method])
    extras = {"mean_dist": list(hist.mean_dist)}
    return SplitOutcome(results, curves, hist, extras)


def _write_curve(path, points) -> None:
    lines = ["fraction,accuracy"] + [f"{f:.2f},{a!r}" for f, a in points]
    Path(path).write_text("\n".join(lines) + "\n")


def _run_one(args):
    ds, cfg, seed = args
    try:
        return run_split(ds, cfg, seed)
    except Exception as exc:  # annotate with the run seed
        raise RunError(seed, exc) from exc


def run_splits(ds: FeatureDataset, cfg: ProtocolConfig) -> list[SplitOutcome]:
    jobs = [(ds, cfg, s) for s in cfg.run_seeds()]
    if cfg.n_jobs > 1:
        with ProcessPoolExecutor(cfg.n_jobs) as ex:
            return list(ex.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


def aggregate(cfg: ProtocolConfig, outcomes: list[SplitOutcome]) -> dict[str, AggregateReport]:
    reports = {m: AggregateReport.from_runs(m, [o.results[m] for o in outcomes]) for m in cfg.methods}
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        write_report(reports, out / "report.json")
        for m in cfg.methods:
            pts = np.array([[a for _, a in o.curves[m]] for o in outcomes]).mean(axis=0)
            _write_curve(out / f"curve_{m}.csv", [((i + 1) / 100.0, float(a)) for i, a in enumerate(pts)])
    return reports


def run_protocol(ds: FeatureDataset, cfg: ProtocolConfig) -> dict[str, AggregateReport]:
    """R independent random splits, each through the full pipeline; mean and sample std per metric."""
    return aggregate(cfg, run_splits(ds, cfg))


def write_report(reports: dict[str, AggregateReport], path) -> None:
    _write_json(Path(path), {"methods": {m: r.to_dict() for m, r in reports.items()}})
