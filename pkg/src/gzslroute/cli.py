"""Command-line entry point: ``gzslroute {synth-data,run,compare,transfer-attrs}``.

Every command takes an optional JSON config file (``--config``) plus
``--set key=value`` overrides (dotted keys reach nested sections, values are
parsed as JSON when possible). Flags win over the file. Unknown keys are
rejected.

Exit codes: 0 success, 1 invalid configuration or input, 2 a run failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .classify import HeadConfig
from .dataset import (
    DatasetFormatError, FeatureDataset, SyntheticBenchmarkConfig, TransferConfig, load_dataset,
    make_synthetic_benchmark, save_dataset, transfer_attributes,
)
from .evaluation import EMBEDDING_CHOICES, METHODS, ProtocolConfig, RunError, aggregate, desk_scale_config, run_splits
from .models import TrainConfig
from .ood import OdConfig
from .wgan import synthesize, train_gan

OUTPUT_ROOT_ENV = "GZSLROUTE_OUTPUT_ROOT"
EXIT_OK, EXIT_INVALID, EXIT_RUN_FAILED = 0, 1, 2
COMPARE_METRICS = ("seen_acc", "unseen_acc", "harmonic")

log = logging.getLogger("gzslroute")


class ConfigError(ValueError):
    pass


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _build(cls, values: dict | None, where: str):
    values = dict(values or {})
    unknown = set(values) - _field_names(cls)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, assignments: list[str]) -> dict:
    """Apply ``a.b=value`` assignments to a nested dict (returns a new dict)."""
    out = json.loads(json.dumps(config))
    for item in assignments or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {item!r}: {p!r} is not a section")
            node = nxt
        node[leaf] = _parse_value(raw)
    return out


def read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p} must contain a JSON object")
    return data


PRESETS = ("desk_scale", "library")


@dataclass
class ExperimentConfig:
    """Validated configuration of the ``run`` command."""

    num_seen: int
    dataset: str | None = None
    synthetic: dict | None = None
    methods: list[str] = field(default_factory=lambda: ["CEWGAN-OD", "CEWGAN"])
    runs: int = 5
    seeds: list[int] | None = None
    output_dir: str | None = None
    embedding_choice: str = "primary"
    # desk_scale: budgets tuned for the synthetic benchmark; library: dataclass defaults
    preset: str = "desk_scale"
    gan: dict = field(default_factory=dict)
    od: dict = field(default_factory=dict)
    head: dict = field(default_factory=dict)
    transfer: dict = field(default_factory=dict)
    synth_per_class: int | None = None
    seen_test_fraction: float = 0.2
    n_jobs: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if "num_seen" not in d:
            raise ConfigError("missing required key: num_seen")
        cfg = _build(cls, d, "experiment config")
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if (self.dataset is None) == (self.synthetic is None):
            raise ConfigError("specify exactly one data source: 'dataset' or 'synthetic'")
        if self.dataset is not None and not Path(self.dataset).is_dir():
            raise ConfigError(f"dataset directory not found: {self.dataset}")
        if self.synthetic is not None:
            _build(SyntheticBenchmarkConfig, self.synthetic, "synthetic")
        if isinstance(self.methods, str):
            self.methods = [self.methods]
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"methods must be a nonempty subset of {list(METHODS)}, got {self.methods}")
        if self.embedding_choice not in EMBEDDING_CHOICES:
            raise ConfigError(f"embedding_choice must be one of {list(EMBEDDING_CHOICES)}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {list(PRESETS)}")
        for name, cls in (("gan", TrainConfig), ("od", OdConfig), ("head", HeadConfig), ("transfer", TransferConfig)):
            if not isinstance(getattr(self, name), dict):
                raise ConfigError(f"'{name}' must be an object")
            _build(cls, self._section(name, cls), name)
        if not isinstance(self.runs, int) or self.runs < 1:
            raise ConfigError("runs must be a positive integer")
        if self.seeds is not None and len(self.seeds) != self.runs:
            raise ConfigError("seeds must list exactly one seed per run")

    def _section(self, name: str, cls) -> dict:
        base = {}
        if self.preset == "desk_scale":
            base = asdict(getattr(desk_scale_config(), name))
        return {**base, **getattr(self, name)}

    def load_data(self) -> FeatureDataset:
        if self.dataset is not None:
            return load_dataset(self.dataset)
        return make_synthetic_benchmark(_build(SyntheticBenchmarkConfig, self.synthetic, "synthetic"))

    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir) if self.output_dir else default_output_root() / "run"

    def protocol(self) -> ProtocolConfig:
        gan = self._section("gan", TrainConfig)
        if "adam_betas" in gan:
            gan["adam_betas"] = tuple(gan["adam_betas"])
        return ProtocolConfig(
            num_seen=self.num_seen, runs=self.runs, seeds=self.seeds, methods=tuple(self.methods),
            gan=TrainConfig(**gan), od=OdConfig(**self._section("od", OdConfig)),
            head=HeadConfig(**self._section("head", HeadConfig)),
            transfer=TransferConfig(**self._section("transfer", TransferConfig)),
            synth_per_class=self.synth_per_class, seen_test_fraction=self.seen_test_fraction,
            output_dir=str(self.resolved_output_dir()), n_jobs=self.n_jobs,
            embedding_choice=self.embedding_choice,
        )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth_data(config: dict, out_dir) -> Path:
    cfg = _build(SyntheticBenchmarkConfig, config, "synthetic benchmark config")
    out = Path(out_dir)
    save_dataset(make_synthetic_benchmark(cfg), out)
    return out


def cmd_run(config: dict) -> dict:
    """Validate, run the protocol and write report.json, curves and per-run directories."""
    exp = ExperimentConfig.from_dict(config)
    ds = exp.load_data()
    if not isinstance(exp.num_seen, int) or not 1 <= exp.num_seen < ds.num_classes:
        raise ConfigError(f"num_seen must be an integer in [1, {ds.num_classes - 1}], got {exp.num_seen!r}")
    proto = exp.protocol()
    out = exp.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(exp), indent=2, sort_keys=True) + "\n")
    reports = aggregate(proto, run_splits(ds, proto))
    return {m: r.to_dict() for m, r in reports.items()}


def _load_report(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"report not found: {p}")
    data = json.loads(p.read_text())
    if "methods" not in data or not data["methods"]:
        raise ConfigError(f"{p} is not a report (no 'methods' section)")
    return data["methods"]


def _pick_pairs(a: dict, b: dict, method_a, method_b):
    if method_a or method_b:
        ma = method_a or (next(iter(a)) if len(a) == 1 else None)
        mb = method_b or (next(iter(b)) if len(b) == 1 else None)
        if ma is None or mb is None:
            raise ConfigError("name the method of each report with --method-a/--method-b")
        for m, rep, tag in ((ma, a, "A"), (mb, b, "B")):
            if m not in rep:
                raise ConfigError(f"method {m!r} not in report {tag}")
        return [(ma, mb)]
    if set(a) == set(b):
        return [(m, m) for m in a]
    if len(a) == 1 and len(b) == 1:
        return [(next(iter(a)), next(iter(b)))]
    raise ConfigError("reports hold different method sets; choose with --method-a/--method-b")


def cmd_compare(report_a, report_b, method_a=None, method_b=None) -> list[dict]:
    """Side-by-side mean s/u/H of two reports with signed deltas (B minus A)."""
    a, b = _load_report(report_a), _load_report(report_b)
    rows = []
    for ma, mb in _pick_pairs(a, b, method_a, method_b):
        ra, rb = a[ma]["mean"], b[mb]["mean"]
        row = {"method_a": ma, "method_b": mb}
        for k in COMPARE_METRICS:
            for tag, rep in (("A", ra), ("B", rb)):
                if k not in rep:
                    raise ConfigError(f"metric {k!r} missing from report {tag} ({ma if tag == 'A' else mb})")
            row[f"{k}_a"], row[f"{k}_b"] = ra[k], rb[k]
            row[f"delta_{k}"] = rb[k] - ra[k]
        rows.append(row)
    return rows


def format_comparison(rows: list[dict]) -> str:
    head = f"{'A':<14}{'B':<14}" + "".join(f"{n + ' A':>8}{n + ' B':>8}{'d' + n:>9}" for n in ("s", "u", "H"))
    lines = [head]
    for r in rows:
        cells = "".join(
            f"{r[k + '_a']:8.1f}{r[k + '_b']:8.1f}{r['delta_' + k]:+9.1f}" for k in COMPARE_METRICS)
        lines.append(f"{r['method_a']:<14}{r['method_b']:<14}{cells}")
    return "\n".join(lines)


def comparison_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def cmd_transfer_attrs(source_dir, target_dir, out_dir, config: dict | None = None) -> np.ndarray:
    """Regress manual attributes for the target dataset's classes from its word vectors.

    Only the target's embedding table is read; its features are never used.
    Target features come from a generator trained on the source dataset.
    """
    config = dict(config or {})
    unknown = set(config) - {"gan", "transfer", "per_class", "seed"}
    if unknown:
        raise ConfigError(f"unknown key(s) in transfer config: {', '.join(sorted(unknown))}")
    seed = int(config.get("seed", 0))
    gan_cfg = _build(TrainConfig, {**asdict(desk_scale_config().gan), "seed": seed, **config.get("gan", {})}, "gan")
    tr_cfg = _build(TransferConfig, {"seed": seed, **config.get("transfer", {})}, "transfer")
    source = load_dataset(source_dir)
    if source.embeddings_manual is None:
        raise ConfigError("source dataset has no embeddings_manual table")
    target = load_dataset(target_dir)
    if target.dim_embedding != source.dim_embedding:
        raise ConfigError(f"word-vector dimension mismatch: target {target.dim_embedding} vs source {source.dim_embedding}")
    if target.dim_feature != source.dim_feature:
        raise ConfigError("feature dimension mismatch between source and target")
    gan, _ = train_gan(source, gan_cfg)
    per_class = int(config.get("per_class", 100))
    synth = synthesize(gan, target.embeddings, per_class, seed)
    attrs = transfer_attributes(source, target.embeddings, synth.features, synth.labels, tr_cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "embeddings_manual.f32").write_bytes(attrs.astype("<f4").tobytes())
    (out / "meta.json").write_text(json.dumps({"c": int(attrs.shape[0]), "dm": int(attrs.shape[1])}, indent=2) + "\n")
    return attrs


# ---------------------------------------------------------------------------
# argparse wiring
# ---------------------------------------------------------------------------

def _add_config_args(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (dotted for nested sections); repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gzslroute", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic benchmark dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-classes", type=int)

    p = sub.add_parser("run", help="run the multi-split protocol")
    _add_config_args(p)
    p.add_argument("--dataset", help="dataset directory (instead of a synthetic config)")
    p.add_argument("--output-dir", help=f"run directory (default ${OUTPUT_ROOT_ENV}/run)")
    p.add_argument("--method", action="append", choices=METHODS, help="repeatable; overrides 'methods'")
    p.add_argument("--runs", type=int)
    p.add_argument("--num-seen", type=int)

    p = sub.add_parser("compare", help="compare two report.json files")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--method-a")
    p.add_argument("--method-b")
    p.add_argument("--csv", help="also write the table as CSV")

    p = sub.add_parser("transfer-attrs", help="regress manual attributes from word vectors")
    _add_config_args(p)
    p.add_argument("--source", required=True, help="dataset with both embedding tables")
    p.add_argument("--target", required=True, help="dataset whose embedding table holds the target word vectors")
    p.add_argument("--out", required=True)
    return parser


def _merged(args, flags: dict) -> dict:
    cfg = apply_overrides(read_config(args.config), args.set)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth-data":
            cfg = _merged(args, {"seed": args.seed, "num_classes": args.num_classes})
            print(cmd_synth_data(cfg, args.out))
        elif args.command == "run":
            cfg = _merged(args, {"dataset": args.dataset, "output_dir": args.output_dir,
                                 "methods": args.method, "runs": args.runs, "num_seen": args.num_seen})
            if args.dataset:
                cfg.pop("synthetic", None)
            reports = cmd_run(cfg)
            for m, r in reports.items():
                mean = r["mean"]
                print(f"{m}: s={mean['seen_acc']:.1f} u={mean['unseen_acc']:.1f} H={mean['harmonic']:.1f}")
        elif args.command == "compare":
            rows = cmd_compare(args.report_a, args.report_b, args.method_a, args.method_b)
            print(format_comparison(rows))
            if args.csv:
                Path(args.csv).write_text(comparison_csv(rows))
        elif args.command == "transfer-attrs":
            attrs = cmd_transfer_attrs(args.source, args.target, args.out, _merged(args, {}))
            print(f"wrote {attrs.shape[0]}x{attrs.shape[1]} attributes to {args.out}")
    except (ConfigError, DatasetFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RunError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED
    except Exception as exc:  # anything raised while training is a run failure
        print(f"run failed: {exc!r}", file=sys.stderr)
        return EXIT_RUN_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
