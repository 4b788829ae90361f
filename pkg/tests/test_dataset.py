from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gzslroute.dataset import (
    DatasetFormatError, FeatureDataset, SplitSpec, SyntheticBenchmarkConfig, TransferConfig,
    build_gzsl_test_set, build_train_set, class_means, fit_attribute_regressor, holdout_count,
    load_dataset, make_synthetic_benchmark, random_split, save_dataset, transfer_attributes,
)
from gzslroute.models import init_mlp


def small(**kw) -> FeatureDataset:
    return make_synthetic_benchmark(SyntheticBenchmarkConfig(
        **{"num_classes": 6, "dim_feature": 8, "dim_embedding": 4, "samples_per_class": 10, **kw}))


def test_round_trip_preserves_everything(tmp_path):
    ds = small(dim_manual=3)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.embeddings, ds.embeddings)
    np.testing.assert_array_equal(back.embeddings_manual, ds.embeddings_manual)
    assert back.class_names == ds.class_names
    assert not back.generated


def test_files_are_little_endian_raw(tmp_path):
    ds = small()
    save_dataset(ds, tmp_path)
    raw = (tmp_path / "labels.i32").read_bytes()
    assert len(raw) == 4 * ds.n
    assert int.from_bytes(raw[-4:], "little") == ds.labels[-1]
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert (meta["n"], meta["dx"], meta["c"], meta["de"]) == (60, 8, 6, 4)


def test_missing_file_is_named(tmp_path):
    save_dataset(small(), tmp_path)
    (tmp_path / "embeddings.f32").unlink()
    with pytest.raises(FileNotFoundError, match="embeddings.f32"):
        load_dataset(tmp_path)


def test_truncated_file_is_a_dimension_mismatch(tmp_path):
    save_dataset(small(), tmp_path)
    p = tmp_path / "features.f32"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(DatasetFormatError, match="dimension mismatch"):
        load_dataset(tmp_path)


def test_label_out_of_range_rejected(tmp_path):
    save_dataset(small(), tmp_path)
    labels = np.frombuffer((tmp_path / "labels.i32").read_bytes(), "<i4").copy()
    labels[0] = 6
    (tmp_path / "labels.i32").write_bytes(labels.tobytes())
    with pytest.raises(DatasetFormatError, match="label out of range"):
        load_dataset(tmp_path)


def test_all_zero_row_rejected(tmp_path):
    ds = small()
    ds.features[3] = 0
    save_dataset(ds, tmp_path)
    with pytest.raises(DatasetFormatError, match="all-zero"):
        load_dataset(tmp_path)


def test_constructor_validation():
    with pytest.raises(DatasetFormatError):
        FeatureDataset(np.ones((3, 2)), [0, 1], np.ones((2, 2)))
    with pytest.raises(DatasetFormatError):
        FeatureDataset(np.ones((2, 2)), [0, 0], np.ones((1, 2)))


def test_generated_flag_round_trips(tmp_path):
    ds = small()
    ds.generated = True
    save_dataset(ds, tmp_path)
    assert json.loads((tmp_path / "meta.json").read_text())["generated"] is True
    assert load_dataset(tmp_path).generated


def test_split_deterministic_sorted_disjoint():
    ds = small()
    a, b = random_split(ds, 4, 7), random_split(ds, 4, 7)
    assert a == b
    assert list(a.seen_classes) == sorted(a.seen_classes)
    assert not set(a.seen_classes) & set(a.unseen_classes)
    assert sorted(a.seen_classes + a.unseen_classes) == list(range(6))


@pytest.mark.parametrize("num_seen", [0, 6])
def test_split_rejects_bad_num_seen(num_seen):
    with pytest.raises(ValueError, match="num_seen"):
        random_split(small(), num_seen, 0)


def test_split_json_round_trip():
    s = random_split(small(), 3, 2)
    assert SplitSpec.from_json(s.to_json()) == s


def test_holdout_counts_round_half_up():
    assert holdout_count(10, 0.25) == 3  # 2.5 rounds up
    assert holdout_count(10, 0.2) == 2
    assert holdout_count(7, 0.5) == 4


def test_train_and_test_partition_seen_rows():
    ds = small()
    split = random_split(ds, 3, 1)
    train = build_train_set(ds, split)
    test = build_gzsl_test_set(ds, split)
    seen_rows = np.flatnonzero(np.isin(ds.labels, split.seen_classes))
    test_seen = test.row_index[test.is_seen_class]
    assert len(test_seen) == 3 * 2
    assert np.isin(train.labels, split.seen_classes).all()
    assert train.n + len(test_seen) == seen_rows.size
    # every unseen row is in the test set
    assert (~test.is_seen_class).sum() == 3 * 10
    # held-out seen rows are not in train
    train_keys = {tuple(r) for r in train.features}
    assert not any(tuple(r) in train_keys for r in ds.features[test_seen])


def test_singleton_seen_class_rejected():
    ds = FeatureDataset(np.arange(1, 7, dtype=float).reshape(3, 2), [0, 1, 1], np.eye(3)[:, :2] + 1)
    split = SplitSpec((0, 1), (2,), 0)
    with pytest.raises(ValueError, match="need >= 2"):
        build_train_set(ds, split)


def test_zero_spread_gives_zero_within_class_variance():
    ds = small(cluster_spread=0.0)
    for c in range(6):
        assert np.allclose(ds.features[ds.labels == c].std(axis=0), 0.0, atol=1e-6)


def test_class_means_are_linear_in_embeddings():
    ds = small(num_classes=12, cluster_spread=0.0)
    means = class_means(ds.features, ds.labels, range(12))
    emb = np.hstack([ds.embeddings.astype(np.float64), np.ones((12, 1))])
    coef, *_ = np.linalg.lstsq(emb, means, rcond=None)
    resid = means - emb @ coef
    r2 = 1 - (resid ** 2).sum() / ((means - means.mean(0)) ** 2).sum()
    assert r2 > 0.99


def test_default_benchmark_is_separable_by_nearest_mean():
    ds = make_synthetic_benchmark(SyntheticBenchmarkConfig())
    means = class_means(ds.features, ds.labels, range(ds.num_classes))
    d = ((ds.features[:, None, :] - means[None]) ** 2).sum(axis=2)
    assert np.mean(d.argmin(axis=1) == ds.labels) > 0.95


def test_benchmark_is_deterministic_and_validated():
    a, b = small(), small()
    np.testing.assert_array_equal(a.features, b.features)
    with pytest.raises(ValueError):
        SyntheticBenchmarkConfig(code_layout="grid")
    with pytest.raises(ValueError):
        SyntheticBenchmarkConfig(num_classes=1)
    assert small(code_layout="gaussian").n == 60


def test_transfer_output_shape_and_target_width():
    src = small(num_classes=10, dim_manual=5, samples_per_class=20)
    target_wv = np.random.default_rng(0).standard_normal((3, 4))
    feats = np.random.default_rng(1).standard_normal((30, 8))
    out = transfer_attributes(src, target_wv, feats, np.repeat(np.arange(3), 10), TransferConfig(epochs=5))
    assert out.shape == (3, 5)


def test_transfer_rejects_mismatched_word_vectors():
    src = small(dim_manual=5)
    with pytest.raises(ValueError, match="word-vector dimension"):
        transfer_attributes(src, np.zeros((2, 7)), np.zeros((2, 8)), [0, 1])


def test_transfer_requires_generated_rows_for_every_target():
    src = small(dim_manual=5)
    with pytest.raises(ValueError, match="no generated features"):
        transfer_attributes(src, np.zeros((2, 4)), np.ones((2, 8)), [0, 0])


def test_zero_epochs_returns_initial_mapping():
    src = small(dim_manual=5)
    reg = fit_attribute_regressor(src, TransferConfig(epochs=0, seed=3))
    for p, q in zip(reg.net.params, init_mlp(reg.net.spec, 3)):
        np.testing.assert_array_equal(p, q)


def test_regressor_beats_mean_predictor():
    src = small(num_classes=20, dim_manual=4, samples_per_class=30)
    reg = fit_attribute_regressor(src, TransferConfig(epochs=60))
    y = src.embeddings_manual[src.labels]
    pred = reg.predict(src.features, src.embeddings[src.labels])
    r2 = 1 - ((pred - y) ** 2).sum() / ((y - y.mean(0)) ** 2).sum()
    assert r2 > 0.5


@settings(max_examples=25, deadline=None)
@given(c=st.integers(3, 12), num_seen=st.integers(1, 11), seed=st.integers(0, 10_000))
def test_split_partitions_classes(c, num_seen, seed):
    num_seen = min(num_seen, c - 1)
    ds = FeatureDataset(np.ones((c, 2)), np.arange(c), np.ones((c, 2)))
    s = random_split(ds, num_seen, seed)
    s.check_covers(c)
    assert len(s.seen_classes) == num_seen


@settings(max_examples=50, deadline=None)
@given(count=st.integers(1, 500), frac=st.floats(0.01, 0.99))
def test_holdout_count_within_half_of_exact(count, frac):
    assert abs(holdout_count(count, frac) - frac * count) <= 0.5 + 1e-9
