"""
A synthetic benchmark with embedding-predictable class means
============================================================

Builds the Gaussian benchmark, writes it in the on-disk format, reads it
back and draws one seen/unseen split with its GZSL test set.
"""
# %%
import tempfile

import numpy as np

from gzslroute.dataset import (
    SyntheticBenchmarkConfig, build_gzsl_test_set, build_train_set, class_means, load_dataset,
    make_synthetic_benchmark, random_split, save_dataset,
)

ds = make_synthetic_benchmark(SyntheticBenchmarkConfig(num_classes=20, dim_manual=8))
print(ds.n, "rows,", ds.num_classes, "classes, feature dim", ds.dim_feature, "embedding dim", ds.dim_embedding)

# %%
# Class means are a linear function of the embeddings, so a least-squares
# fit on the embeddings explains them almost exactly.
means = class_means(ds.features, ds.labels, range(ds.num_classes))
emb = np.hstack([ds.embeddings, np.ones((ds.num_classes, 1))])
coef, *_ = np.linalg.lstsq(emb, means, rcond=None)
print("R^2 of means from embeddings:", 1 - ((means - emb @ coef) ** 2).sum() / ((means - means.mean(0)) ** 2).sum())

# %%
# Round trip through the raw little-endian files.
with tempfile.TemporaryDirectory() as d:
    save_dataset(ds, d)
    again = load_dataset(d)
print("round trip exact:", np.array_equal(again.features, ds.features))

# %%
# A split keeps 20% of every seen class for testing; unseen rows are test only.
split = random_split(ds, num_seen=10, seed=0)
train, test = build_train_set(ds, split), build_gzsl_test_set(ds, split)
print("seen", split.seen_classes)
print("unseen", split.unseen_classes)
print("train rows", train.n, "| test rows", len(test), "of which seen", int(test.is_seen_class.sum()))
