"""
Routing test rows by detector entropy
=====================================

The detector is an S-way softmax over seen classes, trained so seen
features give peaked outputs and generated unseen features give flat ones.
Rows whose entropy falls below the mean seen-training entropy go to the
seen classifier. The binary seen-vs-unseen detector is shown for contrast.
"""
# %%
from dataclasses import replace

import numpy as np

from gzslroute.dataset import (
    SyntheticBenchmarkConfig, build_gzsl_test_set, build_train_set, make_synthetic_benchmark, random_split,
)
from gzslroute.evaluation import bias_metrics, desk_scale_config
from gzslroute.ood import entropy, train_od, train_od_binary
from gzslroute.wgan import synthesize, train_gan

print("entropy of a uniform 4-way output:", entropy([0.25] * 4), "= ln 4 =", np.log(4))

ds = make_synthetic_benchmark(SyntheticBenchmarkConfig())
split = random_split(ds, 10, seed=1)
train, test = build_train_set(ds, split), build_gzsl_test_set(ds, split)
preset = desk_scale_config()
gan, _ = train_gan(train, replace(preset.gan, epochs=60), seen_classes=split.seen_classes)
fake_unseen = synthesize(gan, ds.embeddings, 80, 0, class_ids=split.unseen_classes)
fake_seen = synthesize(gan, ds.embeddings, 80, 1, class_ids=split.seen_classes)

# %%
od = train_od(train, fake_unseen, preset.od, seen_classes=split.seen_classes)
h = od.entropies(test.features)
print("threshold", round(od.threshold, 4))
print("median entropy  seen rows", np.median(h[test.is_seen_class]).round(4),
      "| unseen rows", np.median(h[~test.is_seen_class]).round(4))
sc, uc = bias_metrics(od.is_seen(test.features), test.is_seen_class)
print(f"entropy router: seen kept {sc:.1f}%  unseen kept {uc:.1f}%")

# %%
binary = train_od_binary(train, fake_seen, fake_unseen, preset.od)
sc, uc = bias_metrics(binary.is_seen(test.features), test.is_seen_class)
print(f"binary router:  seen kept {sc:.1f}%  unseen kept {uc:.1f}%")
