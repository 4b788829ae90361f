"""Generalized zero-shot classification on feature vectors with generated
unseen-class features and an entropy-based out-of-distribution router."""

from .dataset import (
    FeatureDataset, GzslTestSet, SplitSpec, SyntheticBenchmarkConfig, build_gzsl_test_set,
    build_train_set, load_dataset, make_synthetic_benchmark, random_split, save_dataset,
    transfer_attributes,
)
from .models import MlpSpec, TrainConfig, adam_step, forward, init_mlp
from .wgan import GanModel, train_gan, synthesize
from .ood import OdConfig, OdDetector, entropy, entropy_loss, route, select_threshold, train_od, train_od_binary
from .classify import ClassifierHead, GzslPredictor, HeadConfig, predict_gzsl, predict_zsl, train_head
from .evaluation import ProtocolConfig, bias_metrics, harmonic_mean, per_class_accuracy, run_protocol

__version__ = "0.1.0"
