"""End-to-end steps shared by the command line and the acceptance runs."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .classifier import ArrayFeatures, AugmentedFeatures, ClassifierModel, TrainResult, evaluate, init_model, train
from .config import ExperimentConfig
from .dataset import LabeledImageSet, load_cifar10
from .dictionary import Dictionary, sample_dictionary, sample_gaussian_dictionary
from .eigen import symmetric_eigendecomposition
from .encoder import CacheHeader, FeatureCache, PatchEncoder, encode_dataset, pooled_side
from .whitening import WhiteningOperator, build_whitening_operator, dataset_patch_moments

log = logging.getLogger(__name__)


def load_split(config: ExperimentConfig, split: str) -> LabeledImageSet:
    data = load_cifar10(config.data.root, split)
    limit = config.data.train_limit if split == "train" else config.data.test_limit
    if limit and limit < len(data):
        data = data.subset(np.arange(limit))
    return data


def fit_whitening(train_set: LabeledImageSet, config: ExperimentConfig) -> WhiteningOperator:
    d = config.dictionary
    rng = np.random.default_rng([config.seeds.dictionary, 0])
    moments = dataset_patch_moments(train_set, d.patch_size, rng, d.moment_samples)
    eig = symmetric_eigendecomposition(moments.covariance)
    return build_whitening_operator(moments, d.regularizer, d.orientation, eig=eig)


def build_dictionary(train_set: LabeledImageSet, config: ExperimentConfig,
                     op: WhiteningOperator | None = None) -> tuple[WhiteningOperator, Dictionary]:
    """Whitening operator plus a whitened-patch (or Gaussian) dictionary."""
    d = config.dictionary
    if op is None:
        op = fit_whitening(train_set, config)
    if d.gaussian:
        dictionary = sample_gaussian_dictionary(d.size, d.patch_size, config.seeds.dictionary)
    else:
        dictionary = sample_dictionary(train_set, d.size, d.patch_size, op, config.seeds.dictionary)
    return op, dictionary


def feature_shape(config: ExperimentConfig, image_side: int) -> tuple[int, int, int]:
    d, e = config.dictionary, config.encoding
    side = pooled_side(image_side - d.patch_size + 1, e.pool_kernel, e.pool_stride)
    return 2 * d.size, side, side


def cache_header(config: ExperimentConfig, encoder: PatchEncoder, dataset: LabeledImageSet) -> CacheHeader:
    e = config.encoding
    side = pooled_side(encoder.output_side(dataset.side), e.pool_kernel, e.pool_stride)
    return CacheHeader(len(dataset), encoder.n_atoms, side, side, e.assignment, e.pool_kernel,
                       e.pool_stride, config.q, encoder.source_digest())


def encode_splits(config: ExperimentConfig, encoder: PatchEncoder, train_set: LabeledImageSet,
                  test_set: LabeledImageSet, resume: bool = False) -> tuple[FeatureCache, FeatureCache]:
    e = config.encoding
    caches = []
    for split, path in ((train_set, config.artifact("train_cache")), (test_set, config.artifact("test_cache"))):
        caches.append(encode_dataset(split, encoder, config.q, e.pool_kernel, e.pool_stride, path,
                                     e.assignment, e.batch_size, resume))
    return caches[0], caches[1]


def new_model(config: ExperimentConfig, in_channels: int, num_classes: int = 10,
              dtype=np.float32) -> ClassifierModel:
    c = config.classifier
    return init_model(in_channels, c.c2, c.k2, c.k3, num_classes, c.hidden,
                      rng=config.seeds.training, dtype=dtype)


@dataclass
class RunOutcome:
    result: TrainResult
    train_accuracy: float
    test_accuracy: float


def train_model(config: ExperimentConfig, train_set: LabeledImageSet, encoder: PatchEncoder,
                metrics_path: str | None = None,
                caches: tuple[FeatureCache | None, FeatureCache] | None = None) -> RunOutcome:
    """Train the head from the feature cache, or from re-encoded augmented images.

    Test accuracy always uses the unaugmented test cache.
    """
    tc = config.train_config()
    e = config.encoding
    train_cache, test_cache = caches if caches else (None, None)
    if test_cache is None:
        test_cache = FeatureCache(config.artifact("test_cache"))
    if tc.augment:
        train_source = AugmentedFeatures(train_set, encoder, config.q, e.pool_kernel, e.pool_stride, e.assignment)
    else:
        if train_cache is None:
            train_cache = FeatureCache(config.artifact("train_cache"))
        train_source = ArrayFeatures(train_cache)
    test_source = ArrayFeatures(test_cache)
    model = new_model(config, encoder.n_atoms)
    result = train(model, train_source, tc, test_source, metrics_path)
    return RunOutcome(result, evaluate(model, train_source), evaluate(model, test_source))


def ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
