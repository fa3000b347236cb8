"""Patch dictionary kernel pipeline for small-image classification.

Whitened random-patch dictionary, Q-nearest-neighbor binary encoding with
spatial pooling, and a batch-normalized factorized convolutional head.
"""
from .classifier import ClassifierModel, TrainConfig, evaluate, init_model, train
from .config import ExperimentConfig, load_config
from .dataset import LabeledImageSet, extract_patches, load_cifar10
from .dictionary import Dictionary, sample_dictionary, sample_gaussian_dictionary
from .eigen import symmetric_eigendecomposition
from .encoder import FeatureCache, PatchEncoder, encode_dataset
from .whitening import WhiteningOperator, build_whitening_operator, estimate_patch_moments

__version__ = "0.1.0"

__all__ = [
    "ClassifierModel", "TrainConfig", "evaluate", "init_model", "train",
    "ExperimentConfig", "load_config",
    "LabeledImageSet", "extract_patches", "load_cifar10",
    "Dictionary", "sample_dictionary", "sample_gaussian_dictionary",
    "symmetric_eigendecomposition",
    "FeatureCache", "PatchEncoder", "encode_dataset",
    "WhiteningOperator", "build_whitening_operator", "estimate_patch_moments",
]
