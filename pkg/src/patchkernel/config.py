"""Experiment configuration: a sectioned ``key = value`` file mapped onto dataclasses."""
from __future__ import annotations

import configparser
import dataclasses
import math
import os
from dataclasses import dataclass, field, fields

from .classifier import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    root: str = "data/cifar-10-batches-bin"
    train_limit: int = 0  # 0 keeps every image; otherwise the first N
    test_limit: int = 0


@dataclass
class DictionarySection:
    patch_size: int = 6
    size: int = 2048
    neighbors: int = 0  # 0 means derive from q_fraction
    q_fraction: float = 0.4
    regularizer: float = 1e-3
    orientation: str = "zca"
    gaussian: bool = False
    moment_samples: int = 500_000


@dataclass
class EncodingSection:
    pool_kernel: int = 5
    pool_stride: int = 3
    assignment: str = "hard"
    batch_size: int = 8


@dataclass
class ClassifierSection:
    k2: int = 1
    c2: int = 128
    k3: int = 6
    hidden: bool = False


@dataclass
class TrainSection:
    epochs: int = 175
    lr: float = 0.0  # 0 means 0.003 for |D| <= 2048, else 0.001
    decay_epochs: tuple = (100, 150)
    decay_factor: float = 0.1
    momentum: float = 0.9
    batch_size: int = 512
    augment: bool = False


@dataclass
class SeedSection:
    dictionary: int = 0
    training: int = 0
    augmentation: int = 1


@dataclass
class PathSection:
    output_dir: str = "runs"
    dict_file: str = ""
    whitening_file: str = ""
    train_cache: str = ""
    test_cache: str = ""
    model_file: str = ""
    metrics_csv: str = "metrics.csv"


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    dictionary: DictionarySection = field(default_factory=DictionarySection)
    encoding: EncodingSection = field(default_factory=EncodingSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    train: TrainSection = field(default_factory=TrainSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    paths: PathSection = field(default_factory=PathSection)

    @property
    def q(self) -> int:
        """Neighbor count: explicit value, else ``ceil(q_fraction * |D|)``."""
        d = self.dictionary
        if d.neighbors:
            return d.neighbors
        if not 0 < d.q_fraction <= 1:
            raise ConfigError("q_fraction must lie in (0, 1]")
        # ceil: 0.4 * 2048 = 819.2 -> 820 neighbors, the reference setting
        return max(1, math.ceil(round(d.q_fraction * d.size, 9)))

    @property
    def lr(self) -> float:
        if self.train.lr:
            return self.train.lr
        return 0.003 if self.dictionary.size <= 2048 else 0.001

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.epochs, self.lr, tuple(t.decay_epochs), t.decay_factor, t.momentum,
                           t.batch_size, self.seeds.training, t.augment, self.seeds.augmentation)

    def artifact(self, name: str) -> str:
        """Resolved artifact path; empty path settings fall back to ``output_dir``."""
        defaults = {
            "dict_file": "dictionary.bin",
            "whitening_file": "whitening.bin",
            "train_cache": "train_features.bin",
            "test_cache": "test_features.bin",
            "model_file": "model.bin",
        }
        value = getattr(self.paths, name)
        return value or os.path.join(self.paths.output_dir, defaults[name])

    def validate(self) -> None:
        d, e, c = self.dictionary, self.encoding, self.classifier
        if self.data.train_limit < 0 or self.data.test_limit < 0:
            raise ConfigError("dataset limits must be non-negative")
        if d.patch_size < 1 or d.size < 1:
            raise ConfigError("patch_size and dictionary size must be positive")
        if not 1 <= self.q <= 2 * d.size:
            raise ConfigError(f"Q={self.q} outside [1, {2 * d.size}]")
        if d.regularizer < 0:
            raise ConfigError("regularizer must be non-negative")
        if d.orientation not in ("zca", "pca"):
            raise ConfigError(f"unknown orientation {d.orientation!r}")
        if e.assignment not in ("hard", "soft"):
            raise ConfigError(f"unknown assignment {e.assignment!r}")
        if min(e.pool_kernel, e.pool_stride, c.k2, c.k3, c.c2) < 1:
            raise ConfigError("kernel sizes, strides and widths must be positive")
        self.train_config()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(int(v) for v in text.replace(",", " ").split())
    return text


def to_ini(config: ExperimentConfig) -> str:
    lines = []
    for sec in fields(config):
        lines.append(f"[{sec.name}]")
        section = getattr(config, sec.name)
        for f in fields(section):
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def from_ini(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.read_string(text)
    config = copy_config(base) if base else ExperimentConfig()
    known = {f.name for f in fields(config)}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]")
        section = getattr(config, name)
        keys = {f.name for f in fields(section)}
        for key, value in parser.items(name):
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            setattr(section, key, _parse(value, getattr(section, key)))
    return config


def copy_config(config: ExperimentConfig) -> ExperimentConfig:
    return ExperimentConfig(**{f.name: dataclasses.replace(getattr(config, f.name)) for f in fields(config)})


def load_config(path: str) -> ExperimentConfig:
    with open(path) as f:
        return from_ini(f.read())
