"""Trainable head on pooled patch features.

batch norm -> conv(k2, c2) -> [ReLU] -> conv(k3, n_classes) -> global mean pool,
trained with cross-entropy and momentum SGD. Forward and backward passes are
written out by hand in numpy; convolutions are stride 1 without padding.
"""
from __future__ import annotations

import csv
import logging
import struct
import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .dataset import LabeledImageSet, augment_batch

log = logging.getLogger(__name__)

PARAM_NAMES = ("bn_gamma", "bn_beta", "conv1_w", "conv1_b", "conv2_w", "conv2_b")
METRIC_FIELDS = ("epoch", "lr", "trainLoss", "trainAcc", "testAcc", "wallSeconds")


class ClassifierError(ValueError):
    pass


# convolution primitives --------------------------------------------------

def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid cross-correlation, ``x (B,C,H,W)``, ``w (O,C,k,k)`` -> ``(B,O,H-k+1,W-k+1)``."""
    bsz, c, h, wd = x.shape
    o, c2, k, _ = w.shape
    if c != c2:
        raise ClassifierError(f"conv expects {c2} input channels, got {c}")
    ho, wo = h - k + 1, wd - k + 1
    if ho < 1 or wo < 1:
        raise ClassifierError(f"input {h}x{wd} smaller than kernel {k}")
    out = np.zeros((bsz, o, ho, wo), dtype=np.result_type(x, w))
    for i in range(k):
        for j in range(k):
            out += np.einsum("bchw,oc->bohw", x[:, :, i:i + ho, j:j + wo], w[:, :, i, j], optimize=True)
    return out + b[None, :, None, None]


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, need_input: bool = True):
    """Gradients of :func:`conv2d` w.r.t. input, weights and bias."""
    k = w.shape[2]
    ho, wo = grad_out.shape[2:]
    gw = np.empty_like(w)
    gx = np.zeros_like(x) if need_input else None
    for i in range(k):
        for j in range(k):
            xs = x[:, :, i:i + ho, j:j + wo]
            gw[:, :, i, j] = np.einsum("bohw,bchw->oc", grad_out, xs, optimize=True)
            if need_input:
                gx[:, :, i:i + ho, j:j + wo] += np.einsum("bohw,oc->bchw", grad_out, w[:, :, i, j], optimize=True)
    gb = grad_out.sum(axis=(0, 2, 3))
    return gx, gw, gb


# model -------------------------------------------------------------------

@dataclass
class ClassifierModel:
    params: dict[str, np.ndarray]
    running_mean: np.ndarray
    running_var: np.ndarray
    hidden: bool = False
    eps: float = 1e-5
    bn_momentum: float = 0.1

    @property
    def in_channels(self) -> int:
        return self.params["conv1_w"].shape[1]

    @property
    def num_classes(self) -> int:
        return self.params["conv2_w"].shape[0]

    @property
    def dtype(self):
        return self.params["conv1_w"].dtype

    def copy(self) -> "ClassifierModel":
        return ClassifierModel({k: v.copy() for k, v in self.params.items()},
                               self.running_mean.copy(), self.running_var.copy(),
                               self.hidden, self.eps, self.bn_momentum)


def init_model(in_channels: int, c2: int, k2: int, k3: int, num_classes: int = 10,
               hidden: bool = False, rng: np.random.Generator | int = 0, dtype=np.float32,
               eps: float = 1e-5, bn_momentum: float = 0.1) -> ClassifierModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) conv weights, zero biases."""
    rng = np.random.default_rng(rng)

    def uniform(shape):
        a = 1.0 / np.sqrt(np.prod(shape[1:]))
        return rng.uniform(-a, a, size=shape).astype(dtype)

    params = {
        "bn_gamma": np.ones(in_channels, dtype),
        "bn_beta": np.zeros(in_channels, dtype),
        "conv1_w": uniform((c2, in_channels, k2, k2)),
        "conv1_b": np.zeros(c2, dtype),
        "conv2_w": uniform((num_classes, c2, k3, k3)),
        "conv2_b": np.zeros(num_classes, dtype),
    }
    return ClassifierModel(params, np.zeros(in_channels, dtype), np.ones(in_channels, dtype),
                           hidden, eps, bn_momentum)


def batchnorm_forward(x: np.ndarray, model: ClassifierModel, train: bool):
    """Per-channel standardization over (batch, height, width), then affine.

    Returns ``(y, cache)``; in train mode the running statistics are updated in place.
    """
    if x.shape[1] != model.in_channels:
        raise ClassifierError(f"batch norm expects {model.in_channels} channels, got {x.shape[1]}")
    gamma, beta = model.params["bn_gamma"], model.params["bn_beta"]
    if train:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if x.shape[0] < 2:
            raise ClassifierError("train-mode batch norm needs at least 2 samples")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = model.bn_momentum
        model.running_mean[:] = (1 - m) * model.running_mean + m * mean
        model.running_var[:] = (1 - m) * model.running_var + m * var * (n / max(n - 1, 1))
    else:
        mean, var = model.running_mean, model.running_var
    inv_std = (1.0 / np.sqrt(var + model.eps)).astype(x.dtype)
    xhat = (x - mean[None, :, None, None].astype(x.dtype)) * inv_std[None, :, None, None]
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y, (xhat, inv_std)


def forward(model: ClassifierModel, x: np.ndarray, train: bool = False, return_cache: bool = False):
    """Logits ``(B, n_classes)`` for pooled features ``x (B, C, H, W)``."""
    x = np.asarray(x, dtype=model.dtype)
    p = model.params
    k2, k3 = p["conv1_w"].shape[2], p["conv2_w"].shape[2]
    if x.ndim != 4 or min(x.shape[2:]) < k2 + k3 - 1:
        raise ClassifierError(f"input shape {x.shape} too small for k2={k2}, k3={k3}")
    y, bn_cache = batchnorm_forward(x, model, train)
    h1 = conv2d(y, p["conv1_w"], p["conv1_b"])
    a1 = np.maximum(h1, 0) if model.hidden else h1
    h2 = conv2d(a1, p["conv2_w"], p["conv2_b"])
    logits = h2.mean(axis=(2, 3))
    if return_cache:
        return logits, (bn_cache, y, h1, a1, h2.shape)
    return logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ClassifierError("label out of range")
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def backward(model: ClassifierModel, cache, logits: np.ndarray, labels: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of the mean cross-entropy w.r.t. every parameter."""
    (xhat, _inv_std), y, h1, a1, h2_shape = cache
    p = model.params
    b = len(labels)
    probs = np.exp(log_softmax(logits))
    probs[np.arange(b), labels] -= 1.0
    g_logits = probs / b
    area = h2_shape[2] * h2_shape[3]
    g_h2 = np.broadcast_to((g_logits / area)[:, :, None, None], h2_shape).astype(logits.dtype)
    g_a1, g_w2, g_b2 = conv2d_backward(a1, p["conv2_w"], g_h2)
    g_h1 = g_a1 * (h1 > 0) if model.hidden else g_a1
    g_y, g_w1, g_b1 = conv2d_backward(y, p["conv1_w"], g_h1)
    return {
        "bn_gamma": (g_y * xhat).sum(axis=(0, 2, 3)),
        "bn_beta": g_y.sum(axis=(0, 2, 3)),
        "conv1_w": g_w1,
        "conv1_b": g_b1,
        "conv2_w": g_w2,
        "conv2_b": g_b2,
    }


def loss_and_grads(model: ClassifierModel, x: np.ndarray, labels: np.ndarray, train: bool = True):
    logits, cache = forward(model, x, train=train, return_cache=True)
    return cross_entropy(logits, labels), backward(model, cache, logits, labels), logits


def sgd_momentum_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float = 0.9) -> None:
    """In place: ``v <- momentum * v + g``; ``p <- p - lr * v``."""
    for name, g in grads.items():
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(params[name])
        v *= momentum
        v += g
        params[name] -= lr * v


# training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 175
    lr: float = 0.003
    decay_epochs: tuple[int, ...] = (100, 150)
    decay_factor: float = 0.1
    momentum: float = 0.9
    batch_size: int = 512
    seed: int = 0
    augment: bool = False
    augment_seed: int = 1

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ClassifierError("decay epochs must be strictly increasing")
        if any(e < 1 for e in self.decay_epochs):
            raise ClassifierError("decay epochs must be positive")
        if self.decay_epochs and self.epochs and self.decay_epochs[-1] >= self.epochs:
            raise ClassifierError("decay epochs must be smaller than the number of epochs")
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1 or not 0 <= self.momentum < 1:
            raise ClassifierError("invalid epochs, learning rate, batch size or momentum")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.lr * self.decay_factor ** drops


class FeatureSource(Protocol):
    labels: np.ndarray

    def __len__(self) -> int: ...

    def batch(self, index: np.ndarray, rng: np.random.Generator | None) -> np.ndarray: ...


class ArrayFeatures:
    """Pooled features held in memory, or any object with a ``features(index)`` method."""

    def __init__(self, features, labels=None, dtype=np.float32):
        self.store = features
        self.labels = np.asarray(labels if labels is not None else features.labels).astype(np.int64)
        self.dtype = dtype
        if len(self.labels) != len(features):
            raise ClassifierError("feature and label counts differ")

    def __len__(self):
        return len(self.labels)

    def batch(self, index, rng=None):
        index = np.sort(index)  # contiguous-ish reads from a memmap
        if hasattr(self.store, "features"):
            return self.store.features(index, self.dtype), index
        return np.asarray(self.store[index], dtype=self.dtype), index


class AugmentedFeatures:
    """Re-encodes randomly augmented images for every batch (slow path)."""

    def __init__(self, dataset: LabeledImageSet, encoder, q: int, k: int, s: int,
                 assignment: str = "hard", dtype=np.float32):
        self.dataset = dataset
        self.encoder = encoder
        self.q, self.k, self.s = q, k, s
        self.assignment = assignment
        self.labels = dataset.labels.astype(np.int64)
        self.dtype = dtype

    def __len__(self):
        return len(self.dataset)

    def batch(self, index, rng=None):
        images = self.dataset.images(index, self.encoder.dtype)
        if rng is not None:
            images = augment_batch(images, rng)
        return self.encoder.pooled(images, self.q, self.k, self.s, self.assignment, self.dtype), index


@dataclass
class TrainResult:
    model: ClassifierModel
    metrics: list[dict] = field(default_factory=list)


def evaluate(model: ClassifierModel, features, labels=None, batch_size: int = 1000) -> float:
    """Accuracy with eval-mode batch norm."""
    source = features if hasattr(features, "batch") else ArrayFeatures(features, labels, model.dtype)
    n = len(source)
    if n == 0:
        raise ClassifierError("no samples to evaluate")
    correct = 0
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(lo + batch_size, n))
        x, idx = source.batch(idx, None)
        correct += int((forward(model, x).argmax(axis=1) == source.labels[idx]).sum())
    return correct / n


def train(model: ClassifierModel, train_source, config: TrainConfig, test_source=None,
          metrics_path: str | None = None) -> TrainResult:
    """Mini-batch momentum SGD over ``config.epochs`` epochs.

    The sample order is reshuffled every epoch from ``config.seed``; the
    learning rate is fixed within an epoch and multiplied by ``decay_factor``
    at each decay epoch. One metrics row is produced per epoch.
    """
    if not hasattr(train_source, "batch"):
        raise ClassifierError("train_source must provide batch(index, rng)")
    if len(train_source.labels) != len(train_source):
        raise ClassifierError("feature and label counts differ")
    rng = np.random.default_rng(config.seed)
    aug_rng = np.random.default_rng(config.augment_seed) if config.augment else None
    velocity: dict[str, np.ndarray] = {}
    result = TrainResult(model)
    writer = None
    fh = None
    if metrics_path:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
    t0 = time.perf_counter()
    try:
        n = len(train_source)
        for epoch in range(config.epochs):
            lr = config.lr_at(epoch)
            order = rng.permutation(n)
            loss_sum = 0.0
            correct = 0
            seen = 0
            for lo in range(0, n, config.batch_size):
                idx = order[lo:lo + config.batch_size]
                if len(idx) < 2:
                    continue
                x, idx = train_source.batch(idx, aug_rng)
                labels = train_source.labels[idx]
                loss, grads, logits = loss_and_grads(model, x, labels)
                sgd_momentum_step(model.params, grads, velocity, lr, config.momentum)
                loss_sum += loss * len(idx)
                correct += int((logits.argmax(axis=1) == labels).sum())
                seen += len(idx)
            for name, value in model.params.items():
                if not np.all(np.isfinite(value)):
                    raise FloatingPointError(f"non-finite values in {name} after epoch {epoch}")
            row = {
                "epoch": epoch + 1,
                "lr": lr,
                "trainLoss": loss_sum / max(seen, 1),
                "trainAcc": correct / max(seen, 1),
                "testAcc": evaluate(model, test_source) if test_source is not None else float("nan"),
                "wallSeconds": time.perf_counter() - t0,
            }
            result.metrics.append(row)
            log.info("epoch %d lr %.2e loss %.4f train %.4f test %.4f", row["epoch"], lr,
                     row["trainLoss"], row["trainAcc"], row["testAcc"])
            if writer:
                writer.writerow(row)
                fh.flush()
    finally:
        if fh:
            fh.close()
    return result


# checkpoints -------------------------------------------------------------

_CKPT_MAGIC = b"PKMODEL1"
_CKPT_HEADER = struct.Struct("<8sBddI")


def save_model(path: str, model: ClassifierModel) -> None:
    tensors = dict(model.params, running_mean=model.running_mean, running_var=model.running_var)
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(_CKPT_MAGIC, int(model.hidden), model.eps, model.bn_momentum, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path: str, dtype=np.float32) -> ClassifierModel:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _CKPT_HEADER.size:
        raise ClassifierError("truncated model checkpoint")
    magic, hidden, eps, mom, count = _CKPT_HEADER.unpack_from(blob)
    if magic != _CKPT_MAGIC:
        raise ClassifierError("not a model checkpoint")
    off = _CKPT_HEADER.size
    tensors = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + ln].decode()
            off += ln
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, off)
            off += 8 * ndim
            size = int(np.prod(shape))
            if off + 8 * size > len(blob):
                raise ClassifierError("truncated model checkpoint")
            tensors[name] = np.frombuffer(blob, "<f8", count=size, offset=off).reshape(shape).astype(dtype)
            off += 8 * size
    except struct.error as exc:
        raise ClassifierError("truncated model checkpoint") from exc
    params = {k: tensors[k] for k in PARAM_NAMES}
    return ClassifierModel(params, tensors["running_mean"], tensors["running_var"], bool(hidden), eps, mom)
