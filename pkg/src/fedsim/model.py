"""Reference local trainer: multinomial logistic regression fit by plain SGD.

This is the stand-in for the detector each client would train. It supplies
the per-client loss, the E (local epochs) and B (minibatch) semantics, and a
held-out accuracy used as the federated target metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels

Layout = tuple[tuple[str, tuple[int, ...]], ...]


class DimensionError(ValueError):
    """Parameters and data disagree on shape."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


def _normalize_layout(layout) -> Layout:
    out = []
    seen = set()
    for name, shape in layout:
        if not isinstance(name, str) or not name:
            raise ValueError("tensor names must be non-empty strings")
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"tensor {name!r} has a non-positive dimension: {shape}")
        out.append((name, shape))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 parameters with a named tensor layout.

    ``values`` is stored read-only so instances can be shared between threads.
    """

    layout: Layout
    values: np.ndarray

    def __post_init__(self):
        layout = _normalize_layout(self.layout)
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        expected = sum(math.prod(shape) for _, shape in layout)
        if values.size != expected:
            raise ValueError(f"layout needs {expected} values, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "layout", layout)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def tensors(self) -> dict[str, np.ndarray]:
        """Views of each tensor, reshaped, in layout order."""
        out = {}
        offset = 0
        for name, shape in self.layout:
            size = math.prod(shape)
            out[name] = self.values[offset:offset + size].reshape(shape)
            offset += size
        return out

    def with_values(self, values) -> "ParamVector":
        return ParamVector(self.layout, values)


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int
    batch_size: int
    learning_rate: float
    seed: int = 0
    # epoch index of the first pass; lets E chained 1-epoch calls reproduce one E-epoch call
    first_epoch: int = 0

    def __post_init__(self):
        if int(self.local_epochs) < 1:
            raise ValueError("local_epochs (E) must be >= 1")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size (B) must be >= 1")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive and finite")
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.first_epoch < 0:
            raise ValueError("first_epoch must be >= 0")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64).reshape(-1)
        if X.ndim != 2:
            raise ValueError("features must be a 2-D array (samples x dim)")
        if X.shape[0] != y.shape[0] or y.shape[0] < 1:
            raise ValueError("features and labels must have equal, non-zero length")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError("labels must lie in [0, num_classes)")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)


def classifier_layout(dim: int, num_classes: int) -> Layout:
    return (("weight", (dim, num_classes)), ("bias", (num_classes,)))


def init_params(layout, seed: int, scale: float = 0.01) -> ParamVector:
    """Seeded N(0, scale^2) initialization."""
    layout = _normalize_layout(layout)
    if not layout:
        raise ValueError("layout must not be empty")
    size = sum(math.prod(shape) for _, shape in layout)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    return ParamVector(layout, scale * rng.standard_normal(size))


def _unpack(params: ParamVector, data: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    if params.layout != classifier_layout(data.dim, data.num_classes):
        raise DimensionError(
            f"params layout {params.layout} does not fit data of dim {data.dim} "
            f"with {data.num_classes} classes"
        )
    t = params.tensors()
    return t["weight"], t["bias"]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(params: ParamVector, data: LabeledDataset) -> float:
    """Mean cross-entropy of the softmax classifier over ``data``."""
    W, b = _unpack(params, data)
    logp = _log_softmax(data.features @ W + b)
    return float(-logp[np.arange(len(data)), data.labels].mean())


def gradient(params: ParamVector, data: LabeledDataset) -> np.ndarray:
    """Gradient of :func:`loss` flattened in layout order."""
    W, b = _unpack(params, data)
    p = np.exp(_log_softmax(data.features @ W + b))
    p[np.arange(len(data)), data.labels] -= 1.0
    p /= len(data)
    return np.concatenate([(data.features.T @ p).reshape(-1), p.sum(axis=0)])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Visiting order for one epoch, a pure function of (seed, epoch)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))
    return rng.permutation(n).astype(np.int64)


def local_train(start: ParamVector, data: LabeledDataset,
                cfg: TrainConfig) -> tuple[ParamVector, float]:
    """Run E shuffled minibatch-SGD passes from ``start``.

    Returns the trained parameters and the mean loss on ``data`` afterwards.
    Raises :class:`DivergenceError` instead of returning non-finite weights.
    """
    W0, b0 = _unpack(start, data)
    W = np.array(W0, dtype=np.float64, order="C")
    b = np.array(b0, dtype=np.float64)
    X = data.features
    y = data.labels
    for e in range(cfg.first_epoch, cfg.first_epoch + cfg.local_epochs):
        order = epoch_order(cfg.seed, e, len(data))
        with np.errstate(over="ignore", invalid="ignore"):
            _kernels.sgd_epoch(W, b, X, y, order, int(cfg.batch_size), float(cfg.learning_rate))
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise DivergenceError(f"non-finite parameters after epoch {e} "
                                  f"(lr={cfg.learning_rate}, B={cfg.batch_size})")
    out = start.with_values(np.concatenate([W.reshape(-1), b]))
    final = loss(out, data)
    if not math.isfinite(final):
        raise DivergenceError(f"non-finite loss {final} after training")
    return out, final


def predict(params: ParamVector, features: np.ndarray, num_classes: int) -> np.ndarray:
    t = params.tensors()
    W, b = t["weight"], t["bias"]
    if W.shape != (np.shape(features)[1], num_classes):
        raise DimensionError("params do not match feature dimension / class count")
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(np.asarray(features) @ W + b, axis=1)


def evaluate_accuracy(params: ParamVector, data: LabeledDataset) -> float:
    _unpack(params, data)
    return float(np.mean(predict(params, data.features, data.num_classes) == data.labels))
