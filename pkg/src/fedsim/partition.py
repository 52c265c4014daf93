"""Synthetic data and IID / label-skew splits across clients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import LabeledDataset

# Training instance counts per class (Caries, Ulcer, Tooth Discoloration, Gingivitis).
DENTAL_CLASS_COUNTS = (2051, 364, 315, 653)
DENTAL_CLASS_NAMES = ("Caries", "Ulcer", "Tooth Discoloration", "Gingivitis")
DENTAL_CLASS_WEIGHTS = tuple(c / sum(DENTAL_CLASS_COUNTS) for c in DENTAL_CLASS_COUNTS)

FEATURE_DIM = 8
# distance of each class mean from the origin along its own axis
BLOB_SCALE = 2.0


@dataclass(frozen=True)
class Shard:
    client_id: int
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    num_clients: int = 5
    shards_per_client: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("iid", "label_skew"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.shards_per_client < 1:
            raise ValueError("shards_per_client must be >= 1")


def class_means(num_classes: int, dim: int = FEATURE_DIM, scale: float = BLOB_SCALE) -> np.ndarray:
    """Blob centres: class c sits at ``scale`` along axis ``c mod dim``.

    Classes beyond ``dim`` reuse an axis at a larger radius so means stay distinct.
    """
    means = np.zeros((num_classes, dim))
    for c in range(num_classes):
        means[c, c % dim] = scale * (1 + c // dim)
    return means


def synth_dataset(n: int, num_classes: int = 4, class_weights=None, seed: int = 0,
                  dim: int = FEATURE_DIM, scale: float = BLOB_SCALE,
                  exact: bool = False) -> LabeledDataset:
    """Gaussian blobs with unit variance, one per class.

    Labels are drawn i.i.d. from ``class_weights`` (uniform when omitted). With
    ``exact`` the class counts are fixed by largest-remainder rounding of
    ``n * weights`` and only their order is random.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    if class_weights is None:
        w = np.full(num_classes, 1.0 / num_classes)
    else:
        w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (num_classes,):
        raise ValueError(f"class_weights must have length {num_classes}")
    if np.any(w < 0) or not np.all(np.isfinite(w)) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("class_weights must be a probability vector")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    if exact:
        labels = rng.permutation(np.repeat(np.arange(num_classes), exact_counts(n, w)))
    else:
        labels = rng.choice(num_classes, size=n, p=w / w.sum())
    X = class_means(num_classes, dim, scale)[labels] + rng.standard_normal((n, dim))
    return LabeledDataset(X, labels, num_classes)


def exact_counts(n: int, weights) -> np.ndarray:
    """Integer counts summing to n, closest to n * weights (ties to lower index)."""
    w = np.asarray(weights, dtype=np.float64)
    raw = n * w / w.sum()
    counts = np.floor(raw).astype(np.int64)
    short = n - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def partition_iid(data: LabeledDataset, num_clients: int, seed: int = 0) -> list[Shard]:
    n = len(data)
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if n < num_clients:
        raise ValueError(f"cannot split {n} samples across {num_clients} clients")
    perm = np.random.default_rng(np.random.SeedSequence(int(seed))).permutation(n)
    return [Shard(k, np.sort(chunk).astype(np.int64))
            for k, chunk in enumerate(np.array_split(perm, num_clients))]


def partition_label_skew(data: LabeledDataset, num_clients: int, shards_per_client: int,
                         seed: int = 0) -> list[Shard]:
    """Sort by label, cut into equal contiguous pieces, deal them out at random."""
    n = len(data)
    total = num_clients * shards_per_client
    if num_clients < 1 or shards_per_client < 1:
        raise ValueError("num_clients and shards_per_client must be >= 1")
    if total > n:
        raise ValueError(f"{total} shards requested but only {n} samples")
    by_label = np.argsort(data.labels, kind="stable")
    pieces = np.array_split(by_label, total)
    deal = np.random.default_rng(np.random.SeedSequence(int(seed))).permutation(total)
    shards = []
    for k in range(num_clients):
        mine = deal[k * shards_per_client:(k + 1) * shards_per_client]
        idx = np.concatenate([pieces[p] for p in mine])
        shards.append(Shard(k, np.sort(idx).astype(np.int64)))
    return shards


def make_partition(data: LabeledDataset, spec: PartitionSpec) -> list[Shard]:
    if spec.mode == "iid":
        return partition_iid(data, spec.num_clients, spec.seed)
    return partition_label_skew(data, spec.num_clients, spec.shards_per_client, spec.seed)


def shard_stats(data: LabeledDataset, shards: Sequence[Shard]) -> np.ndarray:
    """Class histogram per shard, shape (len(shards), num_classes)."""
    out = np.zeros((len(shards), data.num_classes), dtype=np.int64)
    for row, shard in enumerate(shards):
        idx = np.asarray(shard.indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(data)):
            raise IndexError(f"shard {shard.client_id} indexes outside the dataset")
        out[row] = np.bincount(data.labels[idx], minlength=data.num_classes)
    return out


def label_entropy(hist: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each histogram row."""
    hist = np.asarray(hist, dtype=np.float64)
    out = np.zeros(hist.shape[0])
    for i, row in enumerate(hist):
        p = row[row > 0] / row.sum()
        out[i] = -float(np.sum(p * np.log(p)))
    return out


def check_disjoint_cover(shards: Sequence[Shard], n: int) -> bool:
    seen = np.concatenate([s.indices for s in shards]) if shards else np.array([], np.int64)
    return seen.size == n and np.array_equal(np.sort(seen), np.arange(n)) and \
        all(len(s) > 0 for s in shards)

