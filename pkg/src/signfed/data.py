"""Dataset ingestion (IDX files), synthetic generation, label-based partitioning."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Within-class standard deviation of synthetic clusters, in pixel units.
SYNTHETIC_CLUSTER_STD = 0.1


class IdxFormatError(ValueError):
    """Malformed IDX file: bad magic, truncated payload, or count mismatch."""


@dataclass
class Dataset:
    """Examples as an (n, input_dim) matrix in [0,1] with integer labels."""

    examples: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        self.examples = np.asarray(self.examples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.examples.ndim != 2 or self.examples.shape[0] < 1:
            raise ValueError(f"examples must be a nonempty 2-D matrix, got {self.examples.shape}")
        if self.labels.shape != (self.examples.shape[0],):
            raise ValueError("need exactly one label per example")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.examples.shape[0]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.examples[indices], self.labels[indices], self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a dataset across parties by label."""

    num_parties: int
    labels_per_party: int
    seed: int

    def __post_init__(self) -> None:
        if self.num_parties < 1:
            raise ValueError(f"need at least one party, got {self.num_parties}")
        if self.labels_per_party < 1:
            raise ValueError(f"each party needs at least one label, got {self.labels_per_party}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")


def _open_maybe_gzip(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, count: int, path, what: str) -> bytes:
    blob = f.read(count)
    if len(blob) != count:
        raise IdxFormatError(f"{path}: truncated file while reading {what}")
    return blob


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair into a flat [0,1]-scaled dataset.

    The IDX layout is a 4-byte big-endian magic (0x00000803 for images,
    0x00000801 for labels) followed by big-endian dimension sizes and raw
    unsigned bytes. Images are flattened row-major to rows*cols reals and
    scaled by 1/255. Gzipped files are detected and unpacked transparently.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    with _open_maybe_gzip(images_path) as f:
        magic, n_images, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path, "header"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        raw = _read_exact(f, n_images * rows * cols, images_path, "pixel data")
        pixels = np.frombuffer(raw, dtype=np.uint8)

    with _open_maybe_gzip(labels_path) as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, labels_path, "header"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        if n_labels != n_images:
            raise IdxFormatError(
                f"label count {n_labels} does not match image count {n_images}"
            )
        labels = np.frombuffer(_read_exact(f, n_labels, labels_path, "labels"), dtype=np.uint8)

    examples = pixels.reshape(n_images, rows * cols).astype(np.float64) / 255.0
    return Dataset(examples, labels.astype(np.int64), int(labels.max()) + 1)


def synthetic_dataset(input_dim: int, num_classes: int, n: int,
                      separation: float, seed: int) -> Dataset:
    """Gaussian class clusters for fast tests without any dataset files.

    Class means sit on random directions around the mid-gray point so that
    projected onto the line between two class means they are ``separation``
    within-class standard deviations apart. separation=0 collapses all
    classes onto one cluster. Values are clamped to [0,1]. Deterministic
    per seed, with balanced class counts.
    """
    if n < num_classes:
        raise ValueError(f"need at least one example per class ({n} < {num_classes})")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    directions = rng.standard_normal((num_classes, input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = 0.5 + (separation * SYNTHETIC_CLUSTER_STD / np.sqrt(2.0)) * directions
    labels = rng.permutation(np.arange(n) % num_classes)
    examples = means[labels] + SYNTHETIC_CLUSTER_STD * rng.standard_normal((n, input_dim))
    np.clip(examples, 0.0, 1.0, out=examples)
    return Dataset(examples, labels, num_classes)


def partition_by_labels(ds: Dataset, spec: PartitionSpec,
                        rng: np.random.Generator | None = None) -> list[Dataset]:
    """Split a dataset across parties so each holds ``labels_per_party`` labels.

    Labels are assigned round-robin over a seeded random permutation,
    repeated cyclically, so all labels are covered whenever
    num_parties * labels_per_party >= num_classes. Each label's example pool
    is then shuffled and split without replacement, evenly (+-1), among the
    parties holding that label. Party shards are disjoint by construction.
    """
    if spec.labels_per_party > ds.num_classes:
        raise ValueError(
            f"labels_per_party={spec.labels_per_party} exceeds num_classes={ds.num_classes}"
        )
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed))

    n_labels = ds.num_classes
    perm = rng.permutation(n_labels)
    holders: dict[int, list[int]] = {int(label): [] for label in perm}
    for party in range(spec.num_parties):
        for j in range(spec.labels_per_party):
            label = int(perm[(party * spec.labels_per_party + j) % n_labels])
            holders[label].append(party)

    party_indices: list[list[np.ndarray]] = [[] for _ in range(spec.num_parties)]
    for label, party_ids in holders.items():
        pool = np.flatnonzero(ds.labels == label)
        pool = rng.permutation(pool)
        for party, chunk in zip(party_ids, np.array_split(pool, len(party_ids))):
            if chunk.size:
                party_indices[party].append(chunk)

    shards = []
    for party, chunks in enumerate(party_indices):
        if not chunks:
            raise ValueError(f"party {party} received no examples; dataset too small")
        shards.append(ds.subset(np.sort(np.concatenate(chunks))))
    return shards
