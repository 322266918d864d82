"""Datasets for the federated simulator: synthetic clusters, IDX (MNIST) files,
and client partitioning."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_int, check_real

__all__ = [
    "Dataset",
    "ClientShard",
    "PartitionSpec",
    "IDXFormatError",
    "IDXConsistencyError",
    "IDXTruncatedError",
    "generate_synthetic",
    "load_idx",
    "partition",
    "class_distribution",
    "total_variation",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    """Bad magic number or malformed header."""


class IDXConsistencyError(ValueError):
    """Image and label files disagree."""


class IDXTruncatedError(OSError):
    """File ended before the advertised payload."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError(
                f"labels length {labels.shape} does not match {features.shape[0]} rows"
            )
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("labels must be integer class indices")
        n_classes = check_int(self.n_classes, "n_classes", min_value=1)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError(f"labels must lie in 0..{n_classes - 1}")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class ClientShard:
    indices: np.ndarray

    def __len__(self):
        return int(self.indices.shape[0])


@dataclass(frozen=True)
class PartitionSpec:
    """``kind`` is ``"iid"`` or ``"dirichlet"``; ``alpha`` is the Dirichlet
    concentration (smaller means more skewed clients)."""

    kind: str = "iid"
    alpha: float = 0.6

    def __post_init__(self):
        if self.kind not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        check_real(self.alpha, "alpha", low=0, low_open=True)

    @classmethod
    def iid(cls) -> "PartitionSpec":
        return cls("iid")

    @classmethod
    def dirichlet(cls, alpha: float = 0.6) -> "PartitionSpec":
        return cls("dirichlet", alpha)


def generate_synthetic(d: int, classes: int, samples: int, separation: float,
                       seed: int = 0, test_samples: int | None = None, noise: float = 1.0):
    """Gaussian class clusters with isotropic noise of standard deviation ``noise``.

    When ``classes <= d`` the class means sit on a random orthogonal frame so
    every pair of means is exactly ``separation`` apart; otherwise they are
    Gaussian with expected pairwise distance ``separation``.  Difficulty is
    set by ``separation / noise``; the absolute scale only changes how fast
    gradient methods move.  Classes are balanced.  Returns ``(train, test)``;
    the test split has ``test_samples`` points (default ``samples // 4``)
    drawn from the same clusters.
    """
    d = check_int(d, "d", min_value=2)
    classes = check_int(classes, "classes", min_value=2)
    samples = check_int(samples, "samples", min_value=classes)
    check_real(separation, "separation", low=0, low_open=True)
    check_real(noise, "noise", low=0, low_open=True)
    if test_samples is None:
        test_samples = max(samples // 4, classes)
    test_samples = check_int(test_samples, "test_samples", min_value=1)
    rng = np.random.default_rng(seed)
    if classes <= d:
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        means = separation / np.sqrt(2.0) * q[:, :classes].T
    else:
        means = rng.standard_normal((classes, d)) * separation / np.sqrt(2.0 * d)

    def draw(count):
        labels = rng.permutation(np.arange(count) % classes)
        features = means[labels] + noise * rng.standard_normal((count, d))
        return Dataset(features, labels, classes)

    return draw(samples), draw(test_samples)


def _read_exact(fh, size: int, path) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise IDXTruncatedError(f"{path}: expected {size} bytes, got {len(data)}")
    return data


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_header(fh, path, magic: int, ndim: int) -> tuple[int, ...]:
    (found,) = struct.unpack(">I", _read_exact(fh, 4, path))
    if found != magic:
        raise IDXFormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack(">" + "I" * ndim, _read_exact(fh, 4 * ndim, path))


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Parse an IDX image/label pair (optionally gzipped) into a Dataset.

    Pixels are scaled to ``[0, 1]`` and flattened to rows.
    """
    with _open(images_path) as fh:
        count, rows, cols = _read_header(fh, images_path, IMAGES_MAGIC, 3)
        pixels = _read_exact(fh, count * rows * cols, images_path)
    with _open(labels_path) as fh:
        (n_labels,) = _read_header(fh, labels_path, LABELS_MAGIC, 1)
        if n_labels != count:
            raise IDXConsistencyError(
                f"{labels_path}: {n_labels} labels for {count} images in {images_path}"
            )
        raw_labels = _read_exact(fh, n_labels, labels_path)
    features = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows * cols) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= n_classes:
        raise IDXConsistencyError(f"{labels_path}: label {labels.max()} >= {n_classes}")
    return Dataset(features, labels, n_classes)


def _largest_remainder(target: np.ndarray, total: int) -> np.ndarray:
    base = np.floor(target).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(target - base), kind="stable")
        base[order[:short]] += 1
    return base


def _sinkhorn(weights: np.ndarray, rows: np.ndarray, cols: np.ndarray,
              iters: int = 500) -> np.ndarray:
    mat = weights.copy()
    for _ in range(iters):
        mat *= (rows / mat.sum(axis=1))[:, None]
        col_sums = mat.sum(axis=0)
        mat *= np.divide(cols, col_sums, out=np.zeros_like(cols), where=col_sums > 0)
        if np.allclose(mat.sum(axis=1), rows, rtol=1e-10, atol=1e-9):
            break
    return mat


def _dirichlet_counts(labels: np.ndarray, n_classes: int, sizes: np.ndarray,
                      alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Integer client-by-class counts with exact row sums ``sizes`` and
    column sums equal to the class counts."""
    n = sizes.shape[0]
    class_counts = np.bincount(labels, minlength=n_classes).astype(float)
    present = class_counts > 0
    props = rng.gamma(alpha, 1.0, size=(n, n_classes))
    props[:, ~present] = 0.0
    props /= props.sum(axis=1, keepdims=True)
    # floor keeps Sinkhorn well-posed when a draw underflows to zero
    props = np.where(present, np.maximum(props, 1e-12), 0.0)
    target = _sinkhorn(props, sizes.astype(float), class_counts)
    counts = np.stack([_largest_remainder(target[i], int(sizes[i])) for i in range(n)])

    # repair: move units within a client from over-assigned to under-assigned classes
    excess = counts.sum(axis=0) - class_counts.astype(np.int64)
    while np.any(excess != 0):
        over = int(np.argmax(excess))
        under = int(np.argmin(excess))
        slack = target[:, under] - counts[:, under] - (target[:, over] - counts[:, over])
        slack[counts[:, over] == 0] = -np.inf
        i = int(np.argmax(slack))
        counts[i, over] -= 1
        counts[i, under] += 1
        excess[over] -= 1
        excess[under] += 1
    return counts


def partition(dataset: Dataset, spec: PartitionSpec, n: int, seed: int = 0) -> list[ClientShard]:
    """Split ``dataset`` into ``n`` disjoint shards whose sizes differ by at most one.

    ``iid`` shuffles and deals.  ``dirichlet`` draws each client's class
    mixture from ``Dirichlet(alpha)``, rescales the mixtures so the shard and
    class totals both match (Sinkhorn), rounds by largest remainder and
    repairs the class totals; proportions are therefore approximate while
    shard sizes stay equal.
    """
    n = check_int(n, "n", min_value=1)
    total = len(dataset)
    if n > total:
        raise ValueError(f"cannot split {total} samples across {n} clients")
    rng = np.random.default_rng(seed)
    sizes = np.array([len(a) for a in np.array_split(np.arange(total), n)], dtype=np.int64)
    if spec.kind == "iid":
        perm = rng.permutation(total)
        bounds = np.concatenate(([0], np.cumsum(sizes)))
        return [ClientShard(np.sort(perm[bounds[i]:bounds[i + 1]])) for i in range(n)]

    # shuffle sizes so the +1 clients are not always the first ones
    sizes = rng.permutation(sizes)
    counts = _dirichlet_counts(dataset.labels, dataset.n_classes, sizes, spec.alpha, rng)
    shards = [[] for _ in range(n)]
    for c in range(dataset.n_classes):
        pool = rng.permutation(np.flatnonzero(dataset.labels == c))
        start = 0
        for i in range(n):
            take = int(counts[i, c])
            shards[i].append(pool[start:start + take])
            start += take
    return [ClientShard(np.sort(np.concatenate(parts))) for parts in shards]


def class_distribution(dataset: Dataset, indices=None) -> np.ndarray:
    labels = dataset.labels if indices is None else dataset.labels[indices]
    counts = np.bincount(labels, minlength=dataset.n_classes).astype(float)
    return counts / max(counts.sum(), 1.0)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
