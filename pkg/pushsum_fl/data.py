"""
Datasets and client partitions.

- make_synthetic: Gaussian blobs on a regular simplex, stratified 80/20 split
- load_idx / write_idx: the MNIST IDX container (raw or gzip)
- dirichlet_partition: per-class Dir(alpha) proportions over clients
"""

from __future__ import annotations

import gzip
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import numpy.typing as npt

from pushsum_fl.config import MAX_PARTITION_RETRIES, TRAIN_FRACTION
from pushsum_fl.errors import (
    BadMagicError,
    CountMismatchError,
    EmptyDatasetError,
    PartitionError,
    TruncatedFileError,
)
from pushsum_fl.vecmath import SeededRng, Stream

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

Split = Literal["train", "test"]


@dataclass(frozen=True, slots=True)
class Dataset:
    features: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int64]
    n_classes: int
    split: Split = "train"

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must have one entry per feature row")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.n_classes
        ):
            raise ValueError(f"labels outside [0, {self.n_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("feature rows must be finite")

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def class_counts(self) -> npt.NDArray[np.int64]:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True, slots=True)
class Partition:
    """client_shards[i] holds sorted indices into the train split."""

    client_shards: tuple[npt.NDArray[np.int64], ...]
    alpha: Optional[float]  # None means IID

    @property
    def n_clients(self) -> int:
        return len(self.client_shards)

    @property
    def iid(self) -> bool:
        return self.alpha is None

    def sizes(self) -> list[int]:
        return [int(s.size) for s in self.client_shards]

    def histograms(self, labels: npt.NDArray[np.int64], n_classes: int) -> np.ndarray:
        return np.stack(
            [np.bincount(labels[s], minlength=n_classes) for s in self.client_shards]
        )


# ======================================================================
# SYNTHETIC BLOBS
# ======================================================================


def _simplex_means(classes: int, d: int, sep: float, gen: np.random.Generator) -> np.ndarray:
    if d >= classes - 1:
        centered = np.eye(classes) - 1.0 / classes
        _, _, vt = np.linalg.svd(centered)
        coords = centered @ vt[: classes - 1].T  # pairwise distance sqrt(2)
        means = np.zeros((classes, d))
        means[:, : classes - 1] = coords * (sep / math.sqrt(2.0))
        return means
    # not enough room for a regular simplex: random directions at radius sep/2
    dirs = gen.standard_normal((classes, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * (sep / 2.0)


def make_synthetic(
    classes: int,
    per_class: int,
    d: int,
    sep: float,
    rng: SeededRng,
) -> tuple[Dataset, Dataset]:
    """Returns (train, test)."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1:
        raise ValueError("need at least 1 sample per class")
    if not sep > 0:
        raise ValueError("class separation must be positive")

    gen = rng.stream(Stream.DATA)
    means = _simplex_means(classes, d, sep, gen)
    n_train_c = max(1, int(per_class * TRAIN_FRACTION + 1e-9))

    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(classes):
        pts = means[c] + gen.standard_normal((per_class, d))
        train_x.append(pts[:n_train_c])
        test_x.append(pts[n_train_c:])
        train_y.append(np.full(n_train_c, c, dtype=np.int64))
        test_y.append(np.full(per_class - n_train_c, c, dtype=np.int64))

    def build(xs: list, ys: list, split: Split) -> Dataset:
        x = np.concatenate(xs).astype(np.float64)
        y = np.concatenate(ys)
        order = gen.permutation(y.size)
        return Dataset(features=x[order], labels=y[order], n_classes=classes, split=split)

    return build(train_x, train_y, "train"), build(test_x, test_y, "test")


def make_quadratic(
    n_clients: int,
    per_client: int,
    d: int,
    spread: float,
    rng: SeededRng,
) -> tuple[Dataset, Partition]:
    """
    Centres for quadratic objectives. Client i owns `per_client` rows drawn
    around its own mean; labels are unused (single class).
    """
    gen = rng.stream(Stream.DATA)
    client_means = gen.normal(scale=spread, size=(n_clients, d))
    rows = [m + 0.1 * spread * gen.standard_normal((per_client, d)) for m in client_means]
    features = np.concatenate(rows).astype(np.float64)
    ds = Dataset(
        features=features,
        labels=np.zeros(features.shape[0], dtype=np.int64),
        n_classes=1,
        split="train",
    )
    shards = tuple(
        np.arange(i * per_client, (i + 1) * per_client, dtype=np.int64)
        for i in range(n_clients)
    )
    return ds, Partition(client_shards=shards, alpha=None)


# ======================================================================
# IDX
# ======================================================================


def _read_bytes(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def read_idx_array(path: Path, expected_magic: int) -> npt.NDArray[np.uint8]:
    path = Path(path)
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise TruncatedFileError(path, 4, len(buf))
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise BadMagicError(path, expected_magic, magic)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise TruncatedFileError(path, header, len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    need = header + int(np.prod(dims, dtype=np.int64))
    if len(buf) < need:
        raise TruncatedFileError(path, need, len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need - header, offset=header).reshape(dims)


def load_idx(
    images_path: Path,
    labels_path: Path,
    limit: int,
    *,
    n_classes: int = 10,
    split: Split = "train",
) -> Dataset:
    """First `limit` samples, pixels scaled to [0, 1]."""
    if limit <= 0:
        raise EmptyDatasetError(f"limit must select at least one sample, got {limit}")
    images = read_idx_array(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx_array(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(Path(labels_path), images.shape[0], labels.shape[0])
    if images.shape[0] == 0:
        raise EmptyDatasetError(f"{images_path} holds no samples")

    n = min(limit, images.shape[0])
    features = images[:n].reshape(n, -1).astype(np.float64) / 255.0
    logger.debug("loaded %d samples from %s", n, images_path)
    return Dataset(
        features=features,
        labels=labels[:n].astype(np.int64),
        n_classes=n_classes,
        split=split,
    )


def write_idx(
    images_path: Path,
    labels_path: Path,
    images: npt.NDArray[np.uint8],
    labels: npt.NDArray[np.uint8],
) -> None:
    """Writes an IDX pair (gzip when the suffix is .gz)."""

    def dump(path: Path, magic: int, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        head = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
        payload = head + arr.tobytes()
        path = Path(path)
        if path.suffix == ".gz":
            payload = gzip.compress(payload, mtime=0)
        path.write_bytes(payload)

    dump(images_path, IDX_IMAGES_MAGIC, images)
    dump(labels_path, IDX_LABELS_MAGIC, labels)


# ======================================================================
# PARTITIONING
# ======================================================================


def largest_remainder(proportions: np.ndarray, total: int) -> npt.NDArray[np.int64]:
    """Integer counts summing exactly to `total`."""
    exact = proportions * total
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        frac = exact - counts
        order = np.argsort(-frac, kind="stable")
        counts[order[:short]] += 1
    return counts


def _iid_counts(n_clients: int, total: int, offset: int) -> npt.NDArray[np.int64]:
    counts = np.full(n_clients, total // n_clients, dtype=np.int64)
    extra = total % n_clients
    counts[(offset + np.arange(extra)) % n_clients] += 1
    return counts


def _assign(
    class_indices: list[np.ndarray],
    counts_per_class: list[np.ndarray],
    n_clients: int,
) -> list[list[np.ndarray]]:
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for idx, counts in zip(class_indices, counts_per_class):
        cuts = np.cumsum(counts)[:-1]
        for i, part in enumerate(np.split(idx, cuts)):
            buckets[i].append(part)
    return buckets


def dirichlet_partition(
    ds: Dataset,
    n_clients: int,
    alpha: Optional[float],
    rng: SeededRng,
) -> Partition:
    """
    Per class, proportions ~ Dir(alpha) over clients, turned into integer
    counts by largest-remainder rounding. alpha=None (or inf) is the IID split.
    A draw leaving any client empty is discarded and redrawn.
    """
    if n_clients < 1:
        raise ValueError("need at least one client")
    if alpha is not None and math.isinf(alpha):
        alpha = None
    if alpha is not None and not alpha > 0:
        raise ValueError(f"dirichlet alpha must be positive, got {alpha}")

    counts = ds.class_counts()
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise PartitionError(f"classes {missing} have no samples to assign")

    for attempt in range(MAX_PARTITION_RETRIES):
        gen = rng.stream(Stream.PARTITION, iteration=attempt)
        class_indices = [gen.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.n_classes)]

        if alpha is None:
            offsets = np.concatenate([[0], np.cumsum(counts % n_clients)])
            per_class = [
                _iid_counts(n_clients, int(counts[c]), int(offsets[c]))
                for c in range(ds.n_classes)
            ]
        else:
            props = gen.dirichlet(np.full(n_clients, alpha), size=ds.n_classes)
            if not np.all(np.isfinite(props)):
                continue
            per_class = [largest_remainder(props[c], int(counts[c])) for c in range(ds.n_classes)]

        buckets = _assign(class_indices, per_class, n_clients)
        shards = tuple(np.sort(np.concatenate(b)).astype(np.int64) for b in buckets)
        if all(s.size > 0 for s in shards):
            if attempt:
                logger.debug("partition accepted after %d redraws", attempt)
            return Partition(client_shards=shards, alpha=alpha)

    raise PartitionError(
        f"could not give every one of {n_clients} clients a sample in "
        f"{MAX_PARTITION_RETRIES} draws; use a larger dataset or a larger alpha"
    )


def label_entropy(partition: Partition, labels: npt.NDArray[np.int64], n_classes: int) -> np.ndarray:
    """Per-client entropy (nats) of the local label distribution."""
    hist = partition.histograms(labels, n_classes).astype(np.float64)
    p = hist / hist.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=1)


def mean_label_entropy(partition: Partition, labels: npt.NDArray[np.int64], n_classes: int) -> float:
    return float(label_entropy(partition, labels, n_classes).mean())
