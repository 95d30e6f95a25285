"""Datasets, IDX I/O, Dirichlet non-IID partitioning and proxy sampling."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError
from .nn import Batch

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
TRAIN_FRACTION = 0.8


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if inputs.ndim != 2 or inputs.shape[0] != labels.size:
            raise DomainError(f"inputs {inputs.shape} and labels ({labels.size},) disagree")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DomainError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes)

    def as_batch(self) -> Batch:
        return Batch(self.inputs, self.labels)

    @classmethod
    def concat(cls, parts: list[Dataset], num_classes: int, d: int) -> Dataset:
        if not parts:
            return cls(np.zeros((0, d)), np.zeros(0, dtype=np.int64), num_classes)
        return cls(np.concatenate([p.inputs for p in parts]),
                   np.concatenate([p.labels for p in parts]), num_classes)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    train: Dataset
    test: Dataset
    train_indices: np.ndarray
    test_indices: np.ndarray


@dataclass(frozen=True)
class PartitionPlan:
    alpha: float
    proportions: np.ndarray  # (K, M), rows are the clients' class distributions q_k
    assignment: np.ndarray  # client index of every source example


@dataclass(frozen=True)
class ProxyDataset:
    data: Dataset
    fraction: float
    indices: np.ndarray

    def __len__(self) -> int:
        return self.data.n


# -- IDX ---------------------------------------------------------------------

def _read_header(buf: bytes, magic: int, ndims: int, what: str) -> tuple[int, ...]:
    header_len = 4 + 4 * ndims
    if len(buf) < header_len:
        raise FormatError(f"{what} file truncated inside header", len(buf))
    found = struct.unpack(">I", buf[:4])[0]
    if found != magic:
        raise FormatError(f"{what} file has magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    return struct.unpack(f">{ndims}I", buf[4:header_len])


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair, scaling pixels into [0, 1].

    ``num_classes`` defaults to ``max(label) + 1``.
    """
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    n_img, rows, cols = _read_header(img, IMAGES_MAGIC, 3, "images")
    (n_lab,) = _read_header(lab, LABELS_MAGIC, 1, "labels")
    d = rows * cols
    if len(img) - 16 < n_img * d:
        raise FormatError(f"images file holds {len(img) - 16} pixel bytes, header promises {n_img * d}",
                          len(img))
    if len(lab) - 8 < n_lab:
        raise FormatError(f"labels file holds {len(lab) - 8} label bytes, header promises {n_lab}",
                          len(lab))
    if n_img != n_lab:
        raise FormatError(f"image count {n_img} does not match label count {n_lab}", 4)
    pixels = np.frombuffer(img, dtype=np.uint8, count=n_img * d, offset=16).reshape(n_img, d)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n_lab, offset=8).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(pixels / 255.0, labels, num_classes)


def write_idx(data: Dataset, images_path, labels_path, image_shape: tuple[int, int] | None = None) -> None:
    """Write ``data`` as an IDX pair; pixels are quantized to bytes."""
    rows, cols = image_shape or (1, data.d)
    if rows * cols != data.d:
        raise DomainError(f"image shape {rows}x{cols} does not hold {data.d} features")
    if data.num_classes > 256:
        raise DomainError("IDX labels are single bytes")
    pixels = np.clip(np.rint(data.inputs * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IMAGES_MAGIC, data.n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", LABELS_MAGIC, data.n))
        f.write(data.labels.astype(np.uint8).tobytes())


# -- synthetic data ----------------------------------------------------------

def gen_synthetic(n: int, d: int, num_classes: int, seed: int, noise: float = 0.1) -> Dataset:
    """Gaussian blobs around uniform random centroids, clipped into [0, 1].

    Class sizes differ by at most one.
    """
    if n < 1 or d < 1 or num_classes < 1:
        raise DomainError("n, d and num_classes must be positive")
    rng = np.random.default_rng(seed)
    centroids = rng.uniform(0.0, 1.0, size=(num_classes, d))
    labels = rng.permutation(np.arange(n) % num_classes)
    inputs = centroids[labels] + noise * rng.standard_normal((n, d))
    return Dataset(np.clip(inputs, 0.0, 1.0), labels, num_classes)


# -- partitioning ------------------------------------------------------------

def largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Split ``total`` into integers proportional to ``weights``; sums exactly to ``total``."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.sum() <= 0:
        weights = np.ones_like(weights)
    quotas = total * weights / weights.sum()
    counts = np.floor(quotas).astype(np.int64)
    short = total - counts.sum()
    # stable sort so equal remainders favour the lower index
    order = np.argsort(-(quotas - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _dirichlet_rows(rng, alpha: float, k: int, m: int) -> np.ndarray:
    if math.isinf(alpha):
        return np.full((k, m), 1.0 / m)
    q = rng.dirichlet(np.full(m, alpha), size=k)
    bad = ~np.all(np.isfinite(q), axis=1)
    q[bad] = 1.0 / m
    return q


def class_histogram(data: Dataset) -> np.ndarray:
    return np.bincount(data.labels, minlength=data.num_classes)


def dirichlet_partition(data: Dataset, num_clients: int, alpha: float, seed: int
                        ) -> tuple[PartitionPlan, list[ClientShard]]:
    """Assign every example to one client with Dirichlet(alpha) class skew.

    Each class's examples are shared among clients in proportion to the
    clients' weight for that class. ``alpha=inf`` deals each class out
    round-robin, giving near-identical client distributions.
    """
    if num_clients < 1:
        raise DomainError("need at least one client")
    if num_clients > data.n:
        raise DomainError(f"{num_clients} clients but only {data.n} examples")
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    m = data.num_classes
    q = _dirichlet_rows(rng, alpha, num_clients, m)
    assignment = np.empty(data.n, dtype=np.int64)
    dealt = 0
    for c in range(m):
        pool = rng.permutation(np.flatnonzero(data.labels == c))
        if math.isinf(alpha):
            # rotate the starting client per class so client sizes stay balanced
            assignment[pool] = (dealt + np.arange(pool.size)) % num_clients
            dealt += pool.size
            continue
        counts = largest_remainder(pool.size, q[:, c])
        assignment[pool] = np.repeat(np.arange(num_clients), counts)

    shards = []
    for k in range(num_clients):
        idx = rng.permutation(np.flatnonzero(assignment == k))
        n_train = round_half_up(TRAIN_FRACTION * idx.size)
        if idx.size >= 2:
            n_train = min(max(n_train, 1), idx.size - 1)
        train_idx, test_idx = np.sort(idx[:n_train]), np.sort(idx[n_train:])
        shards.append(ClientShard(k, data.subset(train_idx), data.subset(test_idx), train_idx, test_idx))
    return PartitionPlan(float(alpha), q, assignment), shards


def sample_proxy(data: Dataset, fraction: float, seed: int) -> ProxyDataset:
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"proxy fraction must lie in (0, 1], got {fraction}")
    if data.n == 0:
        raise DomainError("cannot sample a proxy from an empty dataset")
    size = max(1, round_half_up(fraction * data.n))
    idx = np.random.default_rng(seed).choice(data.n, size=size, replace=False)
    return ProxyDataset(data.subset(idx), float(fraction), idx)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def client_distributions(shards: list[ClientShard], num_classes: int) -> np.ndarray:
    """Empirical class distribution of each client's full (train + test) data."""
    out = np.zeros((len(shards), num_classes))
    for i, s in enumerate(shards):
        h = class_histogram(s.train) + class_histogram(s.test)
        if h.sum():
            out[i] = h / h.sum()
    return out


def mean_pairwise_tv(dists: np.ndarray) -> float:
    k = len(dists)
    if k < 2:
        return 0.0
    vals = [total_variation(dists[i], dists[j]) for i in range(k) for j in range(i + 1, k)]
    return float(np.mean(vals))
