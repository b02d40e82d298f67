"""Datasets: synthetic Gaussian clusters, IDX (MNIST) ingestion, client partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

# refuse headers that would describe more than 2^31 payload bytes
_MAX_IDX_ELEMENTS = 1 << 31


class IdxParseError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (inputs.shape[0],):
            raise ValueError("inputs and labels disagree on sample count")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.class_count)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))


@dataclass(frozen=True)
class ClientShard:
    owner: int
    indices: np.ndarray
    classes: frozenset

    def __len__(self) -> int:
        return self.indices.size


def synth_logistic(n: int, p: int, C: int, separation: float, seed: int) -> Dataset:
    """C unit-covariance Gaussian clusters whose means sit ``separation`` apart.

    With C <= p the means are (separation / sqrt 2) * e_c, so every pair is
    ``separation`` apart; otherwise they are spaced ``separation`` apart along
    the first axis.
    """
    if C < 2 or n < C or p < 1:
        raise ValueError(f"need n >= C >= 2 and p >= 1, got n={n}, p={p}, C={C}")
    rng = np.random.default_rng(seed)
    means = np.zeros((C, p))
    if C <= p:
        means[np.arange(C), np.arange(C)] = separation / np.sqrt(2.0)
    else:
        means[:, 0] = separation * np.arange(C)
    labels = rng.permutation(np.arange(n) % C)
    inputs = means[labels] + rng.standard_normal((n, p))
    return Dataset(inputs, labels, C)


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX image (n x rows*cols, scaled to [0, 1]) or label file."""
    if len(data) < 4:
        raise IdxParseError("truncated IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise IdxParseError(f"unknown IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxParseError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = 1
    for dim in dims:
        count *= dim
        if count > _MAX_IDX_ELEMENTS:
            raise IdxParseError(f"IDX dimensions {dims} overflow the element limit")
    payload = data[header:]
    if len(payload) < count:
        raise IdxParseError(f"truncated IDX payload: expected {count} bytes, got {len(payload)}")
    if len(payload) > count:
        raise IdxParseError(f"IDX payload has {len(payload) - count} trailing bytes")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if magic == IDX_IMAGES:
        return arr.reshape(dims[0], dims[1] * dims[2]).astype(np.float64) / 255.0
    return arr.astype(np.int64)


def load_idx_dataset(images_path, labels_path, class_count: int = 10) -> Dataset:
    images = parse_idx(Path(images_path).read_bytes())
    labels = parse_idx(Path(labels_path).read_bytes())
    if images.ndim != 2 or labels.ndim != 1:
        raise IdxParseError("expected an image file and a label file")
    if images.shape[0] != labels.size:
        raise IdxParseError(f"{images.shape[0]} images but {labels.size} labels")
    return Dataset(images, labels, class_count)


def _shard(owner, indices, labels):
    indices = np.sort(np.asarray(indices, dtype=np.int64))
    return ClientShard(owner, indices, frozenset(int(c) for c in np.unique(labels[indices])))


def partition(dataset: Dataset, N: int, mode: str = "iid", seed: int = 0) -> list[ClientShard]:
    """Split ``dataset`` into N disjoint client shards.

    ``iid`` shuffles and splits evenly. ``two_class`` cuts each class into
    class-pure slices (2N in total), orders them by label, and gives client i
    slices i and i + N, so no client ever holds more than two labels.
    """
    n = len(dataset)
    if N < 1:
        raise ValueError("need at least one client")
    if N > n:
        raise ValueError(f"cannot split {n} samples over {N} clients")
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    if mode == "iid":
        parts = np.array_split(rng.permutation(n), N)
        return [_shard(i, part, labels) for i, part in enumerate(parts)]
    if mode != "two_class":
        raise ValueError(f"unknown partition mode {mode!r}")

    n_slices = 2 * N
    if n_slices > n:
        raise ValueError(f"two_class needs at least {n_slices} samples for {N} clients")
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size > n_slices:
        raise ValueError(
            f"{classes.size} classes cannot be covered by {n_slices} class-pure slices"
        )
    alloc = _allocate_slices(counts, n_slices)
    slices = []
    for c, k in zip(classes, alloc):
        members = rng.permutation(np.flatnonzero(labels == c))
        slices.extend(np.array_split(members, k))
    owners = rng.permutation(N)
    shards = [None] * N
    for pos in range(N):
        i = int(owners[pos])
        shards[i] = _shard(i, np.concatenate([slices[pos], slices[pos + N]]), labels)
    return shards


def _allocate_slices(counts: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder split of ``total`` slices, at least one per class and
    never more slices than a class has samples."""
    k = len(counts)
    alloc = np.ones(k, dtype=np.int64)
    spare = total - k
    if spare:
        share = counts / counts.sum() * total - 1
        extra = np.floor(np.clip(share, 0, None)).astype(np.int64)
        extra = np.minimum(extra, counts - 1)
        while extra.sum() > spare:
            extra[np.argmax(extra)] -= 1
        alloc += extra
        rem = share - extra
        while alloc.sum() < total:
            room = alloc < counts
            if not room.any():
                raise ValueError("not enough samples for the requested slices")
            j = int(np.argmax(np.where(room, rem, -np.inf)))
            alloc[j] += 1
            rem[j] -= 1
    return alloc
