"""Dataset ingestion and device-shard provisioning.

Covers the IDX binary image/label format (gzip transparently supported), the
CIFAR-10 binary batch format, a synthetic clustered-label generator for desk
scale runs, and the heterogeneous single-label partitioning used by the
non-IID experiments.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, IdxParseError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixels


@dataclass
class LabeledDataset:
    """Flat feature vectors with integer labels."""

    features: np.ndarray  # (D, d) float64
    labels: np.ndarray    # (D,) int64

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise DataError("features must be (D, d) and labels (D,)")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"count mismatch: {self.features.shape[0]} feature rows vs "
                f"{self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


@dataclass
class DatasetShard:
    """One device's private slice of the data."""

    device_id: int
    features: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return self.features.shape[0]


def _open_maybe_gzip(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_be32(fh, field: str) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise IdxParseError(f"truncated IDX file while reading {field}")
    return struct.unpack(">i", raw)[0]


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into a uint8 array of shape (count, rows, cols)."""
    with _open_maybe_gzip(path) as fh:
        magic = _read_be32(fh, "magic")
        if magic != IDX_IMAGE_MAGIC:
            raise IdxParseError(
                f"bad magic in image file: expected {IDX_IMAGE_MAGIC:#010x}, got {magic:#010x}"
            )
        count = _read_be32(fh, "count")
        rows = _read_be32(fh, "rows")
        cols = _read_be32(fh, "cols")
        if min(count, rows, cols) < 0:
            raise IdxParseError("negative header field in image file")
        raw = fh.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise IdxParseError(
                f"truncated pixel data: expected {count * rows * cols} bytes, got {len(raw)}"
            )
        return np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    """Read an IDX label file into a uint8 array of shape (count,)."""
    with _open_maybe_gzip(path) as fh:
        magic = _read_be32(fh, "magic")
        if magic != IDX_LABEL_MAGIC:
            raise IdxParseError(
                f"bad magic in label file: expected {IDX_LABEL_MAGIC:#010x}, got {magic:#010x}"
            )
        count = _read_be32(fh, "count")
        if count < 0:
            raise IdxParseError("negative count in label file")
        raw = fh.read(count)
        if len(raw) != count:
            raise IdxParseError(
                f"truncated label data: expected {count} bytes, got {len(raw)}"
            )
        return np.frombuffer(raw, dtype=np.uint8).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise DataError("images must have shape (count, rows, cols)")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise DataError("labels must be one-dimensional")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_idx_dataset(images_path, labels_path) -> LabeledDataset:
    """Load paired IDX files; pixels are flattened and scaled to [0, 1]."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxParseError(
            f"count mismatch between files: {images.shape[0]} images vs "
            f"{labels.shape[0]} labels"
        )
    flat = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return LabeledDataset(features=flat, labels=labels.astype(np.int64))


def load_cifar10_batches(paths: Sequence) -> LabeledDataset:
    """Load CIFAR-10 binary batches; pixels are flattened and scaled to [0, 1]."""
    feats, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise DataError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(records[:, 0].astype(np.int64))
        feats.append(records[:, 1:].astype(float) / 255.0)
    if not feats:
        raise DataError("no CIFAR batch files given")
    return LabeledDataset(np.concatenate(feats), np.concatenate(labels))


def make_clustered_dataset(
    num_classes: int,
    dim: int,
    per_class: int,
    rng: np.random.Generator,
    *,
    spread: float = 3.0,
    noise: float = 1.0,
) -> LabeledDataset:
    """Gaussian blobs, one per class; a quick stand-in for real image data."""
    if num_classes < 2 or per_class < 1 or dim < 1:
        raise DataError("need num_classes >= 2, per_class >= 1, dim >= 1")
    centers = rng.normal(size=(num_classes, dim))
    centers *= spread / np.linalg.norm(centers, axis=1, keepdims=True)
    feats = np.concatenate(
        [c + noise * rng.normal(size=(per_class, dim)) for c in centers]
    )
    labels = np.repeat(np.arange(num_classes), per_class)
    return LabeledDataset(feats, labels)


def partition_single_label(
    dataset: LabeledDataset,
    num_devices: int,
    per_device: int,
    rng: np.random.Generator,
    *,
    max_retries: int = 20,
) -> list[DatasetShard]:
    """Give every device ``per_device`` samples of one randomly chosen label.

    Labels are drawn uniformly per device; samples are drawn without
    replacement across the whole partition. If the chosen label runs out of
    samples the label is redrawn up to ``max_retries`` times before failing.
    """
    if len(dataset) < num_devices * per_device:
        raise DataError(
            f"dataset has {len(dataset)} samples, need {num_devices * per_device}"
        )
    label_values = np.unique(dataset.labels)
    pools = {}
    for lab in label_values:
        idx = np.flatnonzero(dataset.labels == lab)
        pools[int(lab)] = list(rng.permutation(idx))

    shards = []
    for dev in range(num_devices):
        chosen = None
        for _ in range(max_retries):
            lab = int(rng.choice(label_values))
            if len(pools[lab]) >= per_device:
                chosen = lab
                break
        if chosen is None:
            raise DataError(
                f"could not find a label with {per_device} remaining samples "
                f"for device {dev} after {max_retries} draws"
            )
        take = [pools[chosen].pop() for _ in range(per_device)]
        shards.append(
            DatasetShard(
                device_id=dev,
                features=dataset.features[take].copy(),
                labels=dataset.labels[take].copy(),
            )
        )
    return shards


def partition_iid(
    dataset: LabeledDataset,
    num_devices: int,
    per_device: int,
    rng: np.random.Generator,
) -> list[DatasetShard]:
    """Disjoint uniform shards, label-agnostic."""
    need = num_devices * per_device
    if len(dataset) < need:
        raise DataError(f"dataset has {len(dataset)} samples, need {need}")
    order = rng.permutation(len(dataset))[:need]
    shards = []
    for dev in range(num_devices):
        take = order[dev * per_device: (dev + 1) * per_device]
        shards.append(
            DatasetShard(
                device_id=dev,
                features=dataset.features[take].copy(),
                labels=dataset.labels[take].copy(),
            )
        )
    return shards


def shard_arrays(shards: Sequence[DatasetShard]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Unzip shards into the (features, labels) lists the task classes take."""
    return [s.features for s in shards], [s.labels for s in shards]
