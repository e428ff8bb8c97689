"""Dataset generation, ingestion, normalization, and batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, LabelError, UsageError

FEATURE_MAGIC = b"MLFX"
FEATURE_VERSION = 1

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class NormStats:
    """Per-dimension mean and standard deviation of a training split."""

    mean: np.ndarray
    std: np.ndarray


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, d) float
    labels: np.ndarray  # (n,) int
    norm_stats: NormStats | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise UsageError(
                f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels"
            )

    def __len__(self):
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def _moon_pair(count_per_class: int, noise: float, rng: np.random.Generator):
    """The standard two interleaving half-circles, classes 0 (upper arc)
    and 1 (lower arc, offset by the usual (1, -0.5) construction)."""
    t = np.linspace(0.0, np.pi, count_per_class)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 1.0 - np.sin(t) - 0.5])
    points = np.vstack([upper, lower])
    if noise > 0:
        points = points + rng.normal(0.0, noise, size=points.shape)
    labels = np.repeat([0, 1], count_per_class)
    return points, labels


def _four_moons_split(n: int, noise: float, shift: float, rng: np.random.Generator):
    base_points, base_labels = _moon_pair(n // 4, noise, rng)
    shifted = base_points + shift  # classes 2/3 are classes 0/1 translated
    points = np.vstack([base_points, shifted])
    labels = np.concatenate([base_labels, base_labels + 2])
    perm = rng.permutation(len(points))
    return LabeledDataset(points[perm], labels[perm])


def make_four_moons(
    n_train: int,
    n_test: int,
    noise: float = 0.2,
    seed: int = 0,
    shift: float = 2.0,
) -> tuple[LabeledDataset, LabeledDataset]:
    """4-class moons: the 2-class problem plus a copy translated by
    (+shift, +shift).  Class counts are exactly balanced and each split
    is shuffled."""
    if n_train % 4 or n_test % 4:
        raise UsageError("n_train and n_test must be divisible by 4")
    rng = np.random.default_rng(seed)
    train = _four_moons_split(n_train, noise, shift, rng)
    test = _four_moons_split(n_test, noise, shift, rng)
    return train, test


def normalize(
    train: LabeledDataset, *others: LabeledDataset
) -> tuple[LabeledDataset, ...]:
    """Standardize every split with the training split's statistics."""
    if len(train) == 0:
        raise UsageError("cannot normalize an empty training set")
    mean = train.features.mean(axis=0, keepdims=True)
    std = np.maximum(train.features.std(axis=0, keepdims=True), 1e-12)
    stats = NormStats(mean=mean, std=std)
    out = []
    for ds in (train, *others):
        out.append(
            LabeledDataset((ds.features - mean) / std, ds.labels, norm_stats=stats)
        )
    return tuple(out)


def apply_norm_stats(features: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(features) - stats.mean) / stats.std


def _read_exact(fh, count):
    data = fh.read(count)
    if len(data) != count:
        raise FormatError("unexpected end of file")
    return data


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label pair, flattening images and scaling pixel
    values to [0, 1]."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"bad image magic 0x{magic:08x}")
        pixels = np.frombuffer(_read_exact(fh, count * rows * cols), dtype=np.uint8)
        if fh.read(1):
            raise FormatError("trailing bytes in image file")
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"bad label magic 0x{magic:08x}")
        labels = np.frombuffer(_read_exact(fh, label_count), dtype=np.uint8)
        if fh.read(1):
            raise FormatError("trailing bytes in label file")
    if count != label_count:
        raise FormatError(f"{count} images but {label_count} labels")
    features = pixels.reshape(count, rows * cols).astype(np.float32) / 255.0
    return LabeledDataset(features, labels.astype(np.int64))


def save_feature_matrix(path, dataset: LabeledDataset, labeled: bool = True) -> None:
    """Write the MLFX container: float32 features row-major, labels as
    little-endian uint32 when present."""
    features = np.ascontiguousarray(dataset.features, dtype="<f4")
    rows, cols = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IQQB", FEATURE_VERSION, rows, cols, 1 if labeled else 0))
        fh.write(features.tobytes())
        if labeled:
            fh.write(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())


def load_feature_matrix(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != FEATURE_MAGIC:
            raise FormatError("not a feature matrix file (bad magic)")
        version, rows, cols, has_labels = struct.unpack("<IQQB", _read_exact(fh, 21))
        if version != FEATURE_VERSION:
            raise FormatError(f"unsupported feature file version {version}")
        features = np.frombuffer(_read_exact(fh, 4 * rows * cols), dtype="<f4")
        if has_labels:
            labels = np.frombuffer(_read_exact(fh, 4 * rows), dtype="<u4")
        else:
            labels = np.zeros(rows, dtype=np.int64)
        if fh.read(1):
            raise FormatError("trailing bytes after payload")
    return LabeledDataset(
        features.reshape(rows, cols).astype(np.float32),
        labels.astype(np.int64),
    )


def export_csv(path, dataset: LabeledDataset) -> None:
    """Plain-text export with header f0,...,fD,label."""
    d = dataset.features.shape[1]
    header = ",".join([f"f{i}" for i in range(d)] + ["label"])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row, label in zip(dataset.features, dataset.labels):
            fh.write(",".join(f"{v:.9g}" for v in row) + f",{int(label)}\n")


def validate_labels(dataset: LabeledDataset, num_classes: int) -> None:
    if len(dataset) and (dataset.labels.min() < 0 or dataset.labels.max() >= num_classes):
        raise LabelError(
            f"labels outside [0, {num_classes}): "
            f"[{dataset.labels.min()}, {dataset.labels.max()}]"
        )
