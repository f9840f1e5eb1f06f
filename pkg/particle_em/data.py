"""Classification datasets: Wisconsin Breast Cancer, an MNIST two-class subset, synthetic data.

Every loader z-scores the features over the full dataset (population standard
deviation; constant columns map to zero) and then draws a seeded 80/20
train/test split.
"""

from __future__ import annotations

import gzip
import logging
import os
import struct
from pathlib import Path
from typing import Any, BinaryIO, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from particle_em.errors import CapacityError, DataFormatError
from particle_em.types import Array

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "PARTICLE_EM_DATA_DIR"

WBC_FILE = "breast-cancer-wisconsin.data"
WBC_FEATURES = 9
WBC_ROWS = 683
WBC_BENIGN, WBC_MALIGNANT = 2, 4

MNIST_IMAGES_FILE = "train-images-idx3-ubyte"
MNIST_LABELS_FILE = "train-labels-idx1-ubyte"
IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

TEST_FRACTION = 0.2

PathLike = Union[str, os.PathLike]


def data_dir() -> Path:
    """Directory relative dataset paths resolve against."""
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def resolve(path: PathLike) -> Path:
    path = Path(path)
    return path if path.is_absolute() else data_dir() / path


class DataSplit:
    __slots__ = ["features", "labels"]

    def __init__(self, features: Array, labels: Array) -> None:
        self.features = features
        self.labels = labels

    @property
    def m(self) -> int:
        return self.labels.shape[0]


class Dataset:
    """Normalized features, 0/1 labels and a fixed train/test partition."""

    __slots__ = ["features", "labels", "train_idx", "test_idx", "means", "stds", "source_labels"]

    def __init__(
        self,
        features: Array,
        labels: Array,
        train_idx: Array,
        test_idx: Array,
        means: Array,
        stds: Array,
        source_labels: Optional[Array] = None,
    ) -> None:
        self.features = features
        self.labels = labels
        self.train_idx = train_idx
        self.test_idx = test_idx
        self.means = means
        self.stds = stds
        self.source_labels = labels if source_labels is None else source_labels

    @property
    def m(self) -> int:
        return self.labels.shape[0]

    def train(self) -> DataSplit:
        return DataSplit(self.features[self.train_idx], self.labels[self.train_idx])

    def test(self) -> DataSplit:
        return DataSplit(self.features[self.test_idx], self.labels[self.test_idx])

    def __repr__(self) -> str:
        return f"Dataset(m={self.m}, d={self.features.shape[1]}, test={self.test_idx.size})"


def zscore(features: Any) -> tuple[Array, Array, Array]:
    """Column-wise (x − mean)/std with ddof=0; zero-variance columns become 0."""
    features = np.asarray(features, dtype=np.float64)
    means = features.mean(axis=0)
    stds = features.std(axis=0)
    safe = np.where(stds > 0, stds, 1.0)
    normalized = np.where(stds > 0, (features - means) / safe, 0.0)
    return normalized, means, stds


def split_indices(m: int, seed: int, test_fraction: float = TEST_FRACTION) -> tuple[Array, Array]:
    """Seeded shuffle; the first round(test_fraction·m) shuffled rows form the test set."""
    order = np.random.default_rng(seed).permutation(m)
    n_test = int(np.floor(test_fraction * m + 0.5))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def _make_dataset(raw: Array, labels: Array, split_seed: int, source_labels=None) -> Dataset:
    features, means, stds = zscore(raw)
    train_idx, test_idx = split_indices(labels.shape[0], split_seed)
    return Dataset(features, labels, train_idx, test_idx, means, stds, source_labels)


def load_wbc(
    path: PathLike = WBC_FILE,
    split_seed: int = 0,
    expected_rows: Optional[int] = WBC_ROWS,
) -> Dataset:
    """UCI breast-cancer-wisconsin.data: id, nine integer features, class 2/4.

    Rows with a '?' are dropped; benign maps to 0 and malignant to 1.
    """
    path = resolve(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: no such file")
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        raise DataFormatError(f"{path}: {e}") from None
    except pd.errors.EmptyDataError:
        raise DataFormatError(f"{path}: empty file") from None
    if frame.shape[1] != WBC_FEATURES + 2:
        raise DataFormatError(f"{path}: expected {WBC_FEATURES + 2} columns, got {frame.shape[1]}")

    frame = frame.apply(lambda column: column.str.strip())
    # short rows come back padded with empty cells
    short = frame.iloc[:, -1].fillna("").eq("").to_numpy()
    if short.any():
        raise DataFormatError(
            f"wrong column count, expected {WBC_FEATURES + 2} fields", int(np.flatnonzero(short)[0]) + 1
        )
    line_numbers = np.arange(1, frame.shape[0] + 1)
    missing = (frame == "?").any(axis=1).to_numpy()
    frame, line_numbers = frame[~missing], line_numbers[~missing]

    values = frame.apply(pd.to_numeric, errors="coerce")
    bad = values.isna().any(axis=1).to_numpy()
    if bad.any():
        raise DataFormatError("non-numeric value", int(line_numbers[bad][0]))
    classes = values.iloc[:, -1].to_numpy()
    unknown = ~np.isin(classes, (WBC_BENIGN, WBC_MALIGNANT))
    if unknown.any():
        raise DataFormatError(f"class must be 2 or 4, got {classes[unknown][0]}", int(line_numbers[unknown][0]))

    logger.info("%s: kept %d rows, dropped %d with missing values", path.name, len(frame), int(missing.sum()))
    if expected_rows is not None and len(frame) != expected_rows:
        raise DataFormatError(f"{path}: expected {expected_rows} complete rows, got {len(frame)}")

    raw = values.iloc[:, 1:-1].to_numpy(dtype=np.float64)
    labels = (classes == WBC_MALIGNANT).astype(np.int64)
    return _make_dataset(raw, labels, split_seed)


def _open(path: Path) -> BinaryIO:
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: PathLike, magic: int) -> Array:
    """IDX3 images (magic 2051) as (count, rows, cols) or IDX1 labels (magic 2049) as (count,)."""
    path = resolve(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: no such file")
    with _open(path) as f:
        header = f.read(4)
        if len(header) < 4:
            raise DataFormatError(f"{path}: truncated header")
        (found,) = struct.unpack(">I", header)
        if found != magic:
            raise DataFormatError(f"{path}: bad magic number {found:#010x}, expected {magic:#010x}")
        ndim = 3 if magic == IMAGE_MAGIC else 1
        dims_raw = f.read(4 * ndim)
        if len(dims_raw) < 4 * ndim:
            raise DataFormatError(f"{path}: truncated header")
        dims = struct.unpack(">" + "I" * ndim, dims_raw)
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise DataFormatError(f"{path}: expected {int(np.prod(dims))} bytes of data, got {data.size}")
    return data.reshape(dims)


def load_mnist_subset(
    images_path: PathLike = MNIST_IMAGES_FILE,
    labels_path: PathLike = MNIST_LABELS_FILE,
    classes: Sequence[int] = (4, 9),
    count: int = 1000,
    seed: int = 0,
    split_seed: Optional[int] = None,
) -> Dataset:
    """``count`` rows drawn without replacement from the two classes; classes[0] → 0."""
    if len(classes) != 2:
        raise ValueError("exactly two classes are supported")
    images = read_idx(images_path, IMAGE_MAGIC)
    source = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != source.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {source.shape[0]} labels")
    available = np.flatnonzero(np.isin(source, classes))
    if count > available.size:
        raise CapacityError(f"requested {count} rows, only {available.size} have labels {tuple(classes)}")
    chosen = np.sort(np.random.default_rng(seed).choice(available, size=count, replace=False))
    raw = images[chosen].reshape(count, -1).astype(np.float64)
    picked = source[chosen].astype(np.int64)
    labels = (picked == classes[1]).astype(np.int64)
    logger.info("MNIST: %d of %d rows with labels %s", count, available.size, tuple(classes))
    return _make_dataset(raw, labels, seed if split_seed is None else split_seed, picked)


def synthetic_dataset(
    m: int = 300,
    d: int = WBC_FEATURES,
    seed: int = 0,
    weights: Optional[Any] = None,
    split_seed: Optional[int] = None,
) -> Dataset:
    """Logistic-law data: standard-normal features, labels ~ Bernoulli(σ(fᵀw))."""
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((m, d))
    w = rng.standard_normal(d) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (d,):
        raise ValueError(f"weights need shape ({d},)")
    features, _, _ = zscore(raw)
    labels = (rng.random(m) < expit(features @ w)).astype(np.int64)
    return _make_dataset(raw, labels, seed if split_seed is None else split_seed)
