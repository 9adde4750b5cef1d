"""Dataset loading, standardization, and split/fold machinery.

Two experiment datasets are supported: a tabular regression CSV (header row,
comma-delimited reals) and the MNIST IDX binary pair. Paths ending in ``.gz``
are decompressed transparently, matching how MNIST is distributed.
"""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

IDX_TYPE_UBYTE = 0x08


class Task(Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


class DataError(Exception):
    """Base class for dataset loading and validation failures."""


class BadMagic(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class EmptyDimension(DataError):
    pass


class CountMismatch(DataError):
    pass


class MissingColumn(DataError):
    pass


class NonNumericCell(DataError):
    def __init__(self, row: int, col: int, value: str):
        self.row = row
        self.col = col
        super().__init__(f"row {row}, column {col}: {value!r} is not a number")


class EmptyFile(DataError):
    pass


class DegenerateSplit(DataError):
    pass


class TooFewSamples(DataError):
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """An in-memory dataset: feature matrix, target vector, task kind."""

    features: np.ndarray
    targets: np.ndarray
    task: Task
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DataError(f"features must be 2-d, got shape {feats.shape}")
        if self.task is Task.CLASSIFICATION:
            targs = np.asarray(self.targets)
            if not np.issubdtype(targs.dtype, np.integer):
                if not np.all(targs == np.floor(targs)):
                    raise DataError("classification targets must be integers")
            targs = targs.astype(np.int64)
            if targs.size and targs.min() < 0:
                raise DataError("classification targets must be non-negative")
        else:
            targs = np.ascontiguousarray(self.targets, dtype=np.float64)
        if targs.ndim != 1:
            raise DataError(f"targets must be 1-d, got shape {targs.shape}")
        if feats.shape[0] != targs.shape[0]:
            raise CountMismatch(
                f"{feats.shape[0]} feature rows but {targs.shape[0]} targets"
            )
        if not np.all(np.isfinite(feats)):
            raise DataError("features contain NaN or Inf")
        if not np.all(np.isfinite(targs)):
            raise DataError("targets contain NaN or Inf")
        object.__setattr__(self, "features", _freeze(feats))
        object.__setattr__(self, "targets", _freeze(targs))
        if self.feature_names is not None:
            names = tuple(self.feature_names)
            if len(names) != feats.shape[1]:
                raise DataError("feature_names length does not match column count")
            object.__setattr__(self, "feature_names", names)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        if self.task is not Task.CLASSIFICATION:
            raise ValueError("n_classes is defined only for classification datasets")
        return int(self.targets.max()) + 1


@dataclass(frozen=True)
class ScalerParams:
    """Per-column mean/scale for z-score standardization."""

    means: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        means = np.ascontiguousarray(self.means, dtype=np.float64)
        scales = np.ascontiguousarray(self.scales, dtype=np.float64)
        if means.shape != scales.shape or means.ndim != 1:
            raise ValueError("means and scales must be 1-d and the same length")
        if not np.all(scales > 0):
            raise ValueError("scales must be strictly positive")
        object.__setattr__(self, "means", _freeze(means))
        object.__setattr__(self, "scales", _freeze(scales))


@dataclass(frozen=True)
class SplitIndices:
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        train = np.ascontiguousarray(self.train_idx, dtype=np.int64)
        test = np.ascontiguousarray(self.test_idx, dtype=np.int64)
        n = train.size + test.size
        combined = np.concatenate([train, test])
        combined.sort()
        if not np.array_equal(combined, np.arange(n)):
            raise ValueError("train/test indices must partition 0..n-1")
        object.__setattr__(self, "train_idx", _freeze(train))
        object.__setattr__(self, "test_idx", _freeze(test))


@dataclass(frozen=True)
class FoldAssignment:
    """Maps each sample index to a fold id in [0, n_folds)."""

    fold_of: np.ndarray
    n_folds: int

    def __post_init__(self):
        fold_of = np.ascontiguousarray(self.fold_of, dtype=np.int64)
        counts = np.bincount(fold_of, minlength=self.n_folds)
        if counts.size != self.n_folds or counts.min() == 0:
            raise ValueError("every fold must be non-empty")
        if counts.max() - counts.min() > 1:
            raise ValueError("fold sizes may differ by at most 1")
        object.__setattr__(self, "fold_of", _freeze(fold_of))

    def fold_indices(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (train_idx, val_idx) for one fold."""
        mask = self.fold_of == fold
        return np.flatnonzero(~mask), np.flatnonzero(mask)


def read_bytes(path: str | Path) -> bytes:
    """Read a file, decompressing transparently when the name ends in .gz."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(data: bytes) -> np.ndarray:
    """Parse IDX container bytes into a uint8 tensor.

    The header is a big-endian magic 0x0000_08DD (DD = dimension count)
    followed by DD big-endian uint32 sizes; the payload must hold exactly
    the product of the sizes in bytes.
    """
    if len(data) < 4:
        raise TruncatedPayload(f"header needs 4 bytes, got {len(data)}")
    if data[0] != 0 or data[1] != 0:
        raise BadMagic(f"first two magic bytes must be zero, got {data[:2].hex()}")
    if data[2] != IDX_TYPE_UBYTE:
        raise BadMagic(f"type code 0x{data[2]:02x} is not unsigned byte (0x08)")
    ndim = data[3]
    if ndim == 0:
        raise BadMagic("dimension count must be at least 1")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise TruncatedPayload(
            f"header declares {ndim} dimensions but only {len(data)} bytes present"
        )
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    if any(d == 0 for d in dims):
        raise EmptyDimension(f"zero-sized dimension in {dims}")
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(data) - header_len
    if payload != expected:
        raise TruncatedPayload(f"payload holds {payload} bytes, header declares {expected}")
    arr = np.frombuffer(data, dtype=np.uint8, offset=header_len).reshape(dims)
    return _freeze(arr.copy())


def write_idx(arr: np.ndarray) -> bytes:
    """Serialize a uint8 tensor to IDX bytes (inverse of parse_idx)."""
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if arr.ndim < 1 or arr.ndim > 255:
        raise ValueError("IDX supports 1..255 dimensions")
    if arr.size == 0:
        raise EmptyDimension("cannot serialize an empty tensor")
    header = bytes([0, 0, IDX_TYPE_UBYTE, arr.ndim])
    header += struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def load_mnist(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Load an MNIST-style IDX image/label pair as a classification dataset.

    Pixels are flattened row-wise and scaled to [0, 1] by dividing by 255.
    """
    images = parse_idx(read_bytes(images_path))
    labels = parse_idx(read_bytes(labels_path))
    if images.ndim != 3:
        raise BadMagic(f"image file must be 3-d (magic 0x00000803), got {images.ndim}-d")
    if labels.ndim != 1:
        raise BadMagic(f"label file must be 1-d (magic 0x00000801), got {labels.ndim}-d")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(feats, labels.astype(np.int64), Task.CLASSIFICATION)


def load_csv_regression(path: str | Path, target_column: str) -> Dataset:
    """Load a regression dataset from a headered CSV of real numbers."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    rows = [r for r in rows if r]
    if not rows:
        raise EmptyFile(f"{path} has no header row")
    header = [c.strip() for c in rows[0]]
    if target_column not in header:
        raise MissingColumn(f"target column {target_column!r} not in {header}")
    if len(rows) == 1:
        raise EmptyFile(f"{path} has a header but no data rows")
    target_j = header.index(target_column)
    values = np.empty((len(rows) - 1, len(header)), dtype=np.float64)
    for i, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise NonNumericCell(i, len(row), "<missing cell>")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise NonNumericCell(i, j, cell) from None
    feature_cols = [j for j in range(len(header)) if j != target_j]
    names = tuple(header[j] for j in feature_cols)
    return Dataset(values[:, feature_cols], values[:, target_j], Task.REGRESSION, names)


def fit_scaler(features: np.ndarray) -> ScalerParams:
    """Fit per-column mean and population standard deviation.

    Zero-variance columns get scale 1 so they standardize to all-zero.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("need a non-empty 2-d feature matrix")
    means = features.mean(axis=0)
    scales = features.std(axis=0)
    scales = np.where(scales == 0.0, 1.0, scales)
    return ScalerParams(means, scales)


def apply_scaler(params: ScalerParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[1] != params.means.shape[0]:
        raise ValueError(
            f"scaler was fit on {params.means.shape[0]} columns, got {features.shape[1]}"
        )
    return (features - params.means) / params.scales


def _class_blocks(labels: np.ndarray, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index blocks per class, classes in sorted label order."""
    labels = np.asarray(labels)
    blocks = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        blocks.append(rng.permutation(idx))
    return blocks


def train_test_split(
    n: int,
    test_fraction: float,
    seed: int,
    stratify_labels: np.ndarray | None = None,
) -> SplitIndices:
    """Deterministic shuffled split; stratified mode keeps per-class proportions within 1."""
    if not 0.0 < test_fraction < 1.0:
        raise DegenerateSplit(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_test = int(n * test_fraction)
    if n < 2 or n_test < 1 or n_test >= n:
        raise DegenerateSplit(f"cannot split n={n} with test_fraction={test_fraction}")
    rng = np.random.default_rng(seed)
    if stratify_labels is None:
        perm = rng.permutation(n)
        test = perm[:n_test]
    else:
        labels = np.asarray(stratify_labels)
        if labels.shape[0] != n:
            raise CountMismatch("stratify_labels length must equal n")
        blocks = _class_blocks(labels, rng)
        # floor each class quota, then hand out the remainder by largest
        # fractional part (ties to earlier classes) to hit n_test exactly
        exact = [b.size * test_fraction for b in blocks]
        quotas = [int(e) for e in exact]
        remainder = n_test - sum(quotas)
        order = sorted(range(len(blocks)), key=lambda c: (-(exact[c] - quotas[c]), c))
        for c in order[:remainder]:
            quotas[c] += 1
        test = np.concatenate([b[:q] for b, q in zip(blocks, quotas)])
    test_mask = np.zeros(n, dtype=bool)
    test_mask[test] = True
    return SplitIndices(np.flatnonzero(~test_mask), np.flatnonzero(test_mask))


def kfold(
    n: int,
    k: int,
    seed: int,
    stratify_labels: np.ndarray | None = None,
) -> FoldAssignment:
    """Deterministic K-fold assignment; stratified mode balances classes across folds."""
    if k < 2 or k > n:
        raise TooFewSamples(f"need 2 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    if stratify_labels is None:
        order = rng.permutation(n)
    else:
        labels = np.asarray(stratify_labels)
        if labels.shape[0] != n:
            raise CountMismatch("stratify_labels length must equal n")
        order = np.concatenate(_class_blocks(labels, rng))
    # one round-robin counter across the whole stream keeps overall fold
    # sizes within 1 while each class block also cycles through folds
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % k
    return FoldAssignment(fold_of, k)
