"""Dataset ingestion: synthetic generators, CSV tables and IDX image files."""
from __future__ import annotations

import csv
import gzip
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import make_rng

SOURCES = ("synthetic-cubic", "synthetic-two-cluster", "synthetic-moons",
           "csv-regression", "csv-classification", "idx-images")


class DataError(ValueError):
    pass


@dataclass
class DatasetHandle:
    """Train/test arrays plus the normalisation fitted on the training split."""

    source: str
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray | None = None
    y_test: np.ndarray | None = None
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    task: str = "regression"
    n_classes: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def input_shape(self):
        return tuple(self.X_train.shape[1:])

    def normalize_inputs(self, X):
        if self.x_mean is None:
            return np.asarray(X, dtype=np.float64)
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std


def cubic(n=20, seed=0, low=-4.0, high=4.0, noise_std=3.0):
    """``x ~ U[low, high]``, ``y = x^3 + N(0, noise_std^2)``."""
    rng = make_rng(seed)
    x = rng.uniform(low, high, size=n)
    y = x ** 3 + noise_std * rng.standard_normal(n)
    return x.reshape(-1, 1), y


def two_cluster(n=40, seed=0, centers=(-2.0, 2.0), width=0.5, noise_std=0.1):
    """Two separated clusters of 1-d inputs with a smooth target."""
    rng = make_rng(seed)
    half = n // 2
    x = np.concatenate([rng.uniform(c - width, c + width, size=m)
                        for c, m in zip(centers, (half, n - half))])
    y = np.sin(x) + noise_std * rng.standard_normal(n)
    return x.reshape(-1, 1), y


def moons(n=500, seed=0, noise=0.2):
    from sklearn.datasets import make_moons

    return make_moons(n_samples=n, noise=noise, random_state=seed)


def _split(n, test_fraction, seed):
    order = make_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return order[n_test:], order[:n_test]


def _standardize(X_train):
    mean = X_train.mean(axis=0)
    std = X_train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def read_csv(path, label_column=None):
    """Numeric CSV with a header row. Returns ``(X, y, header)``.

    The label column defaults to the last one.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if len(rows) < 2:
        raise DataError(f"{path}: need a header and at least one row")
    header = [h.strip() for h in rows[0]]
    col = len(header) - 1 if label_column is None else (
        header.index(label_column) if isinstance(label_column, str) else int(label_column))
    if col < 0 or col >= len(header):
        raise DataError(f"{path}: missing label column {label_column!r}")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            data.append([float(v) for v in row])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric value") from None
    arr = np.asarray(data, dtype=np.float64)
    y = arr[:, col]
    X = np.delete(arr, col, axis=1)
    return X, y, header


_IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path):
    """Parse an IDX (MNIST-style) file, optionally gzip-compressed."""
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header at byte 0")
    if raw[0] != 0 or raw[1] != 0:
        raise DataError(f"{path}: bad IDX magic number at byte 0 (expected two zero bytes)")
    if raw[2] not in _IDX_TYPES:
        raise DataError(f"{path}: unknown IDX element type 0x{raw[2]:02x} at byte 2")
    ndim = raw[3]
    if ndim == 0:
        raise DataError(f"{path}: zero dimensions declared at byte 3")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataError(f"{path}: truncated dimension table at byte {len(raw)}")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    dtype = np.dtype(_IDX_TYPES[raw[2]])
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header_end != expected:
        raise DataError(f"{path}: payload size mismatch at byte {header_end}: "
                        f"expected {expected} bytes, found {len(raw) - header_end}")
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)


def load_dataset(descriptor: dict) -> DatasetHandle:
    """Build a :class:`DatasetHandle` from a descriptor dict.

    Keys: ``source`` (one of :data:`SOURCES`), ``seed`` (generator seed),
    ``split_seed`` and ``test_fraction`` (train/test split), ``n`` for
    synthetic data, ``path`` / ``test_path`` / ``label_column`` for CSV,
    ``images`` / ``labels`` / ``test_images`` / ``test_labels`` for IDX,
    ``normalize`` (default true; statistics come from the training split).
    """
    d = dict(descriptor)
    source = d.get("source")
    if source not in SOURCES:
        raise DataError(f"unknown dataset source {source!r}")
    seed = int(d.get("seed", 0))
    normalize = bool(d.get("normalize", True))
    task = "regression"
    n_classes = None
    X_test = y_test = None
    base = d.get("root", "")

    def p(key):
        return os.path.join(base, d[key]) if base else d[key]

    if source == "synthetic-cubic":
        X, y = cubic(int(d.get("n", 20)), seed)
        Xt, yt = cubic(int(d.get("n_test", 0)), seed + 1) if d.get("n_test") else (None, None)
        X_train, y_train, X_test, y_test = X, y, Xt, yt
        normalize = bool(d.get("normalize", False))
    elif source == "synthetic-two-cluster":
        X_train, y_train = two_cluster(int(d.get("n", 40)), seed)
        normalize = bool(d.get("normalize", False))
    elif source == "synthetic-moons":
        X, y = moons(int(d.get("n", 500)) + int(d.get("n_test", 500)), seed, float(d.get("noise", 0.2)))
        n_train = int(d.get("n", 500))
        X_train, y_train = X[:n_train], y[:n_train]
        if len(X) > n_train:
            X_test, y_test = X[n_train:], y[n_train:]
        task, n_classes = "classification", 2
    elif source in ("csv-regression", "csv-classification"):
        if "path" not in d:
            raise DataError("csv source needs a 'path'")
        X, y, _ = read_csv(p("path"), d.get("label_column"))
        if source == "csv-classification":
            task = "classification"
            if np.any(y != np.round(y)) or np.any(y < 0):
                raise DataError("classification labels must be non-negative integers")
        if "test_path" in d:
            X_test, y_test, _ = read_csv(p("test_path"), d.get("label_column"))
            X_train, y_train = X, y
        else:
            tr, te = _split(len(X), float(d.get("test_fraction", 0.1)), int(d.get("split_seed", seed)))
            X_train, y_train, X_test, y_test = X[tr], y[tr], X[te], y[te]
    else:
        task = "classification"
        for key in ("images", "labels"):
            if key not in d:
                raise DataError(f"idx source needs '{key}'")
        images = read_idx(p("images")).astype(np.float64) / 255.0
        labels = read_idx(p("labels")).astype(np.int64)
        if len(images) != len(labels):
            raise DataError(f"image/label count mismatch: {len(images)} vs {len(labels)}")
        X_train, y_train = images.reshape(len(images), -1), labels
        if "test_images" in d and "test_labels" in d:
            ti = read_idx(p("test_images")).astype(np.float64) / 255.0
            tl = read_idx(p("test_labels")).astype(np.int64)
            if len(ti) != len(tl):
                raise DataError("test image/label count mismatch")
            X_test, y_test = ti.reshape(len(ti), -1), tl
        if d.get("limit"):
            X_train, y_train = X_train[:int(d["limit"])], y_train[:int(d["limit"])]

    X_train = np.asarray(X_train, dtype=np.float64)
    if len(X_train) == 0:
        raise DataError("dataset has no training rows")
    if X_test is not None and np.asarray(X_test).shape[1:] != X_train.shape[1:]:
        raise DataError(f"test feature dimension {np.asarray(X_test).shape[1:]} "
                        f"does not match training {X_train.shape[1:]}")
    if task == "classification":
        y_train = np.asarray(y_train).astype(np.int64)
        y_test = None if y_test is None else np.asarray(y_test).astype(np.int64)
        n_classes = int(d.get("n_classes", max(y_train.max(), -1 if y_test is None else y_test.max()) + 1))
    else:
        y_train = np.asarray(y_train, dtype=np.float64)
    mean = std = None
    if normalize:
        mean, std = _standardize(X_train)
    handle = DatasetHandle(source, X_train, y_train, X_test, y_test, mean, std, task, n_classes,
                           meta={"seed": seed})
    if normalize:
        handle.X_train = handle.normalize_inputs(X_train)
        if X_test is not None:
            handle.X_test = handle.normalize_inputs(X_test)
    return handle
