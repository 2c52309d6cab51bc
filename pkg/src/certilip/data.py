"""Dataset ingestion: IDX binaries, labelled CSV vectors and seeded synthetic sets."""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.datasets import make_blobs, make_moons

from .errors import DatasetError, IdxFormatError, LabelError, RaggedCSVError

# type code -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {v.newbyteorder("="): k for k, v in IDX_TYPES.items()}


def _open(path, mode="rb"):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def parse_idx(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(buf) < 4:
        raise IdxFormatError(f"{name}: truncated header at offset {len(buf)}")
    if buf[0] != 0 or buf[1] != 0:
        off = 0 if buf[0] != 0 else 1
        raise IdxFormatError(f"{name}: bad magic number at offset {off} (expected 0x00, got {buf[off]:#04x})")
    code, ndim = buf[2], buf[3]
    if code not in IDX_TYPES:
        raise IdxFormatError(f"{name}: unknown element type {code:#04x} at offset 2")
    if ndim == 0:
        raise IdxFormatError(f"{name}: zero dimensions declared at offset 3")
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IdxFormatError(f"{name}: truncated dimension table at offset {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    dtype = IDX_TYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - head != need:
        raise IdxFormatError(f"{name}: payload at offset {head} holds {len(buf) - head} bytes, header implies {need}")
    return np.frombuffer(buf, dtype=dtype, offset=head).reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    if not os.path.exists(path):
        raise DatasetError(f"no such file: {path}")
    with _open(path) as f:
        return parse_idx(f.read(), str(path))


def write_idx(path, array) -> None:
    array = np.asarray(array)
    code = IDX_CODES.get(array.dtype)
    if code is None:
        raise DatasetError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    with _open(path, "wb") as f:
        f.write(header + array.astype(IDX_TYPES[code]).tobytes())


def load_idx_pair(images_path, labels_path, limit: int | None = None):
    """Images as (N, 1, H, W) float32 in raw units, labels as int64."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim == 3:
        images = images[:, None]
    if labels.ndim != 1 or len(labels) != len(images):
        raise DatasetError(f"{len(images)} images but labels of shape {labels.shape}")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return images.astype(np.float32), labels.astype(np.int64)


def read_csv_vectors(path, label_column: str = "label"):
    if not os.path.exists(path):
        raise DatasetError(f"no such file: {path}")
    with open(path, newline="") as f:
        rows = csv.reader(f)
        try:
            header = next(rows)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if label_column not in header:
            raise DatasetError(f"{path}: no '{label_column}' column in header")
        li = header.index(label_column)
        feats, labels = [], []
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise RaggedCSVError(f"{path}: line {lineno} has {len(row)} fields, header has {len(header)}")
            try:
                labels.append(int(row[li]))
                feats.append([float(v) for j, v in enumerate(row) if j != li])
            except ValueError as e:
                raise DatasetError(f"{path}: line {lineno}: {e}") from None
    return np.array(feats, dtype=np.float32).reshape(len(feats), len(header) - 1), np.array(labels, dtype=np.int64)


def two_moons(n: int = 2000, noise: float = 0.1, seed: int = 7):
    x, y = make_moons(n_samples=n, noise=noise, random_state=seed)
    return x.astype(np.float32), y.astype(np.int64)


def gaussian_blobs(n: int = 1000, centers: int = 3, dim: int = 2, std: float = 1.0, seed: int = 0):
    x, y = make_blobs(n_samples=n, centers=centers, n_features=dim, cluster_std=std, random_state=seed)
    return x.astype(np.float32), y.astype(np.int64)


@dataclass
class Normalizer:
    kind: str = "none"
    shift: np.ndarray | float = 0.0
    scale: np.ndarray | float = 1.0

    @classmethod
    def fit(cls, kind: str, x):
        if kind == "none":
            return cls(kind)
        if kind == "unit":  # 8-bit pixel range to [0, 1]
            return cls(kind, 0.0, 255.0)
        if kind == "standardize":
            sd = x.std(axis=0)
            return cls(kind, x.mean(axis=0), np.where(sd > 0, sd, 1.0))
        if kind == "minmax":
            lo, hi = x.min(axis=0), x.max(axis=0)
            return cls(kind, lo, np.where(hi > lo, hi - lo, 1.0))
        raise DatasetError(f"unknown normalization {kind!r}")

    def __call__(self, x):
        return ((x - self.shift) / self.scale).astype(np.float32)

    def to_dict(self):
        return {"kind": self.kind, "shift": np.asarray(self.shift).tolist(),
                "scale": np.asarray(self.scale).tolist()}


@dataclass
class DatasetSource:
    kind: str
    path: str | None = None
    labels_path: str | None = None
    test_path: str | None = None
    test_labels_path: str | None = None
    synthetic: str = "two_moons"
    n: int = 2000
    noise: float = 0.1
    centers: int = 3
    dim: int = 2
    normalization: str = "standardize"
    test_fraction: float = 0.2
    limit: int | None = None
    num_classes: int | None = None
    seed: int = 7
    options: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)


def check_labels(y, k: int | None):
    y = np.asarray(y)
    if y.size == 0:
        return y
    top = k if k is not None else int(y.max()) + 1
    if y.min() < 0 or y.max() >= top:
        raise LabelError(f"labels must lie in [0, {top}), found [{y.min()}, {y.max()}]")
    return y


def split(x, y, test_fraction: float, seed: int):
    if not 0 <= test_fraction < 1:
        raise DatasetError("test_fraction must lie in [0, 1)")
    order = np.random.default_rng(seed).permutation(len(x))
    n_test = int(round(len(x) * test_fraction))
    te, tr = order[:n_test], order[n_test:]
    return (x[tr], y[tr]), (x[te], y[te])


def _raw(source: DatasetSource, which: str):
    if source.kind == "idx_images":
        ip, lp = (source.path, source.labels_path) if which == "train" else (source.test_path, source.test_labels_path)
        if not ip or not lp:
            raise DatasetError("idx_images needs image and label paths")
        return load_idx_pair(ip, lp, source.limit)
    if source.kind == "csv_vectors":
        p = source.path if which == "train" else source.test_path
        if not p:
            raise DatasetError("csv_vectors needs a path")
        x, y = read_csv_vectors(p)
        return (x[:source.limit], y[:source.limit]) if source.limit else (x, y)
    if source.kind == "synthetic":
        if source.n < 2:
            raise DatasetError("synthetic datasets need n >= 2")
        if source.synthetic == "two_moons":
            return two_moons(source.n, source.noise, source.seed)
        if source.synthetic == "gaussian_blobs":
            return gaussian_blobs(source.n, source.centers, source.dim, source.noise, source.seed)
        raise DatasetError(f"unknown synthetic dataset {source.synthetic!r}")
    raise DatasetError(f"unknown dataset kind {source.kind!r}")


def load_dataset(source: DatasetSource | dict):
    """Return ``(train, test, normalizer)``; normalization is fitted on the train split."""
    if isinstance(source, dict):
        source = DatasetSource.from_dict(source)
    x, y = _raw(source, "train")
    if source.test_path:
        train_set, test_set = (x, y), _raw(source, "test")
    else:
        train_set, test_set = split(x, y, source.test_fraction, source.seed)
    for part in (train_set, test_set):
        check_labels(part[1], source.num_classes)
        if not np.all(np.isfinite(part[0])):
            raise DatasetError("dataset contains non-finite features")
    norm = Normalizer.fit(source.normalization, train_set[0])
    return (norm(train_set[0]), train_set[1]), (norm(test_set[0]), test_set[1]), norm
