"""Datasets, file loaders and client partitioning."""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (BadMagicError, ContractViolation, CountMismatchError, ParseError,
                     PartitionError, TruncatedFileError)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix plus integer labels; arrays are made read-only."""

    X: np.ndarray
    y: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, copy=True)
        y = np.array(self.y, dtype=np.int64, copy=True).reshape(-1)
        if X.ndim != 2 or X.shape[1] < 1:
            raise ContractViolation("features must form a 2-D matrix with at least one column")
        if X.shape[0] != y.size:
            raise ContractViolation("feature and label counts differ")
        if self.class_count < 2:
            raise ContractViolation("class_count must be at least 2")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ContractViolation("label outside [0, class_count)")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.size

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def examples(self) -> list[Example]:
        return [Example(self.X[i], int(self.y[i])) for i in range(len(self))]

    def subset(self, indices: Sequence[int], name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.class_count, name or self.name)

    def replace_rows(self, rows: Mapping[int, np.ndarray]) -> "Dataset":
        """Copy with the features at the given row indices swapped out."""
        X = self.X.copy()
        for i, feats in rows.items():
            X[i] = feats
        return Dataset(X, self.y, self.class_count, self.name)


# --------------------------------------------------------------------- IDX

def _open_bytes(path: str | Path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _read_idx(path, expected_magic: int) -> np.ndarray:
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: missing IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise TruncatedFileError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    """Read an IDX image/label pair (MNIST layout), pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), 10, name)


def write_idx(dataset: Dataset, images_path, labels_path, shape: tuple[int, int] | None = None) -> None:
    """Write features (assumed in [0, 1]) as uint8 IDX files."""
    n, d = dataset.X.shape
    rows, cols = shape if shape is not None else (1, d)
    if rows * cols != d:
        raise ContractViolation("image shape does not match feature_dim")
    pixels = np.clip(np.rint(dataset.X * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.y.astype(np.uint8).tobytes())


# --------------------------------------------------------------------- CSV

def load_csv(path, label_column: str, schema: Mapping[str, object] | None = None,
             scale: bool = True, name: str | None = None) -> Dataset:
    """Load a headed CSV into a Dataset.

    ``schema`` maps feature columns, in output order, to ``"numeric"``,
    ``"categorical"`` (levels sorted) or an explicit list of levels. Without a
    schema every non-label column is numeric. Numeric columns are min-max
    scaled to [0, 1] from the file's own statistics (constant columns become
    zeros); categoricals are one-hot encoded.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if label_column not in header:
        raise ParseError(f"label column {label_column!r} not in header")
    col = {h: i for i, h in enumerate(header)}
    if schema is None:
        schema = {h: "numeric" for h in header if h != label_column}
    for c in schema:
        if c not in col:
            raise ParseError(f"schema column {c!r} not in header")

    for r_i, row in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, found {len(row)}", row=r_i)

    blocks = []
    for c, kind in schema.items():
        cells = [row[col[c]] for row in rows]
        if kind == "numeric":
            vals = np.empty(len(cells))
            for r_i, cell in enumerate(cells):
                try:
                    vals[r_i] = float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric value {cell!r} in column {c!r}", row=r_i) from None
            if scale:
                lo, hi = (vals.min(), vals.max()) if vals.size else (0.0, 0.0)
                vals = np.zeros_like(vals) if hi == lo else (vals - lo) / (hi - lo)
            blocks.append(vals[:, None])
        else:
            levels = sorted(set(cells)) if kind == "categorical" else [str(v) for v in kind]  # type: ignore[union-attr]
            lookup = {lv: i for i, lv in enumerate(levels)}
            onehot = np.zeros((len(cells), len(levels)))
            for r_i, cell in enumerate(cells):
                if cell not in lookup:
                    raise ParseError(f"undeclared level {cell!r} in column {c!r}", row=r_i)
                onehot[r_i, lookup[cell]] = 1.0
            blocks.append(onehot)

    raw_labels = [row[col[label_column]] for row in rows]
    try:
        y = np.array([int(v) for v in raw_labels], dtype=np.int64)
        class_count = max(2, int(y.max(initial=0)) + 1)
    except ValueError:
        levels = sorted(set(raw_labels))
        y = np.array([levels.index(v) for v in raw_labels], dtype=np.int64)
        class_count = max(2, len(levels))
    X = np.hstack(blocks) if blocks else np.zeros((len(rows), 0))
    return Dataset(X, y, class_count, name or Path(path).stem)


def write_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(dataset.feature_dim)] + [label_column])
        for x, y in zip(dataset.X, dataset.y):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


# --------------------------------------------------------------- synthetic

def make_blobs(n: int, class_count: int = 2, dim: int = 2, spread: float = 0.08,
               seed: int = 0, name: str = "blobs") -> Dataset:
    """Gaussian clusters inside the unit cube, classes balanced and interleaved."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(class_count, dim))
    if class_count == 2:
        centers = np.array([np.full(dim, 0.3), np.full(dim, 0.7)])
    y = np.arange(n) % class_count
    X = np.clip(centers[y] + rng.normal(scale=spread, size=(n, dim)), 0.0, 1.0)
    return Dataset(X, y, class_count, name)


def make_purchase_like(n: int, feature_dim: int = 600, seed: int = 0, flip: float = 0.1,
                       name: str = "purchase_like") -> Dataset:
    """Binary shopping-basket features with two latent customer profiles."""
    rng = np.random.default_rng(seed)
    profiles = rng.random((2, feature_dim)) < 0.15
    y = rng.integers(0, 2, size=n)
    X = profiles[y].astype(np.float64)
    noise = rng.random((n, feature_dim)) < flip * 0.1
    X = np.abs(X - noise)
    return Dataset(X, y, 2, name)


def load_mnist_subset(n_train: int = 2000, n_test: int = 1000, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Class-balanced train/test split of the 5,000-image MNIST sample bundled with mlxtend."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise ImportError("the MNIST subset needs the optional 'mlxtend' package") from exc
    X, y = mnist_data()
    if n_train + n_test > len(y):
        raise ContractViolation(f"only {len(y)} MNIST images are bundled")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    X = X[order] / 255.0
    y = y[order].astype(np.int64)
    return (Dataset(X[:n_train], y[:n_train], 10, "mnist"),
            Dataset(X[n_train:n_train + n_test], y[n_train:n_train + n_test], 10, "mnist_test"))


# --------------------------------------------------------------- partition

@dataclass(frozen=True)
class Partition:
    assignments: dict[int, list[int]]
    scheme: str = "iid"

    def __post_init__(self):
        seen: set[int] = set()
        for cid, idx in self.assignments.items():
            if not idx:
                raise PartitionError(f"client {cid} is empty")
            if list(idx) != sorted(idx):
                raise PartitionError(f"client {cid} indices are not sorted")
            if seen.intersection(idx):
                raise PartitionError("client index lists overlap")
            seen.update(idx)

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    @property
    def client_ids(self) -> list[int]:
        return sorted(self.assignments)

    def covered(self) -> list[int]:
        return sorted(i for idx in self.assignments.values() for i in idx)

    def to_json(self) -> str:
        return json.dumps({str(k): list(map(int, v)) for k, v in sorted(self.assignments.items())})

    @classmethod
    def from_json(cls, text: str, scheme: str = "iid") -> "Partition":
        raw = json.loads(text)
        return cls({int(k): [int(i) for i in v] for k, v in raw.items()}, scheme)


def parse_scheme(scheme: str) -> tuple[str, float | None]:
    scheme = scheme.strip().lower()
    if scheme == "iid":
        return "iid", None
    if scheme.startswith("dirichlet"):
        inner = scheme[len("dirichlet"):].strip("() ")
        beta = float(inner) if inner else 0.5
        if beta <= 0:
            raise PartitionError("Dirichlet concentration must be positive")
        return "dirichlet", beta
    raise PartitionError(f"unknown partition scheme {scheme!r}")


def dirichlet_split(labels: np.ndarray, indices: np.ndarray, num_clients: int, beta: float,
                    rng: np.random.Generator) -> list[list[int]]:
    """One draw of the per-class Dirichlet split.

    Classes are visited in ascending order; for each, the class's indices are
    permuted and then client shares are drawn from ``Dirichlet(beta, ..., beta)``.
    """
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels[indices]):
        members = rng.permutation(indices[labels[indices] == c])
        shares = rng.dirichlet(np.full(num_clients, beta))
        cuts = (np.cumsum(shares) * members.size).astype(np.int64)[:-1]
        for k, part in enumerate(np.split(members, cuts)):
            buckets[k].extend(int(i) for i in part)
    return buckets


def partition(dataset: Dataset, num_clients: int, scheme: str = "iid", seed: int = 0,
              indices: Iterable[int] | None = None) -> Partition:
    """Split ``indices`` (default: the whole dataset) across ``num_clients`` clients.

    ``iid`` shuffles by seed and deals round-robin. ``dirichlet(beta)`` draws
    per-class shares; a draw that leaves a client empty is redrawn up to 100
    times, after which each empty client takes one example from the currently
    largest client.
    """
    if num_clients < 2:
        raise PartitionError("need at least two clients")
    kind, beta = parse_scheme(scheme)
    pool = np.arange(len(dataset)) if indices is None else np.asarray(sorted(set(indices)), dtype=np.int64)
    if pool.size < num_clients:
        raise PartitionError(f"{pool.size} examples cannot fill {num_clients} clients")
    rng = np.random.default_rng(seed)
    labels = dataset.y

    if kind == "iid":
        counts = np.bincount(labels[pool], minlength=dataset.class_count)
        if counts[counts > 0].min() < num_clients:
            raise PartitionError("iid split needs at least num_clients examples of each present class")
        order = rng.permutation(pool)
        buckets = [sorted(int(i) for i in order[k::num_clients]) for k in range(num_clients)]
        return Partition(dict(enumerate(buckets)), "iid")

    for _ in range(100):
        buckets = dirichlet_split(labels, pool, num_clients, beta, rng)
        if all(buckets):
            break
    for k in range(num_clients):
        if not buckets[k]:
            donor = max(range(num_clients), key=lambda j: (len(buckets[j]), -j))
            buckets[donor].sort()
            buckets[k].append(buckets[donor].pop())
    return Partition({k: sorted(b) for k, b in enumerate(buckets)}, f"dirichlet({beta:g})")
