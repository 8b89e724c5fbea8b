"""Synthetic blob datasets, Dirichlet label partitioning, and CSV loading."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError
from .seeding import rng_for

logger = logging.getLogger(__name__)

MAX_PARTITION_RETRIES = 1000


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    dirichlet_alpha: float
    seed: int


def make_blobs(classes: int, dim: int, per_class: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters around seeded standard-normal centers.

    Rows are grouped by class (all of class 0 first, then class 1, ...).
    """
    if classes < 2 or dim < 2 or per_class < 1 or not spread > 0:
        raise ConfigError(
            f"make_blobs needs classes>=2, dim>=2, per_class>=1, spread>0 "
            f"(got {classes}, {dim}, {per_class}, {spread})"
        )
    rng = rng_for(seed, "blobs")
    centers = rng.standard_normal((classes, dim))
    noise = rng.standard_normal((classes, per_class, dim))
    inputs = (centers[:, None, :] + spread * noise).reshape(classes * per_class, dim)
    labels = np.repeat(np.arange(classes), per_class)
    return Dataset(inputs, labels, classes)


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; every class keeps at least one training row."""
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = rng_for(seed, "split")
    train_idx, test_idx = [], []
    for c in range(data.class_count):
        idx = np.flatnonzero(data.labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = min(int(round(test_fraction * len(idx))), len(idx) - 1)
        test_idx.append(idx[:k])
        train_idx.append(idx[k:])
    return data.subset(np.sort(np.concatenate(train_idx))), data.subset(np.sort(np.concatenate(test_idx)))


def partition_dirichlet(data: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split ``data`` into disjoint client shards with Dirichlet label skew.

    For each class, a proportion vector over clients is drawn from
    ``Dir(alpha)`` and that class's rows are cut accordingly. Draws are
    repeated until every client holds at least one row.
    """
    n = spec.n_clients
    if n < 2:
        raise ConfigError(f"n_clients must be >= 2, got {n}")
    if not spec.dirichlet_alpha > 0:
        raise ConfigError(f"dirichlet_alpha must be > 0, got {spec.dirichlet_alpha}")
    if len(data) < n:
        raise ConfigError(f"cannot give {n} clients a sample each from {len(data)} rows")

    rng = rng_for(spec.seed, "partition")
    by_class = [np.flatnonzero(data.labels == c) for c in range(data.class_count)]
    for attempt in range(MAX_PARTITION_RETRIES):
        shards: list[list[np.ndarray]] = [[] for _ in range(n)]
        for idx in by_class:
            if len(idx) == 0:
                continue
            idx = idx[rng.permutation(len(idx))]
            props = rng.dirichlet(np.full(n, spec.dirichlet_alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for client, part in enumerate(np.split(idx, cuts)):
                shards[client].append(part)
        sizes = [sum(len(p) for p in s) for s in shards]
        if min(sizes) >= 1:
            if attempt:
                logger.debug("dirichlet partition accepted after %d redraws", attempt)
            return [data.subset(np.sort(np.concatenate(s))) for s in shards]
    # Heavy skew (tiny alpha, n close to N) can starve clients indefinitely;
    # fall back to a round-robin seed row per client then Dirichlet for the rest.
    logger.warning("dirichlet partition fell back to seeded round-robin after %d redraws", MAX_PARTITION_RETRIES)
    order = rng.permutation(len(data))
    owners = np.empty(len(data), dtype=np.int64)
    owners[order[:n]] = np.arange(n)
    rest = order[n:]
    owners[rest] = rng.choice(n, size=len(rest), p=rng.dirichlet(np.full(n, spec.dirichlet_alpha)))
    return [data.subset(np.flatnonzero(owners == c)) for c in range(n)]


def _is_number(field: str) -> bool:
    try:
        float(field)
    except ValueError:
        return False
    return True


def load_csv(path: str | Path) -> Dataset:
    """Read ``label,feature,...`` rows. A non-numeric first field on line 1 marks a header."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(f.strip() for f in r)]
    if rows and not _is_number(rows[0][0].strip()):
        rows = rows[1:]
    if not rows:
        raise DatasetError(f"empty dataset: {path}")

    width = len(rows[0])
    if width < 2:
        raise DatasetError(f"row 0 needs a label and at least one feature")
    labels, feats = [], []
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DatasetError(f"row {i} has {len(row) - 1} features, expected {width - 1}")
        try:
            label = float(row[0])
            values = [float(f) for f in row[1:]]
        except ValueError:
            raise DatasetError(f"row {i} has a non-numeric field") from None
        if label != int(label) or label < 0:
            raise DatasetError(f"row {i} label {row[0]!r} is not a non-negative integer")
        labels.append(int(label))
        feats.append(values)
    labels_arr = np.asarray(labels, dtype=np.int64)
    return Dataset(np.asarray(feats, dtype=np.float64), labels_arr, int(labels_arr.max()) + 1)
