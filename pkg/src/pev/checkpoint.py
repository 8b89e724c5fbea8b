"""Variance-gated checkpoint retention and the ``PEVC`` binary container.

Container layout (little-endian)::

    "PEVC"  u32 version=1
    metadata: u16 n_widths, u32 widths[n_widths], u64 d, 32-byte config hash,
              u32 n_clients, u8 aggregation (0=participants, 1=literal_n),
              u32 n_checkpoints, f64 w_1[d]
    per checkpoint: u32 round, f64 V_t, u16 n_updates, u32 client_ids[n_updates],
              u8 precision (0=lossless, 1=half), then w_t followed by each
              update, every tensor in layer order and row-major.

Lossless tensors are raw binary64. Half tensors are prefixed by a binary64
power-of-two scale and stored as binary16 of ``value / scale``, which keeps the
round-trip error within ``2**-11 * max|value|`` for every tensor regardless of
its magnitude.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .model import ClientUpdate, ModelParams, layer_shapes

logger = logging.getLogger(__name__)

MAGIC = b"PEVC"
VERSION = 1
PRECISIONS = ("lossless", "half")
AGGREGATIONS = ("participants", "literal_n")
VARIANCE_MODES = ("coordinate_mean", "gradient_total")

# Size of everything in the metadata block except w_1 and the width list.
_FIXED_HEADER = 4 + 4 + 2 + 8 + 32 + 4 + 1 + 4


@dataclass(frozen=True)
class Checkpoint:
    round: int
    w_t: ModelParams
    updates: tuple[ClientUpdate, ...]
    variance: float
    precision: str = "lossless"

    @property
    def client_ids(self) -> list[int]:
        return [u.client_id for u in self.updates]


@dataclass
class CheckpointStore:
    arch: tuple[int, ...]
    initial: ModelParams
    config_hash: bytes = b"\0" * 32
    n_clients: int = 0
    aggregation: str = "participants"
    checkpoints: list[Checkpoint] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.checkpoints)

    def __iter__(self):
        return iter(self.checkpoints)

    def append(self, ckpt: Checkpoint):
        if self.checkpoints and ckpt.round <= self.checkpoints[-1].round:
            raise ConfigError(f"checkpoint rounds must increase: {ckpt.round} after {self.checkpoints[-1].round}")
        if ckpt.w_t.arch != self.arch:
            raise ConfigError(f"checkpoint arch {ckpt.w_t.arch} does not match store arch {self.arch}")
        self.checkpoints.append(ckpt)

    @property
    def total_dim(self) -> int:
        return self.initial.total_dim

    def scalar_count(self) -> int:
        """Scalars held across all checkpoints (w_t plus every update)."""
        return sum((1 + len(c.updates)) * self.total_dim for c in self.checkpoints)

    def equals(self, other: "CheckpointStore") -> bool:
        if (self.arch, self.config_hash, self.n_clients, self.aggregation, len(self)) != (
            other.arch, other.config_hash, other.n_clients, other.aggregation, len(other)
        ):
            return False
        if not self.initial.equals(other.initial):
            return False
        for a, b in zip(self.checkpoints, other.checkpoints):
            if (a.round, a.precision, a.client_ids) != (b.round, b.precision, b.client_ids):
                return False
            if struct.pack("<d", a.variance) != struct.pack("<d", b.variance):
                return False
            if not a.w_t.equals(b.w_t):
                return False
            if not all(x.delta.equals(y.delta) and x.round == y.round for x, y in zip(a.updates, b.updates)):
                return False
        return True


# ---------------------------------------------------------------------------
# variance gate
# ---------------------------------------------------------------------------

def update_variance(updates: Sequence[ClientUpdate]) -> float:
    """Mean over coordinates of the across-client population variance."""
    if not updates:
        raise ConfigError("update_variance needs at least one update")
    flat = np.stack([u.delta.flatten() for u in updates])
    return float(flat.var(axis=0).mean())


def round_variance(updates: Sequence[ClientUpdate], mode: str = "coordinate_mean", lr: float = 1.0) -> float:
    """Scalar statistic compared against the checkpoint threshold.

    ``coordinate_mean`` is :func:`update_variance` as is. ``gradient_total``
    expresses the same spread in gradient units (delta / lr) and sums it over
    all ``d`` coordinates, i.e. the trace of the across-client covariance of
    the per-round gradient estimates.
    """
    v = update_variance(updates)
    if mode == "coordinate_mean":
        return v
    if mode == "gradient_total":
        if lr == 0:
            return 0.0
        return v * updates[0].delta.total_dim / (lr * lr)
    raise ConfigError(f"unknown variance mode {mode!r}; expected one of {VARIANCE_MODES}")


def maybe_checkpoint(
    t: int,
    tau: int,
    theta: float,
    w_t: ModelParams,
    updates: Sequence[ClientUpdate],
    *,
    variance_mode: str = "coordinate_mean",
    lr: float = 1.0,
    precision: str = "lossless",
) -> Checkpoint | None:
    """Return a checkpoint iff ``t % tau == 0`` and the round variance exceeds ``theta``."""
    if t < 1 or tau < 1:
        raise ConfigError(f"need t >= 1 and tau >= 1 (got t={t}, tau={tau})")
    if t % tau != 0 or not updates:
        return None
    v = round_variance(updates, variance_mode, lr)
    if not v > theta:
        return None
    ordered = tuple(sorted(updates, key=lambda u: u.client_id))
    return Checkpoint(round=t, w_t=w_t, updates=ordered, variance=v, precision=precision)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _half_scale(t: np.ndarray) -> float:
    m = float(np.abs(t).max()) if t.size else 0.0
    if m == 0.0 or not math.isfinite(m):
        return 1.0
    return math.ldexp(1.0, math.frexp(m)[1])


def _write_tensor(fh: BinaryIO, t: np.ndarray, precision: str):
    if precision == "lossless":
        fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    else:
        if not np.isfinite(t).all():
            raise ConfigError("cannot store non-finite values in half precision")
        scale = _half_scale(t)
        fh.write(struct.pack("<d", scale))
        fh.write(np.ascontiguousarray(t / scale, dtype="<f2").tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self, shape: tuple[int, ...], precision: str, what: str) -> np.ndarray:
        n = int(np.prod(shape))
        if precision == "lossless":
            raw = np.frombuffer(self.take(8 * n, what), dtype="<f8")
            return raw.astype(np.float64).reshape(shape)
        (scale,) = self.unpack("<d", what)
        raw = np.frombuffer(self.take(2 * n, what), dtype="<f2")
        return (raw.astype(np.float64) * scale).reshape(shape)

    def params(self, arch, precision: str, what: str) -> ModelParams:
        return ModelParams(tuple(self.tensor(s, precision, what) for s in layer_shapes(arch)), arch)


def save(store: CheckpointStore, path: str | Path):
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<H", len(store.arch)))
        fh.write(struct.pack(f"<{len(store.arch)}I", *store.arch))
        fh.write(struct.pack("<Q", store.total_dim))
        fh.write(store.config_hash.ljust(32, b"\0")[:32])
        fh.write(struct.pack("<IBI", store.n_clients, AGGREGATIONS.index(store.aggregation), len(store)))
        for t in store.initial.tensors:
            _write_tensor(fh, t, "lossless")
        for c in store.checkpoints:
            fh.write(struct.pack("<IdH", c.round, c.variance, len(c.updates)))
            fh.write(struct.pack(f"<{len(c.updates)}I", *c.client_ids))
            fh.write(struct.pack("<B", PRECISIONS.index(c.precision)))
            for t in c.w_t.tensors:
                _write_tensor(fh, t, c.precision)
            for u in c.updates:
                for t in u.delta.tensors:
                    _write_tensor(fh, t, c.precision)


def load(path: str | Path) -> CheckpointStore:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise BadMagicError(f"not a PEV checkpoint file: {path}")
    r = _Reader(buf)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version} is not supported (expected {VERSION})")
    (n_widths,) = r.unpack("<H", "arch length")
    arch = tuple(int(a) for a in r.unpack(f"<{n_widths}I", "arch widths"))
    (d,) = r.unpack("<Q", "dimension")
    try:
        shapes = layer_shapes(arch)
    except ConfigError as e:
        raise ShapeMismatchError(f"invalid arch in metadata: {e}") from None
    if d != sum(int(np.prod(s)) for s in shapes):
        raise ShapeMismatchError(f"metadata dimension {d} does not match arch {arch}")
    config_hash = r.take(32, "config hash")
    n_clients, agg, count = r.unpack("<IBI", "run metadata")
    if agg >= len(AGGREGATIONS):
        raise ShapeMismatchError(f"unknown aggregation code {agg}")
    initial = r.params(arch, "lossless", "initial model")
    store = CheckpointStore(arch, initial, config_hash, n_clients, AGGREGATIONS[agg])
    for k in range(count):
        rnd, variance, n_upd = r.unpack("<IdH", f"checkpoint {k} header")
        ids = r.unpack(f"<{n_upd}I", f"checkpoint {k} client ids")
        (flag,) = r.unpack("<B", f"checkpoint {k} precision")
        if flag >= len(PRECISIONS):
            raise ShapeMismatchError(f"checkpoint {k} has unknown precision flag {flag}")
        precision = PRECISIONS[flag]
        w_t = r.params(arch, precision, f"checkpoint {k} model")
        updates = tuple(
            ClientUpdate(int(cid), int(rnd), r.params(arch, precision, f"checkpoint {k} update {cid}"))
            for cid in ids
        )
        store.append(Checkpoint(int(rnd), w_t, updates, float(variance), precision))
    if r.pos != len(buf):
        raise ShapeMismatchError(f"{len(buf) - r.pos} trailing bytes after {count} checkpoints")
    return store


def header_bytes(arch: Sequence[int]) -> int:
    """Bytes taken by magic, version, and the metadata block (including w_1)."""
    d = sum(int(np.prod(s)) for s in layer_shapes(arch))
    return _FIXED_HEADER + 4 * len(arch) + 8 * d


def record_overhead(n_updates: int) -> int:
    """Non-tensor bytes in one lossless checkpoint record."""
    return 4 + 8 + 2 + 4 * n_updates + 1


def config_digest(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()
