"""Federated training loop: client sampling, local SGD, FedAvg, and checkpointing."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import AGGREGATIONS, PRECISIONS, VARIANCE_MODES, CheckpointStore, maybe_checkpoint, round_variance
from .errors import ConfigError
from .fingerprint import embed
from .metrics import accuracy
from .model import ClientUpdate, ModelParams, default_arch, init_params, local_train
from .seeding import derive_seed, rng_for

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    n_clients: int = 100
    clients_per_round: int = 10
    rounds: int = 200
    tau: int = 10
    theta: float = 0.01
    sigma: float = 0.5
    delta_threshold: float | None = None  # None: calibrate from the null distribution
    lr: float = 0.01
    batch_size: int = 32
    local_epochs: int = 1
    fingerprint_epsilon: float = 0.05
    master_seed: int = 0
    compression: str = "lossless"
    aggregation: str = "participants"
    variance_mode: str = "gradient_total"
    hidden: tuple[int, ...] = (32, 16)

    def __post_init__(self):
        self.validate()

    def validate(self):
        def bad(key: str, msg: str):
            raise ConfigError(f"{key}: {msg}")

        if self.n_clients < 1:
            bad("n_clients", f"must be >= 1, got {self.n_clients}")
        if not 1 <= self.clients_per_round <= self.n_clients:
            bad("clients_per_round", f"must satisfy 1 <= clients_per_round <= n_clients "
                f"(clients_per_round={self.clients_per_round}, n_clients={self.n_clients})")
        if self.rounds < 1:
            bad("rounds", f"must be >= 1, got {self.rounds}")
        if self.tau < 1:
            bad("tau", f"must be >= 1, got {self.tau}")
        if self.sigma < 0:
            bad("sigma", f"must be >= 0, got {self.sigma}")
        if self.delta_threshold is not None and not self.delta_threshold > 0:
            bad("delta_threshold", f"must be > 0, got {self.delta_threshold}")
        if self.lr < 0:
            bad("lr", f"must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            bad("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.local_epochs < 1:
            bad("local_epochs", f"must be >= 1, got {self.local_epochs}")
        if self.fingerprint_epsilon < 0:
            bad("fingerprint_epsilon", f"must be >= 0, got {self.fingerprint_epsilon}")
        if self.compression not in PRECISIONS:
            bad("compression", f"must be one of {PRECISIONS}, got {self.compression!r}")
        if self.aggregation not in AGGREGATIONS:
            bad("aggregation", f"must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.variance_mode not in VARIANCE_MODES:
            bad("variance_mode", f"must be one of {VARIANCE_MODES}, got {self.variance_mode!r}")
        if any(h < 1 for h in self.hidden):
            bad("hidden", f"widths must be positive, got {self.hidden}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def canonical(self) -> str:
        return "\n".join(f"{f.name}={_fmt(getattr(self, f.name))}" for f in dataclasses.fields(self))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical().encode("utf-8")).digest()


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "auto" if v is None else str(v)


@dataclass
class RoundLog:
    round: int
    sampled_clients: list[int]
    variance: float | None
    checkpointed: bool
    global_accuracy: float
    wall_time_ms: int


@dataclass
class TrainingResult:
    model: ModelParams
    store: CheckpointStore
    logs: list[RoundLog] = field(default_factory=list)
    wall_time_ms: int = 0

    def __iter__(self):
        # unpack as (w_T, checkpoints, logs)
        return iter((self.model, self.store, self.logs))


def sample_clients(
    round: int, n: int, m: int, master_seed: int, exclude: frozenset[int] | set[int] = frozenset()
) -> list[int]:
    """``m`` distinct client ids for ``round``, sorted ascending.

    Ids are taken in order from a per-round seeded permutation, skipping
    excluded ids, so removing a client re-draws its slot from the same stream
    while leaving every other choice untouched. With fewer than ``m``
    eligible clients all of them are returned.
    """
    if m > n:
        raise ConfigError(f"clients_per_round={m} exceeds n_clients={n}")
    if m < 1:
        raise ConfigError(f"clients_per_round must be >= 1, got {m}")
    order = rng_for(master_seed, "sample", round).permutation(n)
    chosen = [int(c) for c in order if int(c) not in exclude][:m]
    return sorted(chosen)


def sum_deltas(deltas: Sequence[ModelParams]) -> ModelParams:
    """Left-to-right sum; callers pass deltas in ascending client-id order."""
    total = [t.copy() for t in deltas[0].tensors]
    for d in deltas[1:]:
        for acc, t in zip(total, d.tensors):
            acc += t
    return ModelParams(tuple(total), deltas[0].arch)


def apply_mean(w: ModelParams, deltas: Sequence[ModelParams], denominator: int) -> ModelParams:
    return w + sum_deltas(deltas).divide(denominator)


def aggregate(w_t: ModelParams, updates: Sequence[ClientUpdate], denominator: int | None = None) -> ModelParams:
    """FedAvg step ``w_t + sum(deltas) / denominator`` (default: number of updates)."""
    if not updates:
        raise ConfigError("aggregate needs at least one update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    return apply_mean(w_t, [u.delta for u in ordered], denominator or len(ordered))


def local_seed(master_seed: int, round: int, client: int) -> int:
    return derive_seed(master_seed, "local", round, client)


def initial_model(cfg: RunConfig, dim_in: int, classes: int) -> ModelParams:
    return init_params(default_arch(dim_in, classes, cfg.hidden), derive_seed(cfg.master_seed, "w1"))


def run_training(
    cfg: RunConfig,
    shards: Sequence,
    fingerprints: Mapping[int, object] | None = None,
    *,
    eval_data=None,
    exclude: frozenset[int] | set[int] = frozenset(),
    jobs: int = 1,
) -> TrainingResult:
    """Run ``cfg.rounds`` FedAvg rounds with the adaptive checkpoint gate.

    ``exclude`` removes clients from sampling entirely; this is how the
    retrain oracle is produced. ``fingerprints`` maps client id to a
    :class:`~pev.fingerprint.Fingerprint` embedded into that client's delta
    before the server sees it.
    """
    if len(shards) != cfg.n_clients:
        raise ConfigError(f"n_clients={cfg.n_clients} but {len(shards)} data shards were given")
    dims = {s.inputs.shape[1] for s in shards if len(s.labels)}
    if len(dims) != 1:
        raise ConfigError(f"client shards disagree on feature dimension: {sorted(dims)}")
    classes = max(s.class_count for s in shards)
    w = initial_model(cfg, dims.pop(), classes)
    store = CheckpointStore(w.arch, w, cfg.digest(), cfg.n_clients, cfg.aggregation)
    if eval_data is None:
        eval_data = _pool(shards)

    logs: list[RoundLog] = []
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    start = time.perf_counter()
    try:
        for t in range(1, cfg.rounds + 1):
            t0 = time.perf_counter()
            sampled = sample_clients(t, cfg.n_clients, cfg.clients_per_round, cfg.master_seed, exclude)

            def train_one(c: int, w_snapshot=w, t=t):
                return local_train(w_snapshot, shards[c], cfg.local_epochs, cfg.lr, cfg.batch_size,
                                   local_seed(cfg.master_seed, t, c))

            deltas = list(pool.map(train_one, sampled)) if pool else [train_one(c) for c in sampled]
            updates = []
            for c, delta in zip(sampled, deltas):
                if delta is None:
                    logger.debug("round %d: client %d has no data, skipped", t, c)
                    continue
                if fingerprints is not None and c in fingerprints:
                    delta = embed(delta, fingerprints[c])
                updates.append(ClientUpdate(c, t, delta))

            variance = None
            ckpt = None
            if updates:
                ckpt = maybe_checkpoint(t, cfg.tau, cfg.theta, w, updates, variance_mode=cfg.variance_mode,
                                        lr=cfg.lr, precision=cfg.compression)
                if ckpt is not None:
                    variance = ckpt.variance
                    store.append(ckpt)
                elif t % cfg.tau == 0:
                    variance = round_variance(updates, cfg.variance_mode, cfg.lr)
                denom = cfg.n_clients if cfg.aggregation == "literal_n" else None
                w = aggregate(w, updates, denom)
            else:
                logger.warning("round %d: no client produced an update, round skipped", t)

            logs.append(RoundLog(t, sampled, variance, ckpt is not None, accuracy(w, eval_data),
                                 int(round((time.perf_counter() - t0) * 1000))))
    finally:
        if pool:
            pool.shutdown()
    elapsed = int(round((time.perf_counter() - start) * 1000))
    return TrainingResult(w, store, logs, elapsed)


def _pool(shards: Sequence):
    from .data import Dataset

    nonempty = [s for s in shards if len(s.labels)]
    return Dataset(np.concatenate([s.inputs for s in nonempty]), np.concatenate([s.labels for s in nonempty]),
                   max(s.class_count for s in shards))
