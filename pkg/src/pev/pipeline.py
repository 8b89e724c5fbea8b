"""End-to-end orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import dataclasses
import logging
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointStore
from .config import Settings
from .data import Dataset, PartitionSpec, load_csv, make_blobs, partition_dirichlet, train_test_split
from .engine import RunConfig, TrainingResult, initial_model, run_training
from .errors import BadMagicError, TruncatedFileError, VersionMismatchError
from .fingerprint import Fingerprint, calibrate_threshold, fingerprint_generate, verify
from .metrics import SweepRow, accuracy, accuracy_drop_pct
from .model import ModelParams, layer_shapes
from .unlearn import retrain_oracle, uniform_dp_baseline, unlearn

logger = logging.getLogger(__name__)


@dataclass
class Task:
    shards: list[Dataset]
    test: Dataset

    @property
    def dim(self) -> int:
        return self.test.inputs.shape[1]

    @property
    def classes(self) -> int:
        return max(self.test.class_count, *(s.class_count for s in self.shards))


def build_task(settings: Settings, seed: int | None = None) -> Task:
    """Dataset, held-out split, and client shards; all seeded from ``seed`` (default master_seed)."""
    seed = settings.run.master_seed if seed is None else seed
    d = settings.data
    if d.data_csv:
        full = load_csv(d.data_csv)
    else:
        full = make_blobs(d.classes, d.dim, d.per_class, d.spread, seed)
    train, test = train_test_split(full, d.test_fraction, seed)
    shards = partition_dirichlet(train, PartitionSpec(settings.run.n_clients, d.dirichlet_alpha, seed))
    return Task(shards, test)


def model_dim(cfg: RunConfig, task: Task) -> int:
    return initial_model(cfg, task.dim, task.classes).total_dim


def fingerprints_for(cfg: RunConfig, d: int) -> dict[int, Fingerprint] | None:
    """Every client embeds its own fingerprint when epsilon > 0."""
    if cfg.fingerprint_epsilon == 0:
        return None
    return {i: fingerprint_generate(i, d, cfg.master_seed, cfg.fingerprint_epsilon) for i in range(cfg.n_clients)}


def threshold_for(settings: Settings, d: int) -> float:
    if settings.run.delta_threshold is not None:
        return settings.run.delta_threshold
    return calibrate_threshold(d, settings.threshold_samples, settings.threshold_quantile, settings.run.master_seed)


def pick_target(store: CheckpointStore) -> int:
    """Client present in the most checkpoints (lowest id on ties); 0 for an empty store."""
    counts = Counter(c for ckpt in store for c in ckpt.client_ids)
    if not counts:
        return 0
    best = max(counts.values())
    return min(c for c, k in counts.items() if k == best)


def train(settings: Settings, task: Task, jobs: int = 1) -> TrainingResult:
    cfg = settings.run
    return run_training(cfg, task.shards, fingerprints_for(cfg, model_dim(cfg, task)), eval_data=task.test,
                        jobs=jobs)


def retrain(settings: Settings, task: Task, u: int, jobs: int = 1) -> TrainingResult:
    cfg = settings.run
    return retrain_oracle(cfg, task.shards, u, fingerprints_for(cfg, model_dim(cfg, task)), eval_data=task.test,
                          jobs=jobs)


def run_sweep(settings: Settings, jobs: int = 1) -> list[SweepRow]:
    """Noise sweep over ``sweep_seeds`` independent runs.

    Seed ``i`` re-seeds everything (data, init, sampling, noise) with
    ``master_seed + i``; every drop is measured against the retrain oracle
    of that same seed.
    """
    rows: list[SweepRow] = []
    for i in range(settings.sweep_seeds):
        seed = settings.run.master_seed + i
        s = dataclasses.replace(settings, run=settings.run.replace(master_seed=seed))
        task = build_task(s)
        trained = train(s, task, jobs)
        u = s.target if s.target is not None else pick_target(trained.store)
        oracle = retrain(s, task, u, jobs)
        ref = accuracy(oracle.model, task.test)
        rows.append(SweepRow("retrain", 0.0, seed, ref, 0.0, oracle.wall_time_ms))

        d = trained.model.total_dim
        fp = fingerprint_generate(u, d, seed, s.run.fingerprint_epsilon)
        delta = threshold_for(s, d) if s.run.fingerprint_epsilon > 0 else None

        def row(method: str, sigma: float, rep) -> SweepRow:
            acc = accuracy(rep.model, task.test)
            verified = None
            if delta is not None:
                verified = verify(fp, rep.model, trained.store.initial, delta).success
            return SweepRow(method, float(sigma), seed, acc, accuracy_drop_pct(ref, acc), rep.wall_time_ms, verified)

        rows.append(row("calibration_only", 0.0, unlearn(trained.store, u, 0.0, seed)))
        for sigma in settings.sweep_sigmas:
            rows.append(row("pev", sigma, unlearn(trained.store, u, sigma, seed)))
            rows.append(row("uniform_dp", sigma, uniform_dp_baseline(trained.store, u, sigma, seed)))
        logger.info("sweep seed %d done (target %d, retrain accuracy %.4f)", seed, u, ref)
    return rows


# ---------------------------------------------------------------------------
# model files: "PEVM", u32 version, u16 n_widths, u32 widths[], f64 tensors
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"PEVM"


def save_model(model: ModelParams, path: str | Path):
    with Path(path).open("wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<IH", 1, len(model.arch)))
        fh.write(struct.pack(f"<{len(model.arch)}I", *model.arch))
        fh.write(np.ascontiguousarray(model.flatten(), dtype="<f8").tobytes())


def load_model(path: str | Path) -> ModelParams:
    buf = Path(path).read_bytes()
    if buf[:4] != MODEL_MAGIC:
        raise BadMagicError(f"not a PEV model file: {path}")
    if len(buf) < 10:
        raise TruncatedFileError(f"model file truncated: {path}")
    version, n = struct.unpack_from("<IH", buf, 4)
    if version != 1:
        raise VersionMismatchError(f"model file version {version} is not supported")
    arch = struct.unpack_from(f"<{n}I", buf, 10)
    start = 10 + 4 * n
    d = sum(int(np.prod(s)) for s in layer_shapes(arch))
    if len(buf) - start != 8 * d:
        raise TruncatedFileError(f"model file {path} holds {len(buf) - start} tensor bytes, expected {8 * d}")
    return ModelParams.unflatten(arch, np.frombuffer(buf, dtype="<f8", offset=start).astype(np.float64))
