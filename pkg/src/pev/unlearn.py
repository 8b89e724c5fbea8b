"""Client removal from a checkpoint store.

:func:`unlearn` rebuilds a model from the initial parameters by replaying
only the checkpointed rounds. At each of them the target client's delta is
dropped, every remaining delta gets Gaussian noise whose per-layer standard
deviation is ``sigma * S_l``, and the calibrated deltas are averaged into the
running model. ``S_l`` is the spread of the remaining clients' deltas at that
layer. :func:`uniform_dp_baseline` uses one global spread for every layer;
:func:`retrain_oracle` trains from scratch without the client.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, CheckpointStore
from .engine import RunConfig, TrainingResult, apply_mean, run_training
from .errors import ConfigError, EmptyStoreError
from .model import ClientUpdate, ModelParams
from .seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SensitivityProfile:
    values: tuple[float, ...]
    round: int

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class UnlearnReport:
    target: int
    model: ModelParams
    checkpoints_used: int
    noise_draws: int
    wall_time_ms: int
    sigma: float
    method: str = "pev"
    accuracy_before: float | None = None
    accuracy_after: float | None = None

    def to_record(self) -> str:
        return json.dumps(
            {
                "target": self.target,
                "method": self.method,
                "sigma": self.sigma,
                "checkpoints_used": self.checkpoints_used,
                "noise_draws": self.noise_draws,
                "wall_time_ms": self.wall_time_ms,
                "accuracy_before": self.accuracy_before,
                "accuracy_after": self.accuracy_after,
            },
            sort_keys=True,
        )


def _remaining(ckpt: Checkpoint, exclude: int) -> list[ClientUpdate]:
    return [u for u in ckpt.updates if u.client_id != exclude]


def _spread(arrays: Sequence[np.ndarray]) -> float:
    if len(arrays) < 2:
        return 0.0
    stacked = np.stack([a.ravel() for a in arrays])
    return float(np.sqrt(stacked.var(axis=0).mean()))


def layer_sensitivity(ckpt: Checkpoint, exclude: int, layer: int) -> float:
    """Root of the mean per-coordinate population variance at ``layer`` across remaining clients."""
    n_layers = ckpt.w_t.n_layers
    if not 0 <= layer < n_layers:
        raise ConfigError(f"layer index {layer} out of range [0, {n_layers})")
    return _spread([u.delta.tensors[layer] for u in _remaining(ckpt, exclude)])


def sensitivity_profile(ckpt: Checkpoint, exclude: int) -> SensitivityProfile:
    return SensitivityProfile(tuple(layer_sensitivity(ckpt, exclude, l) for l in range(ckpt.w_t.n_layers)),
                              ckpt.round)


def global_profile(ckpt: Checkpoint, exclude: int) -> SensitivityProfile:
    """One spread over all coordinates, repeated for every layer."""
    s = _spread([u.delta.flatten() for u in _remaining(ckpt, exclude)])
    return SensitivityProfile((s,) * ckpt.w_t.n_layers, ckpt.round)


def calibrate_update(delta: ModelParams, profile: SensitivityProfile, sigma: float, rng_seed: int) -> ModelParams:
    """Add N(0, (sigma * S_l)^2) noise to every coordinate of layer ``l``.

    Each layer draws from its own stream keyed by ``(rng_seed, l)``. Layers
    with zero scale are returned untouched, bit for bit.
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if len(profile) != delta.n_layers:
        raise ConfigError(f"profile has {len(profile)} layers, update has {delta.n_layers}")
    out = []
    for l, (t, s) in enumerate(zip(delta.tensors, profile.values)):
        scale = sigma * s
        if scale == 0:
            out.append(t)
        else:
            rng = np.random.Generator(np.random.PCG64(derive_seed(rng_seed, l)))
            out.append(t + rng.normal(0.0, scale, size=t.shape))
    return ModelParams(tuple(out), delta.arch)


def noise_seed(master_seed: int, round: int, client: int) -> int:
    return derive_seed(master_seed, "unlearn", round, client)


def _reconstruct(
    store: CheckpointStore,
    u: int,
    sigma: float,
    master_seed: int,
    profile_fn: Callable[[Checkpoint, int], SensitivityProfile],
    method: str,
) -> UnlearnReport:
    if len(store) == 0:
        raise EmptyStoreError("checkpoint store is empty; nothing to reconstruct from")
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    start = time.perf_counter()
    w_hat = store.initial
    used = 0
    draws = 0
    for ckpt in store.checkpoints:
        remaining = _remaining(ckpt, u)
        if not remaining:
            logger.info("checkpoint at round %d holds only client %d; it contributes nothing", ckpt.round, u)
            continue
        removed = len(remaining) < len(ckpt.updates)
        if store.aggregation == "literal_n":
            denominator = store.n_clients - 1 if removed else store.n_clients
        else:
            denominator = len(remaining)
        profile = profile_fn(ckpt, u)
        calibrated = []
        for upd in remaining:
            calibrated.append(calibrate_update(upd.delta, profile, sigma, noise_seed(master_seed, ckpt.round,
                                                                                      upd.client_id)))
            if sigma > 0:
                draws += sum(t.size for t, s in zip(upd.delta.tensors, profile.values) if s > 0)
        w_hat = apply_mean(w_hat, calibrated, denominator)
        used += 1
    elapsed = int(round((time.perf_counter() - start) * 1000))
    return UnlearnReport(u, w_hat, used, draws, elapsed, float(sigma), method)


def unlearn(store: CheckpointStore, u: int, sigma: float, master_seed: int) -> UnlearnReport:
    """Layer-adaptive removal of client ``u``."""
    return _reconstruct(store, u, sigma, master_seed, sensitivity_profile, "pev")


def uniform_dp_baseline(store: CheckpointStore, u: int, sigma: float, master_seed: int) -> UnlearnReport:
    """Same replay with a single global sensitivity for all layers."""
    return _reconstruct(store, u, sigma, master_seed, global_profile, "uniform_dp")


def retrain_oracle(cfg: RunConfig, shards: Sequence, u: int, fingerprints=None, *, eval_data=None,
                   jobs: int = 1) -> TrainingResult:
    """Train from the same initial model with client ``u`` never sampled.

    Retained clients keep their per-(round, client) seeds, so only the
    trajectory shift caused by the removal differs from the original run.
    """
    if not 0 <= u < cfg.n_clients:
        raise ConfigError(f"target client {u} outside [0, {cfg.n_clients})")
    return run_training(cfg, shards, fingerprints, eval_data=eval_data, exclude=frozenset({u}), jobs=jobs)
