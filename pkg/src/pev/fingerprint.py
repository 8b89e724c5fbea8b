"""Client fingerprints in parameter space and the removal verdict.

A fingerprint is a seeded random unit direction ``F_u`` of dimension ``d``.
During training client ``u`` adds ``epsilon * F_u`` to every delta it sends.
Influence on a model is the absolute cosine between the model's displacement
from a reference (the initial model) and ``F_u``; a model that never absorbed
the fingerprint shows the null distribution of ``|cos|`` between a fixed and a
uniformly random unit vector, which is what :func:`calibrate_threshold` samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import ModelParams
from .seeding import rng_for

SUCCESS = "success"
FAILURE = "failure"


@dataclass(frozen=True)
class Fingerprint:
    client_id: int
    direction: np.ndarray
    epsilon: float = 0.0
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.direction.size


@dataclass(frozen=True)
class Verdict:
    target: int
    influence: float
    threshold: float
    outcome: str

    @property
    def success(self) -> bool:
        return self.outcome == SUCCESS

    def to_record(self) -> str:
        return json.dumps(
            {"target": self.target, "I_F": self.influence, "delta": self.threshold, "outcome": self.outcome},
            sort_keys=True,
        )


def fingerprint_generate(u: int, d: int, master_seed: int, epsilon: float = 0.0) -> Fingerprint:
    if d < 1:
        raise ConfigError(f"fingerprint dimension must be >= 1, got {d}")
    if epsilon < 0:
        raise ConfigError(f"fingerprint epsilon must be >= 0, got {epsilon}")
    v = rng_for(master_seed, "fingerprint", u).standard_normal(d)
    return Fingerprint(u, v / np.linalg.norm(v), float(epsilon), master_seed)


def embed(delta: ModelParams, fp: Fingerprint) -> ModelParams:
    if fp.dim != delta.total_dim:
        raise ConfigError(f"fingerprint has dimension {fp.dim}, update has {delta.total_dim}")
    if fp.epsilon == 0:
        return delta
    return ModelParams.unflatten(delta.arch, delta.flatten() + fp.epsilon * fp.direction)


def _abs_cos(v: np.ndarray, direction: np.ndarray) -> float:
    nv = np.linalg.norm(v)
    if nv == 0:
        return 0.0
    return float(min(1.0, abs(v @ direction) / (nv * np.linalg.norm(direction))))


def influence(fp: Fingerprint, w_hat: ModelParams, w_ref: ModelParams) -> float:
    """``|cos(flatten(w_hat - w_ref), F_u)|``; zero displacement gives 0."""
    disp = w_hat.flatten() - w_ref.flatten()
    if disp.size != fp.dim:
        raise ConfigError(f"fingerprint has dimension {fp.dim}, model has {disp.size}")
    return _abs_cos(disp, fp.direction)


def decide(influence_value: float, delta: float, target: int = -1) -> Verdict:
    if not delta > 0:
        raise ConfigError(f"verification threshold must be > 0, got {delta}")
    outcome = SUCCESS if influence_value < delta else FAILURE
    return Verdict(target, float(influence_value), float(delta), outcome)


def verify(fp: Fingerprint, w_hat: ModelParams, w_ref: ModelParams, delta: float) -> Verdict:
    return decide(influence(fp, w_hat, w_ref), delta, fp.client_id)


def calibrate_threshold(d: int, n_samples: int = 10000, quantile: float = 0.999, seed: int = 0) -> float:
    """Upper ``quantile`` of ``|cos|`` between a fixed unit vector and random unit vectors in ``R^d``."""
    if d < 1:
        raise ConfigError(f"d must be >= 1, got {d}")
    if n_samples < 1000:
        raise ConfigError(f"n_samples must be >= 1000, got {n_samples}")
    if not 0.9 < quantile < 1:
        raise ConfigError(f"quantile must lie in (0.9, 1), got {quantile}")
    rng = rng_for(seed, "threshold", d)
    ref = rng.standard_normal(d)
    ref /= np.linalg.norm(ref)
    chunk = max(1, min(n_samples, 4_000_000 // d))
    out = np.empty(n_samples)
    for start in range(0, n_samples, chunk):
        x = rng.standard_normal((min(chunk, n_samples - start), d))
        out[start:start + len(x)] = np.abs(x @ ref) / np.linalg.norm(x, axis=1)
    return float(np.quantile(out, quantile))
