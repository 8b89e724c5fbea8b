"""Dense tanh MLP with exact backpropagation and plain SGD local training.

Parameters are kept as an ordered tuple of tensors ``(W1, b1, W2, b2, ...)``
with ``W`` shaped ``[out, in]``. Each tensor is one "layer" for the purposes of
per-layer statistics elsewhere in the package, so a three-layer MLP exposes six
layers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .seeding import rng_for


@dataclass(frozen=True)
class ModelParams:
    tensors: tuple[np.ndarray, ...]
    arch: tuple[int, ...]

    def __post_init__(self):
        shapes = layer_shapes(self.arch)
        if len(shapes) != len(self.tensors):
            raise ConfigError(f"expected {len(shapes)} tensors for arch {self.arch}, got {len(self.tensors)}")
        for i, (t, s) in enumerate(zip(self.tensors, shapes)):
            if t.shape != s:
                raise ConfigError(f"tensor {i} has shape {t.shape}, arch {self.arch} needs {s}")

    @property
    def n_layers(self) -> int:
        return len(self.tensors)

    @property
    def total_dim(self) -> int:
        return sum(t.size for t in self.tensors)

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors])

    @classmethod
    def unflatten(cls, arch: Sequence[int], vec: np.ndarray) -> "ModelParams":
        arch = tuple(int(a) for a in arch)
        vec = np.asarray(vec, dtype=np.float64)
        shapes = layer_shapes(arch)
        need = sum(int(np.prod(s)) for s in shapes)
        if vec.ndim != 1 or vec.size != need:
            raise ConfigError(f"flat vector of size {vec.size} does not match arch {arch} (d={need})")
        out, pos = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(vec[pos:pos + n].reshape(s).copy())
            pos += n
        return cls(tuple(out), arch)

    @classmethod
    def zeros(cls, arch: Sequence[int]) -> "ModelParams":
        arch = tuple(int(a) for a in arch)
        return cls(tuple(np.zeros(s) for s in layer_shapes(arch)), arch)

    def copy(self) -> "ModelParams":
        return ModelParams(tuple(t.copy() for t in self.tensors), self.arch)

    def _check(self, other: "ModelParams"):
        if other.arch != self.arch:
            raise ConfigError(f"arch mismatch: {self.arch} vs {other.arch}")

    def __add__(self, other: "ModelParams") -> "ModelParams":
        self._check(other)
        return ModelParams(tuple(a + b for a, b in zip(self.tensors, other.tensors)), self.arch)

    def __sub__(self, other: "ModelParams") -> "ModelParams":
        self._check(other)
        return ModelParams(tuple(a - b for a, b in zip(self.tensors, other.tensors)), self.arch)

    def scale(self, c: float) -> "ModelParams":
        return ModelParams(tuple(c * t for t in self.tensors), self.arch)

    def divide(self, k: float) -> "ModelParams":
        return ModelParams(tuple(t / k for t in self.tensors), self.arch)

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact comparison."""
        return self.arch == other.arch and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.tensors, other.tensors)
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    round: int
    delta: ModelParams


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.labels.ndim != 1 or len(self.inputs) != len(self.labels):
            raise ConfigError(f"bad batch shapes {self.inputs.shape} / {self.labels.shape}")
        if len(self.labels) < 1:
            raise ConfigError("batch must hold at least one sample")


def layer_shapes(arch: Sequence[int]) -> list[tuple[int, ...]]:
    if len(arch) < 2 or any(int(a) < 1 for a in arch):
        raise ConfigError(f"invalid architecture {tuple(arch)}")
    shapes: list[tuple[int, ...]] = []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        shapes.append((int(fan_out), int(fan_in)))
        shapes.append((int(fan_out),))
    return shapes


def default_arch(dim_in: int, classes: int, hidden: Sequence[int] = (32, 16)) -> tuple[int, ...]:
    return (int(dim_in), *(int(h) for h in hidden), int(classes))


def init_params(arch: Sequence[int], seed: int) -> ModelParams:
    """Scaled-normal weights (std 1/sqrt(fan_in)), zero biases."""
    arch = tuple(int(a) for a in arch)
    rng = rng_for(seed, "init")
    tensors = []
    for shape in layer_shapes(arch):
        if len(shape) == 2:
            tensors.append(rng.standard_normal(shape) / np.sqrt(shape[1]))
        else:
            tensors.append(np.zeros(shape))
    return ModelParams(tuple(tensors), arch)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(model: ModelParams, batch: Batch):
    if batch.inputs.shape[1] != model.arch[0]:
        raise ConfigError(f"batch has {batch.inputs.shape[1]} features, model expects {model.arch[0]}")
    if batch.labels.min() < 0 or batch.labels.max() >= model.arch[-1]:
        raise ConfigError(f"labels must lie in [0, {model.arch[-1]})")


def _activations(model: ModelParams, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    n_dense = len(model.tensors) // 2
    h = x
    for k in range(n_dense):
        W, b = model.tensors[2 * k], model.tensors[2 * k + 1]
        z = h @ W.T + b
        h = np.tanh(z) if k < n_dense - 1 else z
        acts.append(h)
    return acts


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_p[np.arange(len(labels)), labels].mean())


def forward(model: ModelParams, batch: Batch) -> tuple[np.ndarray, float]:
    """Return ``(logits, mean cross-entropy)``."""
    _check_batch(model, batch)
    logits = _activations(model, batch.inputs)[-1]
    return logits, _cross_entropy(logits, batch.labels)


def backward(model: ModelParams, batch: Batch) -> ModelParams:
    """Gradient of the mean cross-entropy w.r.t. every parameter tensor."""
    _check_batch(model, batch)
    acts = _activations(model, batch.inputs)
    b = len(batch.labels)
    err = softmax(acts[-1])
    err[np.arange(b), batch.labels] -= 1.0
    err /= b
    n_dense = len(model.tensors) // 2
    grads: list[np.ndarray] = [None] * len(model.tensors)  # type: ignore[list-item]
    for k in reversed(range(n_dense)):
        grads[2 * k] = err.T @ acts[k]
        grads[2 * k + 1] = err.sum(axis=0)
        if k > 0:
            err = (err @ model.tensors[2 * k]) * (1.0 - acts[k] ** 2)
    return ModelParams(tuple(grads), model.arch)


def local_train(
    model: ModelParams,
    data,
    epochs: int,
    lr: float,
    batch_size: int,
    rng_seed: int,
) -> ModelParams | None:
    """Run minibatch SGD from ``model`` and return the parameter delta.

    Returns ``None`` for an empty shard so the caller can skip the client.
    The delta is accumulated directly (the model is evaluated at
    ``model + delta``) which makes a single step equal ``-lr * grad`` exactly.
    """
    if lr < 0 or epochs < 1 or batch_size < 1:
        raise ConfigError(f"invalid local training args lr={lr} epochs={epochs} batch_size={batch_size}")
    inputs, labels = data.inputs, data.labels
    n = len(labels)
    if n == 0:
        return None
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    delta = [np.zeros_like(t) for t in model.tensors]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            current = ModelParams(tuple(w + d for w, d in zip(model.tensors, delta)), model.arch)
            g = backward(current, Batch(inputs[idx], labels[idx]))
            for d, gt in zip(delta, g.tensors):
                d -= lr * gt
    return ModelParams(tuple(delta), model.arch)


def predict(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    return np.argmax(_activations(model, inputs)[-1], axis=1)
