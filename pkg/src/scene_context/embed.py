"""Shared-weight pair embedding over precomputed descriptors, with hand-written
forward and backward passes.

The branch maps a descriptor through two affine layers with a ReLU between
them; a pair is classified by concatenating the two branch outputs and passing
them through a two-layer head with a ReLU, ending in softmax cross-entropy
(label 1 = similar pair, 0 = dissimilar). Both pair members go through the
single shared parameter set, so branch gradients accumulate contributions from
both inputs. Updates are SGD with momentum and weight decay:

    v <- momentum * v - lr * (grad + weight_decay * theta);  theta <- theta + v

All math is float64 numpy, so training is bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MODEL_MAGIC = b"GCEM"

# Checkpoint serialization order.
PARAM_FIELDS = (
    "branch_w1",
    "branch_b1",
    "branch_w2",
    "branch_b2",
    "head_w1",
    "head_b1",
    "head_w2",
    "head_b2",
)


class TrainingDiverged(RuntimeError):
    """A training step produced a non-finite loss or parameter."""

    def __init__(self, step: int, message: str):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


@dataclass
class EmbeddingModel:
    """Mutable parameter container; shapes are fixed by (input, feature, hidden) dims."""

    branch_w1: np.ndarray  # (F, D)
    branch_b1: np.ndarray  # (F,)
    branch_w2: np.ndarray  # (F, F)
    branch_b2: np.ndarray  # (F,)
    head_w1: np.ndarray  # (H, 2F)
    head_b1: np.ndarray  # (H,)
    head_w2: np.ndarray  # (2, H)
    head_b2: np.ndarray  # (2,)

    @property
    def input_dim(self) -> int:
        return int(self.branch_w1.shape[1])

    @property
    def feature_dim(self) -> int:
        return int(self.branch_w1.shape[0])

    @property
    def hidden_dim(self) -> int:
        return int(self.head_w1.shape[0])

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(**{name: getattr(self, name).copy() for name in PARAM_FIELDS})


def _param_shapes(input_dim: int, feature_dim: int, hidden_dim: int) -> dict[str, tuple[int, ...]]:
    return {
        "branch_w1": (feature_dim, input_dim),
        "branch_b1": (feature_dim,),
        "branch_w2": (feature_dim, feature_dim),
        "branch_b2": (feature_dim,),
        "head_w1": (hidden_dim, 2 * feature_dim),
        "head_b1": (hidden_dim,),
        "head_w2": (2, hidden_dim),
        "head_b2": (2,),
    }


def init_model(input_dim: int, feature_dim: int = 32, hidden_dim: int = 16, seed: int = 0) -> EmbeddingModel:
    """Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero."""
    if min(input_dim, feature_dim, hidden_dim) < 1:
        raise ValueError("model dimensions must be positive")
    rng = np.random.default_rng(seed)

    def glorot(fan_out: int, fan_in: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_out, fan_in))

    return EmbeddingModel(
        branch_w1=glorot(feature_dim, input_dim),
        branch_b1=np.zeros(feature_dim),
        branch_w2=glorot(feature_dim, feature_dim),
        branch_b2=np.zeros(feature_dim),
        head_w1=glorot(hidden_dim, 2 * feature_dim),
        head_b1=np.zeros(hidden_dim),
        head_w2=glorot(2, hidden_dim),
        head_b2=np.zeros(2),
    )


def _as_batch(x: np.ndarray, dim: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"{what} must have dimension {dim}, got shape {x.shape}")
    return x


def _branch_forward(model: EmbeddingModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a1 = x @ model.branch_w1.T + model.branch_b1
    h1 = np.maximum(a1, 0.0)
    f = h1 @ model.branch_w2.T + model.branch_b2
    return a1, h1, f


def embed(model: EmbeddingModel, descriptor: np.ndarray) -> np.ndarray:
    """Map one descriptor (or a batch of them) to its context feature."""
    single = np.asarray(descriptor).ndim == 1
    x = _as_batch(descriptor, model.input_dim, "descriptor")
    f = _branch_forward(model, x)[2]
    return f[0] if single else f


def pair_logits(model: EmbeddingModel, desc_i: np.ndarray, desc_j: np.ndarray) -> np.ndarray:
    """Head logits (similar vs dissimilar) for one pair or a batch of pairs."""
    single = np.asarray(desc_i).ndim == 1
    xi = _as_batch(desc_i, model.input_dim, "descriptor")
    xj = _as_batch(desc_j, model.input_dim, "descriptor")
    z = np.concatenate([_branch_forward(model, xi)[2], _branch_forward(model, xj)[2]], axis=1)
    a2 = z @ model.head_w1.T + model.head_b1
    h2 = np.maximum(a2, 0.0)
    logits = h2 @ model.head_w2.T + model.head_b2
    return logits[0] if single else logits


def batch_loss(
    model: EmbeddingModel,
    desc_i: np.ndarray,
    desc_j: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy over a pair batch, plus gradients for every parameter."""
    xi = _as_batch(desc_i, model.input_dim, "descriptor")
    xj = _as_batch(desc_j, model.input_dim, "descriptor")
    y = np.asarray(labels, dtype=np.int64).ravel()
    batch = xi.shape[0]
    if xj.shape[0] != batch or y.size != batch:
        raise ValueError("pair batch arrays must align")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("pair labels must be 0 or 1")

    a1i, h1i, fi = _branch_forward(model, xi)
    a1j, h1j, fj = _branch_forward(model, xj)
    z = np.concatenate([fi, fj], axis=1)
    a2 = z @ model.head_w1.T + model.head_b1
    h2 = np.maximum(a2, 0.0)
    logits = h2 @ model.head_w2.T + model.head_b2

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(batch), y].mean())
    if not np.isfinite(loss):
        raise ValueError(f"non-finite loss ({loss})")

    # Backward pass; mean loss, so every sample's contribution carries 1/batch.
    d_logits = np.exp(log_probs)
    d_logits[np.arange(batch), y] -= 1.0
    d_logits /= batch

    grads: dict[str, np.ndarray] = {}
    grads["head_w2"] = d_logits.T @ h2
    grads["head_b2"] = d_logits.sum(axis=0)
    d_h2 = d_logits @ model.head_w2
    d_a2 = d_h2 * (a2 > 0)
    grads["head_w1"] = d_a2.T @ z
    grads["head_b1"] = d_a2.sum(axis=0)
    d_z = d_a2 @ model.head_w1
    feature_dim = model.feature_dim

    # The branch is shared: both pair members' gradients accumulate here.
    grads["branch_w2"] = np.zeros_like(model.branch_w2)
    grads["branch_b2"] = np.zeros_like(model.branch_b2)
    grads["branch_w1"] = np.zeros_like(model.branch_w1)
    grads["branch_b1"] = np.zeros_like(model.branch_b1)
    for x, a1, h1, d_f in ((xi, a1i, h1i, d_z[:, :feature_dim]), (xj, a1j, h1j, d_z[:, feature_dim:])):
        grads["branch_w2"] += d_f.T @ h1
        grads["branch_b2"] += d_f.sum(axis=0)
        d_h1 = d_f @ model.branch_w2
        d_a1 = d_h1 * (a1 > 0)
        grads["branch_w1"] += d_a1.T @ x
        grads["branch_b1"] += d_a1.sum(axis=0)
    return loss, grads


def pair_loss(
    model: EmbeddingModel,
    desc_i: np.ndarray,
    desc_j: np.ndarray,
    label: int,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients for a single labeled pair."""
    return batch_loss(model, np.atleast_2d(desc_i), np.atleast_2d(desc_j), np.asarray([label]))


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings. Momentum 0.9 and weight decay 5e-4 are the
    operating-point values; step counts and the schedule are scaled down to
    in-memory dataset sizes."""

    batch_size: int = 16
    learning_rate: float = 0.01
    lr_drop_factor: float = 0.1
    lr_drop_step: int = 1500
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_steps: int = 2000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ValueError("batch size must be even and positive (half positive, half negative)")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.lr_drop_factor <= 0 or self.lr_drop_step < 1:
            raise ValueError("schedule drop factor must be positive and drop step >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.max_steps < 1:
            raise ValueError("need at least one training step")


def train(
    model: EmbeddingModel,
    descriptors: np.ndarray,
    sample_batch: Callable[[np.random.Generator, int, int], Sequence[tuple[int, int, int]]],
    config: TrainConfig,
) -> tuple[EmbeddingModel, np.ndarray]:
    """SGD with momentum and weight decay over freshly sampled pair batches.

    ``sample_batch(rng, n_pos, n_neg)`` must return (i, j, label) index triples
    into ``descriptors``. The model is updated in place and returned together
    with the per-step mean loss trace. Raises TrainingDiverged as soon as a
    loss or parameter goes non-finite.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"descriptors must be (n, {model.input_dim}), got shape {x.shape}")
    rng = np.random.default_rng(config.seed)
    velocity = {name: np.zeros_like(getattr(model, name)) for name in PARAM_FIELDS}
    losses = np.zeros(config.max_steps, dtype=np.float64)
    half = config.batch_size // 2

    for step in range(config.max_steps):
        batch = sample_batch(rng, half, half)
        ii = np.asarray([p[0] for p in batch], dtype=np.int64)
        jj = np.asarray([p[1] for p in batch], dtype=np.int64)
        yy = np.asarray([p[2] for p in batch], dtype=np.int64)
        try:
            loss, grads = batch_loss(model, x[ii], x[jj], yy)
        except ValueError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        losses[step] = loss

        lr = config.learning_rate * config.lr_drop_factor ** (step // config.lr_drop_step)
        for name in PARAM_FIELDS:
            param = getattr(model, name)
            gradient = grads[name] + config.weight_decay * param
            buf = velocity[name]
            buf *= config.momentum
            buf -= lr * gradient
            param += buf
            if not np.all(np.isfinite(param)):
                raise TrainingDiverged(step, f"non-finite parameter {name}")
    return model, losses


def pair_accuracy(
    model: EmbeddingModel,
    descriptors: np.ndarray,
    pairs: Sequence[tuple[int, int, int]],
) -> float:
    """Fraction of pairs whose argmax head logit matches the label."""
    if not pairs:
        raise ValueError("need at least one pair")
    x = np.asarray(descriptors, dtype=np.float64)
    ii = np.asarray([p[0] for p in pairs], dtype=np.int64)
    jj = np.asarray([p[1] for p in pairs], dtype=np.int64)
    yy = np.asarray([p[2] for p in pairs], dtype=np.int64)
    logits = pair_logits(model, x[ii], x[jj])
    return float(np.mean(np.argmax(logits, axis=1) == yy))


def save_model(path: str | Path, model: EmbeddingModel) -> None:
    """Write a checkpoint: magic, u32 dims (D, F, H), float64 params in field order."""
    header = struct.pack("<4sIII", MODEL_MAGIC, model.input_dim, model.feature_dim, model.hidden_dim)
    blob = b"".join(
        np.ascontiguousarray(getattr(model, name), dtype="<f8").tobytes() for name in PARAM_FIELDS
    )
    Path(path).write_bytes(header + blob)


def load_model(path: str | Path) -> EmbeddingModel:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    input_dim, feature_dim, hidden_dim = struct.unpack_from("<III", raw, 4)
    shapes = _param_shapes(input_dim, feature_dim, hidden_dim)
    total = sum(int(np.prod(shape)) for shape in shapes.values())
    if len(raw) != 16 + 8 * total:
        raise ValueError(f"{path}: checkpoint holds {len(raw) - 16} payload bytes, expected {8 * total}")
    flat = np.frombuffer(raw, dtype="<f8", offset=16)
    fields: dict[str, np.ndarray] = {}
    cursor = 0
    for name in PARAM_FIELDS:
        size = int(np.prod(shapes[name]))
        fields[name] = flat[cursor : cursor + size].reshape(shapes[name]).copy()
        cursor += size
    return EmbeddingModel(**fields)
