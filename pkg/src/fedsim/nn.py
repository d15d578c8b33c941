"""Desk-scale binary classifier: forward pass, BCE loss, backprop and Adam.

Everything is written directly against ParameterSet so the trainer slots in
behind the federation without a tensor framework. The architecture is a small
ReLU MLP (or plain logistic regression with no hidden layers) with a single
sigmoid output unit. Weight layout in a ParameterSet is w0, b0, w1, b1, ...
where w_l is the (fan_in x fan_out) matrix flattened row-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ClientDataset, LabeledExample, stack_examples
from .params import ParameterSet, ShapeMismatchError, zeros_like, require_compatible
from .rng import stream

__all__ = [
    "ModelSpec",
    "TrainConfig",
    "OptimizerState",
    "EpochCheckpoint",
    "EPS_CLAMP",
    "init_params",
    "forward",
    "forward_batch",
    "bce_loss",
    "gradient",
    "adam_step",
    "train_local",
]

# Output probabilities are clamped to [EPS_CLAMP, 1 - EPS_CLAMP] before the
# loss so saturated predictions cannot produce an infinite BCE. The clamp sits
# below every test tolerance in the suite.
EPS_CLAMP = 1e-12

_ACTIVATIONS = ("relu",)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture: input width and hidden widths; output is always one unit."""

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if any(h < 0 for h in self.hidden_dims):
            raise ValueError(f"hidden dims must be non-negative, got {self.hidden_dims}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def layer_dims(self) -> tuple[tuple[int, int], ...]:
        """(fan_in, fan_out) per affine layer, ending in the single output unit."""
        widths = (self.input_dim, *self.hidden_dims, 1)
        return tuple(zip(widths[:-1], widths[1:]))

    def param_signature(self) -> tuple[tuple[str, int], ...]:
        out = []
        for i, (fan_in, fan_out) in enumerate(self.layer_dims()):
            out.append((f"w{i}", fan_in * fan_out))
            out.append((f"b{i}", fan_out))
        return tuple(out)

    @property
    def num_params(self) -> int:
        return sum(size for _, size in self.param_signature())


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings for one local training run."""

    learning_rate: float = 1e-3
    epochs: int = 1
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.adam_beta1 < 1 or not 0 < self.adam_beta2 < 1:
            raise ValueError(
                f"betas must lie in (0, 1), got {self.adam_beta1}, {self.adam_beta2}"
            )
        if not self.adam_epsilon > 0:
            raise ValueError(f"adam_epsilon must be > 0, got {self.adam_epsilon}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


@dataclass(frozen=True)
class OptimizerState:
    """Adam moment accumulators plus the number of steps applied so far."""

    first_moment: ParameterSet
    second_moment: ParameterSet
    step_count: int = 0

    @staticmethod
    def initial(params: ParameterSet) -> "OptimizerState":
        return OptimizerState(zeros_like(params), zeros_like(params), 0)


@dataclass(frozen=True)
class EpochCheckpoint:
    """Weights and losses recorded after one epoch."""

    params: ParameterSet
    epoch_index: int
    train_loss: float
    val_loss: float


def init_params(spec: ModelSpec, seed: int) -> ParameterSet:
    """Glorot-uniform weights, zero biases. Deterministic given (spec, seed)."""
    rng = stream(seed, "init")
    layers = []
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims()):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        layers.append((f"w{i}", rng.uniform(-bound, bound, fan_in * fan_out)))
        layers.append((f"b{i}", np.zeros(fan_out)))
    return ParameterSet(layers)


def _unpack(params: ParameterSet, input_dim: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Reshape the flat layer vectors into (W, b) pairs, validating widths."""
    arrays = params.arrays
    names = params.names
    if len(arrays) % 2 != 0 or not arrays:
        raise ShapeMismatchError(f"expected w/b layer pairs, got layers {names}")
    pairs = []
    fan_in = input_dim
    for i in range(0, len(arrays), 2):
        w, b = arrays[i], arrays[i + 1]
        fan_out = b.size
        if w.size != fan_in * fan_out:
            raise ShapeMismatchError(
                f"layer {names[i]!r} has {w.size} weights, expected "
                f"{fan_in}x{fan_out} = {fan_in * fan_out}"
            )
        pairs.append((w.reshape(fan_in, fan_out), b))
        fan_in = fan_out
    if fan_in != 1:
        raise ShapeMismatchError(f"final layer must have one output unit, got {fan_in}")
    return pairs


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[np.logical_not(pos)])
    out[np.logical_not(pos)] = ez / (1.0 + ez)
    return out


def _forward_full(params: ParameterSet, X: np.ndarray):
    """Probabilities plus the per-layer pre-activations/activations for backprop."""
    pairs = _unpack(params, X.shape[1])
    activations = [X]
    pre_acts = []
    a = X
    for layer, (W, b) in enumerate(pairs):
        z = a @ W + b
        pre_acts.append(z)
        if layer < len(pairs) - 1:
            a = np.maximum(z, 0.0)
            activations.append(a)
    raw = _sigmoid(pre_acts[-1][:, 0])
    probs = np.clip(raw, EPS_CLAMP, 1.0 - EPS_CLAMP)
    return probs, raw, pre_acts, activations, pairs


def forward_batch(params: ParameterSet, X: np.ndarray) -> np.ndarray:
    """Predicted probabilities for a feature matrix, clamped away from 0 and 1."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D feature matrix, got ndim={X.ndim}")
    probs, _, _, _, _ = _forward_full(params, X)
    return probs


def forward(params: ParameterSet, features: Sequence[float] | np.ndarray) -> float:
    """Predicted probability for a single feature vector."""
    x = np.asarray(features, dtype=np.float64).reshape(-1)
    return float(forward_batch(params, x[None, :])[0])


def bce_loss(p: float, y: int) -> float:
    """Binary cross-entropy -[y ln p + (1-y) ln(1-p)] for a clamped probability."""
    p = min(max(float(p), EPS_CLAMP), 1.0 - EPS_CLAMP)
    if y == 1:
        return -math.log(p)
    if y == 0:
        return -math.log(1.0 - p)
    raise ValueError(f"label must be 0 or 1, got {y!r}")


def _mean_bce(probs: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(-(y * np.log(probs) + (1.0 - y) * np.log(1.0 - probs))))


def _loss_and_gradient(
    params: ParameterSet, X: np.ndarray, y: np.ndarray
) -> tuple[float, ParameterSet]:
    """Mean BCE over the batch and its gradient w.r.t. every parameter.

    The output delta is (p - y)/N with the raw (unclamped) sigmoid, the standard
    cancellation of sigmoid and BCE derivatives; the clamp only guards the loss
    value itself.
    """
    probs, raw, pre_acts, activations, pairs = _forward_full(params, X)
    loss = _mean_bce(probs, y)
    n = X.shape[0]
    delta = ((raw - y) / n)[:, None]
    grads: list[tuple[str, np.ndarray]] = []
    names = params.names
    for layer in range(len(pairs) - 1, -1, -1):
        W, _ = pairs[layer]
        a_prev = activations[layer]
        grad_w = a_prev.T @ delta
        grad_b = delta.sum(axis=0)
        grads.append((names[2 * layer + 1], grad_b))
        grads.append((names[2 * layer], grad_w.reshape(-1)))
        if layer > 0:
            delta = (delta @ W.T) * (pre_acts[layer - 1] > 0.0)
    return loss, ParameterSet(reversed(grads))


def gradient(params: ParameterSet, batch: Sequence[LabeledExample]) -> ParameterSet:
    """Gradient of the mean BCE over a batch, same shape as params."""
    if not batch:
        raise ValueError("gradient of an empty batch is undefined")
    X, y = stack_examples(batch)
    _, grads = _loss_and_gradient(params, X, y)
    return grads


def adam_step(
    params: ParameterSet,
    grads: ParameterSet,
    state: OptimizerState,
    cfg: TrainConfig,
) -> tuple[ParameterSet, OptimizerState]:
    """One Adam update with bias correction:

        m <- b1 m + (1 - b1) g          v <- b2 v + (1 - b2) g^2
        p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    """
    require_compatible(params, grads)
    require_compatible(params, state.first_moment)
    require_compatible(params, state.second_moment)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = state.step_count + 1
    new_params, new_m, new_v = [], [], []
    for (name, p), (_, g), (_, m), (_, v) in zip(
        params, grads, state.first_moment, state.second_moment
    ):
        m2 = b1 * m + (1.0 - b1) * g
        v2 = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m2 / (1.0 - b1**t)
        v_hat = v2 / (1.0 - b2**t)
        new_params.append((name, p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)))
        new_m.append((name, m2))
        new_v.append((name, v2))
    return (
        ParameterSet(new_params),
        OptimizerState(ParameterSet(new_m), ParameterSet(new_v), t),
    )


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Per-epoch shuffled mini-batch index lists; the last partial batch is kept."""
    order = stream(seed, "shuffle", epoch).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_local(
    params: ParameterSet,
    data: ClientDataset,
    cfg: TrainConfig,
) -> tuple[EpochCheckpoint, list[EpochCheckpoint]]:
    """Mini-batch Adam for cfg.epochs epochs; returns the best-val checkpoint.

    Validation loss is the unweighted mean BCE over the val split, evaluated
    after each epoch. `best` is the checkpoint with minimum val loss, earliest
    epoch on ties. A pure function of (params, data, cfg): repeated calls are
    bit-identical.
    """
    if not data.train:
        raise ValueError(f"client {data.client_id!r} has an empty train split")
    if not data.val:
        raise ValueError(f"client {data.client_id!r} has an empty val split")
    X_train, y_train = stack_examples(data.train)
    X_val, y_val = stack_examples(data.val)
    state = OptimizerState.initial(params)
    history: list[EpochCheckpoint] = []
    current = params
    n = X_train.shape[0]
    for epoch in range(cfg.epochs):
        loss_sum = 0.0
        for idx in _epoch_batches(n, cfg.batch_size, cfg.seed, epoch):
            loss, grads = _loss_and_gradient(current, X_train[idx], y_train[idx])
            loss_sum += loss * idx.size
            current, state = adam_step(current, grads, state, cfg)
        val_loss = _mean_bce(forward_batch(current, X_val), y_val)
        history.append(
            EpochCheckpoint(
                params=current,
                epoch_index=epoch,
                train_loss=loss_sum / n,
                val_loss=val_loss,
            )
        )
    best = min(history, key=lambda cp: (cp.val_loss, cp.epoch_index))
    return best, history
