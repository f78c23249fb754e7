"""Minimal fully-connected networks with hand-written backprop.

ReLU hidden layers, identity output, SGD with momentum / weight decay,
step-decay learning rates with optional linear warmup. Deterministic:
the same seed yields bit-identical parameters and, in single-threaded
training, bit-identical trajectories.

Checkpoints are single JSON documents; floats are serialized with their
shortest round-tripping decimal form, so reload is loss-free at double
precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import purpose_rng

CHECKPOINT_FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """An update produced a non-finite parameter; the run must abort."""


@dataclass
class MlpModel:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]  # weights[k] has shape (dims[k+1], dims[k])
    biases: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def class_count(self) -> int:
        return self.layer_dims[-1]


@dataclass
class SgdState:
    lr: float
    momentum: float
    weight_decay: float
    velocity_w: list[np.ndarray] = field(default_factory=list)
    velocity_b: list[np.ndarray] = field(default_factory=list)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_epochs: int = 0
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must be in (0, 1]")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ValueError("decay_epochs must be sorted")


def init_mlp(layer_dims, seed: int = 0) -> MlpModel:
    """He-style fan-in scaled uniform weights, zero biases.

    Weights are drawn from U(-sqrt(6/fan_in), +sqrt(6/fan_in)), whose
    standard deviation is sqrt(2/fan_in). Identical seeds give
    bit-identical models.
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError(f"layer_dims needs >= 2 positive entries, got {layer_dims!r}")
    rng = purpose_rng(seed, "init")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(layer_dims=dims, weights=weights, biases=biases)


@dataclass
class ForwardCache:
    layer_dims: tuple[int, ...]
    inputs: list[np.ndarray]  # activation entering each layer
    preacts: list[np.ndarray]  # pre-activation of each layer


def forward(model: MlpModel, X) -> tuple[np.ndarray, ForwardCache]:
    """Batch forward pass; returns (logits, cache for backward)."""
    A = np.asarray(X, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != model.input_dim:
        raise ValueError(f"X must be (N, {model.input_dim}), got {A.shape}")
    inputs, preacts = [], []
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(A)
        Z = A @ W.T + b
        preacts.append(Z)
        A = np.maximum(Z, 0.0) if k < model.n_layers - 1 else Z
    return A, ForwardCache(model.layer_dims, inputs, preacts)


def predict_logits(model: MlpModel, X) -> np.ndarray:
    return forward(model, X)[0]


def backward(model: MlpModel, cache: ForwardCache, grad_logits) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients of a scalar loss wrt all weights and biases.

    `grad_logits` is dLoss/dlogits from the loss layer. ReLU uses
    subgradient 0 at exactly 0.
    """
    if cache.layer_dims != model.layer_dims:
        raise ValueError("cache does not match model architecture")
    G = np.asarray(grad_logits, dtype=np.float64)
    if G.shape != cache.preacts[-1].shape:
        raise ValueError(f"grad_logits shape {G.shape} does not match forward output "
                         f"{cache.preacts[-1].shape}")
    grads_w = [None] * model.n_layers
    grads_b = [None] * model.n_layers
    for k in range(model.n_layers - 1, -1, -1):
        grads_w[k] = G.T @ cache.inputs[k]
        grads_b[k] = G.sum(axis=0)
        if k > 0:
            G = (G @ model.weights[k]) * (cache.preacts[k - 1] > 0.0)
    return grads_w, grads_b


def init_sgd(model: MlpModel, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> SgdState:
    return SgdState(
        lr=float(lr),
        momentum=float(momentum),
        weight_decay=float(weight_decay),
        velocity_w=[np.zeros_like(W) for W in model.weights],
        velocity_b=[np.zeros_like(b) for b in model.biases],
    )


def sgd_step(model: MlpModel, grads_w, grads_b, state: SgdState) -> None:
    """In-place update: v <- momentum*v + grad + wd*param; param <- param - lr*v.

    Weight decay applies to weights and biases uniformly.
    """
    for k in range(model.n_layers):
        if grads_w[k].shape != model.weights[k].shape or grads_b[k].shape != model.biases[k].shape:
            raise ValueError(f"gradient shapes do not match parameters at layer {k}")
        vw = state.velocity_w[k]
        vw *= state.momentum
        vw += grads_w[k] + state.weight_decay * model.weights[k]
        model.weights[k] -= state.lr * vw
        vb = state.velocity_b[k]
        vb *= state.momentum
        vb += grads_b[k] + state.weight_decay * model.biases[k]
        model.biases[k] -= state.lr * vb


def check_finite(model: MlpModel, context: str = "") -> None:
    """Raise TrainingDiverged if any parameter is non-finite."""
    for k in range(model.n_layers):
        if not (np.all(np.isfinite(model.weights[k])) and np.all(np.isfinite(model.biases[k]))):
            where = f" ({context})" if context else ""
            raise TrainingDiverged(f"non-finite parameter in layer {k}{where}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate at an epoch: linear warmup, then step decay.

    During warmup (epoch e < W) the rate is base_lr*(e+1)/W. Afterwards
    each passed decay epoch multiplies by decay_factor.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    lr = schedule.base_lr
    if schedule.warmup_epochs > 0 and epoch < schedule.warmup_epochs:
        lr *= (epoch + 1) / schedule.warmup_epochs
    passed = sum(1 for d in schedule.decay_epochs if epoch >= d)
    return lr * schedule.decay_factor**passed


def extract_features(model: MlpModel, X) -> np.ndarray:
    """Post-ReLU activations of the final hidden layer."""
    if model.n_layers < 2:
        raise ValueError("model has no hidden layer to extract features from")
    A = np.asarray(X, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != model.input_dim:
        raise ValueError(f"X must be (N, {model.input_dim}), got {A.shape}")
    for W, b in zip(model.weights[:-1], model.biases[:-1]):
        A = np.maximum(A @ W.T + b, 0.0)
    return A


def count_parameters(model: MlpModel) -> int:
    return sum(W.size for W in model.weights) + sum(b.size for b in model.biases)


def parameter_gradient_check(model: MlpModel, X, loss_fn, h: float = 1e-5) -> float:
    """Central-difference check of backprop through every parameter.

    `loss_fn` maps logits to a LossOutput; the analytic side runs
    forward/backward once, the numeric side perturbs each weight and
    bias entry in turn. Returns the max relative error with the same
    normalization as `loss_gradient_check`.
    """
    logits, cache = forward(model, X)
    out = loss_fn(logits)
    grads_w, grads_b = backward(model, cache, out.grad_student_logits)
    worst = 0.0
    for params, grads in ((model.weights, grads_w), (model.biases, grads_b)):
        for k, (P, G) in enumerate(zip(params, grads)):
            it = np.nditer(P, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = P[idx]
                P[idx] = orig + h
                up = loss_fn(predict_logits(model, X)).total
                P[idx] = orig - h
                down = loss_fn(predict_logits(model, X)).total
                P[idx] = orig
                numeric = (up - down) / (2.0 * h)
                rel = abs(G[idx] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, rel)
    return worst


def save_checkpoint(model: MlpModel, path, rng_seed: int = 0, trained_epochs: int = 0) -> None:
    """Write the model as a JSON checkpoint (full-precision floats)."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layer_dims": list(model.layer_dims),
        "weights": [W.tolist() for W in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "rng_seed": int(rng_seed),
        "trained_epochs": int(trained_epochs),
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[MlpModel, dict]:
    """Read a JSON checkpoint; returns (model, metadata)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    dims = tuple(int(d) for d in doc["layer_dims"])
    weights = [np.asarray(W, dtype=np.float64) for W in doc["weights"]]
    biases = [np.asarray(b, dtype=np.float64) for b in doc["biases"]]
    model = MlpModel(layer_dims=dims, weights=weights, biases=biases)
    for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        if weights[k].shape != (fan_out, fan_in) or biases[k].shape != (fan_out,):
            raise ValueError(f"checkpoint layer {k} shapes inconsistent with layer_dims")
    meta = {"rng_seed": doc.get("rng_seed", 0), "trained_epochs": doc.get("trained_epochs", 0)}
    return model, meta
