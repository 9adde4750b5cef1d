"""Minimal multilayer perceptron trained by L-BFGS.

ReLU hidden layers with a linear head for regression or a softmax head
for classification. The trainable state is a single flat vector so the
optimizer never sees the layer structure; loss/gradient come from plain
backpropagation with an L2 penalty on weights (biases unpenalized),
normalized by the sample count as in the usual framework convention.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .datasets import ScalerParams, Task, apply_scaler
from .lbfgs import LbfgsConfig, MinimizeResult, minimize


class ShapeMismatch(Exception):
    pass


class NonFiniteLoss(Exception):
    """The loss or gradient diverged to NaN/Inf; the fit should be abandoned."""


class ZeroVarianceTargets(Exception):
    """R-squared is undefined when the targets are constant."""


@dataclass(frozen=True)
class MLPConfig:
    hidden_layers: tuple[int, ...]
    task: Task
    l2_alpha: float = 1e-4
    max_iter: int = 500
    seed: int = 69
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if not self.hidden_layers or any(h < 1 for h in self.hidden_layers):
            raise ValueError("every hidden layer needs at least one neuron")
        if self.l2_alpha < 0:
            raise ValueError("l2_alpha must be non-negative")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.activation != "relu":
            raise ValueError("only relu hidden activations are supported")


@dataclass(frozen=True)
class NetworkParams:
    """Per-layer weight matrices and bias vectors; flattens to one vector."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeMismatch("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ShapeMismatch(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeMismatch(
                    f"layer {i - 1} fan-out {self.weights[i - 1].shape[1]} "
                    f"!= layer {i} fan-in {w.shape[0]}"
                )

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, flat: np.ndarray, dims: tuple[int, ...]) -> "NetworkParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (n_params(dims),):
            raise ShapeMismatch(f"expected {n_params(dims)} parameters, got {flat.shape}")
        weights, biases, off = [], [], 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(flat[off : off + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            off += fan_in * fan_out
            biases.append(flat[off : off + fan_out].copy())
            off += fan_out
        return cls(tuple(weights), tuple(biases))


def layer_dims(config: MLPConfig, input_dim: int, output_dim: int) -> tuple[int, ...]:
    if input_dim < 1 or output_dim < 1:
        raise ValueError("input_dim and output_dim must be at least 1")
    return (input_dim, *config.hidden_layers, output_dim)


def n_params(dims: tuple[int, ...]) -> int:
    return sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))


def init_params(
    config: MLPConfig, input_dim: int, output_dim: int, seed: int | None = None
) -> NetworkParams:
    """Glorot-uniform weights with bound sqrt(6/(fan_in+fan_out)), zero biases."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    weights, biases = [], []
    dims = layer_dims(config, input_dim, output_dim)
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(tuple(weights), tuple(biases))


def forward(params: NetworkParams, features: np.ndarray, task: Task) -> np.ndarray:
    """Network outputs: one real per sample (regression) or softmax rows (classification)."""
    a = np.asarray(features, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != params.weights[0].shape[0]:
        raise ShapeMismatch(
            f"features {a.shape} do not match first-layer fan-in {params.weights[0].shape[0]}"
        )
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        a = np.maximum(a @ w + b, 0.0)
    z = a @ params.weights[-1] + params.biases[-1]
    if task is Task.REGRESSION:
        return z[:, 0]
    z = z - z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def _param_slices(dims: tuple[int, ...]) -> list[tuple[slice, slice, tuple[int, int]]]:
    out, off = [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = slice(off, off + fan_in * fan_out)
        off += fan_in * fan_out
        b = slice(off, off + fan_out)
        off += fan_out
        out.append((w, b, (fan_in, fan_out)))
    return out


def make_objective(
    config: MLPConfig,
    features: np.ndarray,
    targets: np.ndarray,
    n_classes: int | None = None,
) -> tuple[Callable[[np.ndarray], tuple[float, np.ndarray]], tuple[int, ...]]:
    """Build the flat-vector loss/gradient closure for one training set.

    Returns (objective, layer_dims). The objective is pure and may be
    called from parallel workers on shared read-only data.
    """
    x = np.ascontiguousarray(features, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty sample set")
    if config.task is Task.CLASSIFICATION:
        y_idx = np.ascontiguousarray(targets, dtype=np.intp)
        out_dim = int(n_classes) if n_classes is not None else int(y_idx.max()) + 1
        if y_idx.max() >= out_dim:
            raise ShapeMismatch(f"label {y_idx.max()} out of range for {out_dim} classes")
        rows = np.arange(n)
        y = None
    else:
        y = np.ascontiguousarray(targets, dtype=np.float64)
        out_dim = 1
        y_idx = rows = None
    dims = layer_dims(config, x.shape[1], out_dim)
    slices = _param_slices(dims)
    total = n_params(dims)
    l2 = config.l2_alpha

    def objective(flat: np.ndarray) -> tuple[float, np.ndarray]:
        if flat.shape != (total,):
            raise ShapeMismatch(f"expected {total} parameters, got {flat.shape}")
        acts = [x]
        a = x
        for w_sl, b_sl, shape in slices[:-1]:
            w = flat[w_sl].reshape(shape)
            z = a @ w
            z += flat[b_sl]
            np.maximum(z, 0.0, out=z)
            acts.append(z)
            a = z
        w_sl, b_sl, shape = slices[-1]
        z_out = a @ flat[w_sl].reshape(shape)
        z_out += flat[b_sl]

        if config.task is Task.REGRESSION:
            resid = z_out[:, 0] - y
            data_loss = 0.5 * float(resid @ resid) / n
            delta = resid[:, None] / n
        else:
            z_out -= z_out.max(axis=1, keepdims=True)
            expz = np.exp(z_out)
            sums = expz.sum(axis=1, keepdims=True)
            data_loss = float(np.mean(np.log(sums[:, 0]) - z_out[rows, y_idx]))
            delta = expz
            delta /= sums
            delta[rows, y_idx] -= 1.0
            delta /= n

        grad = np.empty(total)
        reg = 0.0
        for layer in range(len(slices) - 1, -1, -1):
            w_sl, b_sl, shape = slices[layer]
            w = flat[w_sl].reshape(shape)
            reg += float(flat[w_sl] @ flat[w_sl])
            gw = grad[w_sl].reshape(shape)
            np.dot(acts[layer].T, delta, out=gw)
            if l2:
                gw += (l2 / n) * w
            grad[b_sl] = delta.sum(axis=0)
            if layer > 0:
                delta = delta @ w.T
                delta[acts[layer] <= 0.0] = 0.0
        loss = data_loss + 0.5 * l2 / n * reg
        return loss, grad

    return objective, dims


def loss_and_gradient(
    flat_params: np.ndarray,
    config: MLPConfig,
    features: np.ndarray,
    targets: np.ndarray,
    n_classes: int | None = None,
) -> tuple[float, np.ndarray]:
    """Loss and backprop gradient at one parameter vector.

    Raises NonFiniteLoss when either is not finite, signalling divergence.
    """
    objective, _ = make_objective(config, features, targets, n_classes)
    loss, grad = objective(np.asarray(flat_params, dtype=np.float64))
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NonFiniteLoss(f"loss={loss}")
    return loss, grad


@dataclass(frozen=True)
class TrainedModel:
    config: MLPConfig
    params: NetworkParams
    scaler: ScalerParams | None
    final_loss: float
    n_iterations_used: int

    def __post_init__(self):
        if self.n_iterations_used > self.config.max_iter:
            raise ValueError("iterations used cannot exceed max_iter")

    @property
    def input_dim(self) -> int:
        return self.params.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.params.weights[-1].shape[1]


def fit(
    config: MLPConfig,
    features: np.ndarray,
    targets: np.ndarray,
    scaler: ScalerParams | None = None,
    n_classes: int | None = None,
    lbfgs_config: LbfgsConfig | None = None,
    trace=None,
) -> TrainedModel:
    """Train one network with L-BFGS; the scaler, when given, is applied first."""
    x = apply_scaler(scaler, features) if scaler is not None else np.asarray(features, float)
    objective, dims = make_objective(config, x, targets, n_classes)
    x0 = init_params(config, dims[0], dims[-1]).flatten()
    cfg = lbfgs_config or LbfgsConfig(max_iter=config.max_iter)
    result: MinimizeResult = minimize(objective, x0, cfg, trace=trace)
    return TrainedModel(
        config=config,
        params=NetworkParams.from_flat(result.x, dims),
        scaler=scaler,
        final_loss=result.loss,
        n_iterations_used=result.iterations_used,
    )


def predict(model: TrainedModel, features: np.ndarray) -> np.ndarray:
    """Point predictions: reals for regression, argmax labels for classification.

    Softmax ties resolve to the lowest class index.
    """
    x = apply_scaler(model.scaler, features) if model.scaler is not None else features
    out = forward(model.params, x, model.config.task)
    if model.config.task is Task.CLASSIFICATION:
        return np.argmax(out, axis=1)
    return out


def score(model: TrainedModel, features: np.ndarray, targets: np.ndarray) -> float:
    """R-squared for regression, accuracy for classification."""
    if len(targets) == 0:
        raise ValueError("cannot score an empty evaluation set")
    preds = predict(model, features)
    if model.config.task is Task.CLASSIFICATION:
        return float(np.mean(preds == np.asarray(targets)))
    y = np.asarray(targets, dtype=np.float64)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ZeroVarianceTargets("targets are constant; R^2 is undefined")
    ss_res = float(np.sum((y - preds) ** 2))
    return 1.0 - ss_res / ss_tot


def rmse(model: TrainedModel, features: np.ndarray, targets: np.ndarray) -> float:
    """Root mean squared error; classification uses integer label distance."""
    if len(targets) == 0:
        raise ValueError("cannot evaluate an empty set")
    preds = predict(model, features).astype(np.float64)
    y = np.asarray(targets, dtype=np.float64)
    return float(np.sqrt(np.mean((y - preds) ** 2)))


MODEL_FORMAT_VERSION = 1


def model_to_dict(model: TrainedModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "task": model.config.task.value,
        "hidden_layers": list(model.config.hidden_layers),
        "l2_alpha": model.config.l2_alpha,
        "max_iter": model.config.max_iter,
        "seed": model.config.seed,
        "layer_dims": list(model.params.layer_dims),
        "flat_params": model.params.flatten().tolist(),
        "scaler": None
        if model.scaler is None
        else {"means": model.scaler.means.tolist(), "scales": model.scaler.scales.tolist()},
        "final_loss": model.final_loss,
        "n_iterations_used": model.n_iterations_used,
    }


def model_from_dict(doc: dict) -> TrainedModel:
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format {doc.get('format_version')!r}")
    config = MLPConfig(
        hidden_layers=tuple(doc["hidden_layers"]),
        task=Task(doc["task"]),
        l2_alpha=doc["l2_alpha"],
        max_iter=doc["max_iter"],
        seed=doc["seed"],
    )
    dims = tuple(doc["layer_dims"])
    params = NetworkParams.from_flat(np.array(doc["flat_params"]), dims)
    scaler = None
    if doc["scaler"] is not None:
        scaler = ScalerParams(np.array(doc["scaler"]["means"]), np.array(doc["scaler"]["scales"]))
    return TrainedModel(config, params, scaler, doc["final_loss"], doc["n_iterations_used"])


def save_model(model: TrainedModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path: str | Path) -> TrainedModel:
    return model_from_dict(json.loads(Path(path).read_text()))
