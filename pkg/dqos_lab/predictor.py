"""
Drop-rate predictor: a small numpy multilayer perceptron.

Architecture (input width depends on the model id's state categories)::

    Dense(in -> 20, relu)  Dropout(0.15)
    Dense(20 -> 20, relu)  Dropout(0.15)
    Dense(20 -> 20, relu)  Dropout(0.15)
    Dense(20 -> n_switches, linear)

Trained with mean-squared error, Adam, mini-batches of 5, at most 50 epochs
and early stopping (patience 5) on a chronological validation tail. Dense
weights are stored as ``(out, in)`` so a layer computes ``W @ x + b``.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Sequence

import numpy as np

from dqos_lab.telemetry import (
    Dataset,
    LayoutMismatch,
    Normalization,
    StateLayout,
    StateVector,
    Snapshot,
    base_model,
    build_matrices,
    fit_normalization,
    select_inputs,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dqos-mlp/1"


class DimensionMismatch(ValueError):
    """Raised when an input or target has the wrong shape for the model."""


class EmptyDataset(ValueError):
    """Raised when training is asked to fit zero samples."""


class Mode(Enum):
    TRAIN = "train"
    INFER = "infer"


# --------------------------------------------------------------------------- #
# Layers
# --------------------------------------------------------------------------- #
class Dense:
    def __init__(self, weights: np.ndarray, bias: np.ndarray, activation: str = "relu"):
        if activation not in ("relu", "linear"):
            raise ValueError(f"Unsupported activation {activation!r}")
        self.weights = np.asarray(weights, dtype=float)
        self.bias = np.asarray(bias, dtype=float)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionMismatch(
                f"Dense weights {self.weights.shape} and bias {self.bias.shape} do not chain"
            )
        self.activation = activation
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._x: np.ndarray | None = None
        self._z: np.ndarray | None = None

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    def forward(self, x: np.ndarray, mode: Mode, rng: np.random.Generator | None) -> np.ndarray:
        self._x = x
        self._z = x @ self.weights.T + self.bias
        if self.activation == "relu":
            return np.maximum(self._z, 0.0)
        return self._z

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward() called before forward()")
        grad_z = grad_out * (self._z > 0) if self.activation == "relu" else grad_out
        self.grad_weights = grad_z.T @ self._x
        self.grad_bias = grad_z.sum(axis=0)
        return grad_z @ self.weights

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_weights, self.grad_bias]


class Dropout:
    """Inverted dropout: survivors are scaled by 1 / (1 - rate) during training."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray, mode: Mode, rng: np.random.Generator | None) -> np.ndarray:
        if mode is Mode.INFER or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("Mode.TRAIN needs an rng for dropout masks")
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out if self._mask is None else grad_out * self._mask

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []


Layer = Dense | Dropout


class MlpModel:
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        dense = self.dense_layers
        if not dense:
            raise ValueError("MlpModel needs at least one Dense layer")
        for a, b in zip(dense, dense[1:]):
            if a.fan_out != b.fan_in:
                raise DimensionMismatch(f"Layer widths do not chain: {a.fan_out} -> {b.fan_in}")

    @classmethod
    def build(
        cls,
        input_dim: int,
        n_out: int,
        hidden: Sequence[int] = (20, 20, 20),
        dropout: float = 0.15,
        seed: int = 0,
    ) -> "MlpModel":
        """He-uniform initialised stack; biases start at zero."""
        rng = np.random.default_rng(seed)
        widths = [input_dim, *hidden, n_out]
        layers: list[Layer] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
            limit = math.sqrt(6.0 / fan_in)
            weights = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            last = i == len(widths) - 2
            layers.append(Dense(weights, np.zeros(fan_out), "linear" if last else "relu"))
            if not last and dropout > 0:
                layers.append(Dropout(dropout))
        return cls(layers)

    @property
    def dense_layers(self) -> list[Dense]:
        return [layer for layer in self.layers if isinstance(layer, Dense)]

    @property
    def input_dim(self) -> int:
        return self.dense_layers[0].fan_in

    @property
    def n_out(self) -> int:
        return self.dense_layers[-1].fan_out

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads()]

    def get_state(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]

    def set_state(self, state: Sequence[np.ndarray]) -> None:
        for param, value in zip(self.params(), state, strict=True):
            param[...] = value

    def forward(
        self, x: np.ndarray, mode: Mode = Mode.INFER, rng: np.random.Generator | None = None
    ) -> np.ndarray:
        return forward(self, x, mode, rng)


def forward(
    model: MlpModel, x: np.ndarray, mode: Mode = Mode.INFER, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Run the stack on one input vector or a batch (rows)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise DimensionMismatch(f"Input shape {x.shape} does not match input_dim {model.input_dim}")
    out = batch
    for layer in model.layers:
        out = layer.forward(out, mode, rng)
    return out[0] if single else out


def mse_loss(predicted: np.ndarray, actual: np.ndarray) -> float:
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape:
        raise DimensionMismatch(f"Shapes differ: {predicted.shape} vs {actual.shape}")
    return float(np.mean((predicted - actual) ** 2))


def backward(model: MlpModel, predicted: np.ndarray, targets: np.ndarray) -> list[np.ndarray]:
    """
    Gradients of the batch MSE w.r.t. every parameter, in `params()` order.

    Uses the activations and dropout masks cached by the preceding forward pass.
    """
    predicted = np.atleast_2d(np.asarray(predicted, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if predicted.shape != targets.shape:
        raise DimensionMismatch(f"Shapes differ: {predicted.shape} vs {targets.shape}")
    grad = 2.0 * (predicted - targets) / predicted.size
    for layer in reversed(model.layers):
        grad = layer.backward(grad)
    return [g.copy() for g in model.grads()]


def numeric_gradients(
    model: MlpModel, x: np.ndarray, targets: np.ndarray, h: float = 1e-5
) -> list[np.ndarray]:
    """Central finite-difference gradients of the Infer-mode MSE."""
    grads = []
    for param in model.params():
        grad = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            saved = param[idx]
            param[idx] = saved + h
            plus = mse_loss(forward(model, x), targets)
            param[idx] = saved - h
            minus = mse_loss(forward(model, x), targets)
            param[idx] = saved
            grad[idx] = (plus - minus) / (2.0 * h)
        grads.append(grad)
    return grads


# --------------------------------------------------------------------------- #
# Optimisation
# --------------------------------------------------------------------------- #
@dataclass
class TrainConfig:
    batch_size: int = 5
    max_epochs: int = 50
    patience: int = 5
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    hidden: tuple[int, ...] = (20, 20, 20)
    dropout: float = 0.15
    validation_fraction: float = 0.1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError("patience must be >= 0 and < max_epochs")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    moments: AdamState,
    t: int,
    config: TrainConfig,
) -> Sequence[np.ndarray]:
    """Bias-corrected Adam update of `params` in place; `moments` are updated too."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = config.adam_beta1, config.adam_beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, moments.m, moments.v, strict=True):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + config.adam_eps)
    moments.t = t
    return params


class EarlyStopping:
    """Tracks the best validation loss; signals a stop after `patience` non-improving epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    stopped_at_epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = math.inf


def fit(
    model: MlpModel,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    config: TrainConfig,
) -> TrainReport:
    """
    Mini-batch Adam on (x_train, y_train), early-stopped on (x_val, y_val).

    An empty validation set falls back to monitoring the training loss. The
    parameters of the best epoch are restored before returning.
    """
    if len(x_train) == 0:
        raise EmptyDataset("No training samples")
    if y_train.shape[1] != model.n_out:
        raise DimensionMismatch(f"Targets have {y_train.shape[1]} columns, model outputs {model.n_out}")
    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])
    params = model.params()
    moments = AdamState.zeros_like(params)
    stopper = EarlyStopping(config.patience)
    report = TrainReport()
    best_state = model.get_state()
    step = 0
    n = len(x_train)

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            predicted = forward(model, x_train[idx], Mode.TRAIN, dropout_rng)
            total += mse_loss(predicted, y_train[idx]) * len(idx)
            grads = backward(model, predicted, y_train[idx])
            step += 1
            adam_step(params, grads, moments, step, config)
        report.epoch_losses.append(total / n)
        if len(x_val):
            val_loss = mse_loss(forward(model, x_val), y_val)
        else:
            val_loss = mse_loss(forward(model, x_train), y_train)
        report.val_losses.append(val_loss)
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_state = model.get_state()
        log.debug("epoch %d: train %.6f val %.6f", epoch, report.epoch_losses[-1], val_loss)
        report.stopped_at_epoch = epoch
        if stop:
            break

    model.set_state(best_state)
    report.best_epoch = stopper.best_epoch
    report.best_val_loss = stopper.best_loss
    return report


# --------------------------------------------------------------------------- #
# Trained predictor
# --------------------------------------------------------------------------- #
@dataclass
class TrainedPredictor:
    model: MlpModel
    model_id: int
    layout: StateLayout
    k: int
    normalization: Normalization
    report: TrainReport | None = None

    def __post_init__(self):
        base_model(self.model_id)
        if self.model.input_dim != self.layout.input_dim(self.k, self.model_id):
            raise LayoutMismatch(
                f"Model input {self.model.input_dim} != layout input {self.layout.input_dim(self.k, self.model_id)}"
            )
        if self.model.n_out != self.layout.n_switches:
            raise LayoutMismatch(f"Model outputs {self.model.n_out} != switches {self.layout.n_switches}")

    def switch_index(self, switch_name: str) -> int:
        try:
            return self.layout.categories[1].index(switch_name)
        except ValueError:
            raise LayoutMismatch(f"Switch {switch_name!r} not in model layout") from None

    def predict(self, current_state: StateVector, attack_vector: Sequence[float]) -> np.ndarray:
        return predict_drop_rates(
            self.model, current_state, attack_vector, self.model_id, self.normalization
        )

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        """Drop rates (%) for already-built normalized input rows."""
        return np.clip(self.normalization.denormalize_target(forward(self.model, x)), 0.0, 100.0)


def train(
    model: MlpModel,
    dataset: Dataset,
    model_id: int,
    config: TrainConfig,
    normalization: Normalization | None = None,
    noise_sigma: float = 0.3,
) -> TrainReport:
    """
    Train `model` for `model_id` on a training split.

    The last `validation_fraction` of the split (chronologically) drives
    early stopping. Noisy model ids see noise drawn once, seeded by
    ``(config.seed, model_id)``.
    """
    if len(dataset) == 0:
        raise EmptyDataset("Training split is empty")
    expected = dataset.layout.input_dim(dataset.k, model_id)
    if model.input_dim != expected:
        raise LayoutMismatch(f"Model input {model.input_dim} != dataset input {expected} for model {model_id}")
    normalization = normalization or fit_normalization(dataset)
    x, y = build_matrices(dataset, model_id, normalization, seed=config.seed, noise_sigma=noise_sigma)
    cut = len(x) - int(math.floor(len(x) * config.validation_fraction))
    if cut == 0:
        cut = len(x)
    report = fit(model, x[:cut], y[:cut], x[cut:], y[cut:], config)
    log.info(
        "Model %d: stopped at epoch %d, best epoch %d, val loss %.6f",
        model_id,
        report.stopped_at_epoch,
        report.best_epoch,
        report.best_val_loss,
    )
    return report


def train_predictor(
    dataset: Dataset,
    model_id: int,
    config: TrainConfig,
    normalization: Normalization | None = None,
    noise_sigma: float = 0.3,
) -> TrainedPredictor:
    """Build, train and wrap a model for `model_id`."""
    normalization = normalization or fit_normalization(dataset)
    model = MlpModel.build(
        dataset.layout.input_dim(dataset.k, model_id),
        dataset.layout.n_switches,
        config.hidden,
        config.dropout,
        seed=config.seed * 100 + model_id,
    )
    report = train(model, dataset, model_id, config, normalization, noise_sigma)
    return TrainedPredictor(model, model_id, dataset.layout, dataset.k, normalization, report)


def predict_drop_rates(
    model: MlpModel,
    current_state: StateVector,
    attack_vector: Sequence[float],
    model_id: int,
    normalization: Normalization,
) -> np.ndarray:
    """Per-switch drop rates (%) for `attack_vector` applied to `current_state`, on clean inputs."""
    snapshot = Snapshot(0.0, current_state, tuple(attack_vector), current_state)
    x, _ = select_inputs(snapshot, model_id, normalization)
    if x.shape[0] != model.input_dim:
        raise DimensionMismatch(f"Input width {x.shape[0]} != model input {model.input_dim}")
    return np.clip(normalization.denormalize_target(forward(model, x)), 0.0, 100.0)


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #
def _layer_to_dict(layer: Layer) -> dict[str, Any]:
    if isinstance(layer, Dense):
        return {
            "type": "dense",
            "activation": layer.activation,
            "weights": layer.weights.tolist(),
            "bias": layer.bias.tolist(),
        }
    return {"type": "dropout", "rate": layer.rate}


def _layer_from_dict(data: dict[str, Any]) -> Layer:
    if data["type"] == "dense":
        return Dense(np.array(data["weights"], dtype=float), np.array(data["bias"], dtype=float), data["activation"])
    if data["type"] == "dropout":
        return Dropout(float(data["rate"]))
    raise ValueError(f"Unknown layer type {data['type']!r}")


def save_checkpoint(predictor: TrainedPredictor, path: str, meta: dict[str, Any] | None = None) -> str:
    document = {
        "format": CHECKPOINT_FORMAT,
        "model_id": predictor.model_id,
        "k": predictor.k,
        "layout": [list(c) for c in predictor.layout.categories],
        "normalization": predictor.normalization.to_dict(),
        "layers": [_layer_to_dict(layer) for layer in predictor.model.layers],
        "report": asdict(predictor.report) if predictor.report else None,
        "meta": dict(meta or {}),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")
    log.info("Saved model %d checkpoint to %s", predictor.model_id, path)
    return path


def load_checkpoint(path: str) -> TrainedPredictor:
    with open(path, "r", encoding="utf-8") as f:
        document = json.load(f)
    if document.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint ({document.get('format')!r})")
    layout = StateLayout(tuple(tuple(c) for c in document["layout"]))
    model = MlpModel([_layer_from_dict(d) for d in document["layers"]])
    report = TrainReport(**document["report"]) if document.get("report") else None
    return TrainedPredictor(
        model,
        int(document["model_id"]),
        layout,
        int(document["k"]),
        Normalization.from_dict(document["normalization"]),
        report,
    )
