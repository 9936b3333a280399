"""Training loop: weighted MSE, L1/L2 penalties on dense weights, Adam,
fixed shuffling stream and early stopping on validation loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import Model
from .optim import Adam


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the epoch and batch where it happened."""

    def __init__(self, epoch: int, batch: int) -> None:
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def weighted_mse(pred: np.ndarray, target: np.ndarray,
                 weights: Optional[np.ndarray] = None) -> float:
    """Mean over the batch of sum_c weight_c * (pred_c - target_c)^2."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    err2 = (pred - target) ** 2
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (pred.shape[1],):
            raise ValueError(f"weights shape {weights.shape} != ({pred.shape[1]},)")
        err2 = err2 * weights
    return float(err2.sum(axis=1).mean())


def weighted_mse_grad(pred: np.ndarray, target: np.ndarray,
                      weights: Optional[np.ndarray] = None) -> np.ndarray:
    """d(weighted_mse)/d(pred)."""
    grad = 2.0 * (np.asarray(pred, dtype=float) - np.asarray(target, dtype=float))
    if weights is not None:
        grad = grad * np.asarray(weights, dtype=float)
    return grad / pred.shape[0]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    lr_decay: float = 1e-6
    batch_size: int = 32
    patience_epochs: int = 10
    max_epochs: int = 200
    l1_coeff: float = 0.0
    l2_coeff: float = 0.0
    seed: int = 0
    loss_weights: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")
        for name in ("learning_rate", "lr_decay", "l1_coeff", "l2_coeff"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class TrainResult:
    history: dict = field(default_factory=dict)  # epoch, train_loss, val_loss
    best_epoch: int = 0
    stopped_epoch: int = 0
    best_val_loss: float = float("inf")


def predict(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode forward in batches; pure function of (model, x)."""
    outs = [model.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


def _data_loss(model: Model, x, y, weights, batch_size) -> float:
    return weighted_mse(predict(model, x, batch_size), y, weights)


def train(model: Model, train_data, val_data, config: TrainConfig) -> TrainResult:
    """Fit until validation loss stops improving for patience_epochs epochs.

    Returns the history and leaves the model holding the best-epoch weights.
    Losses in the history are data terms only (the L1/L2 penalties shape the
    gradients but are not reported). Deterministic given config.seed.
    """
    x_train, y_train = train_data
    x_val, y_val = val_data
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("training and validation sets must be nonempty")
    if config.batch_size > len(x_train):
        raise ValueError(
            f"batch_size {config.batch_size} exceeds training set size {len(x_train)}"
        )
    x_train = np.asarray(x_train, dtype=model.dtype)
    y_train = np.asarray(y_train, dtype=model.dtype)
    weights = config.loss_weights

    shuffle_rng = np.random.default_rng([config.seed, 1])
    model.seed_dropout([config.seed, 2])
    optimizer = Adam(lr=config.learning_rate, lr_decay=config.lr_decay)

    result = TrainResult(history={"epoch": [], "train_loss": [], "val_loss": []})
    best_params: list[np.ndarray] | None = None
    epochs_since_improvement = 0

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(x_train))
        epoch_loss = 0.0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            pred = model.forward(xb, training=True)
            loss = weighted_mse(pred, yb, weights)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, b)
            epoch_loss += loss * len(idx)
            model.backward(weighted_mse_grad(pred, yb, weights))

            params, grads = [], []
            for layer in model.layers:
                for name in sorted(layer.params):
                    g = layer.grads[name]
                    if name in layer.regularized:
                        w = layer.params[name]
                        if config.l1_coeff:
                            g = g + config.l1_coeff * np.sign(w)
                        if config.l2_coeff:
                            g = g + 2.0 * config.l2_coeff * w
                    params.append(layer.params[name])
                    grads.append(g)
            optimizer.step(params, grads)

        val_loss = _data_loss(model, x_val, y_val, weights, max(config.batch_size, 64))
        if not np.isfinite(val_loss):
            raise TrainingDiverged(epoch, -1)
        result.history["epoch"].append(epoch)
        result.history["train_loss"].append(epoch_loss / len(x_train))
        result.history["val_loss"].append(val_loss)

        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_params = model.get_parameter_copies()
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1
        result.stopped_epoch = epoch
        if epochs_since_improvement >= config.patience_epochs:
            break

    if best_params is not None:
        model.set_parameters(best_params)
    return result
