"""CNN pose regression: architecture from a hyperparameter vector, training
on tactile datasets, evaluation by per-component MAE.

The network is a stack of conv blocks (3x3 conv, optional batchnorm between
convolution and activation, activation, 2x2 max-pool) followed by dense
hidden layers with dropout applied to their inputs, and a linear output
layer (also behind dropout). L1/L2 penalties act on dense and output weights.

Training minimizes plain MSE on labels scaled by 1 / max|bound|, which
equals the 1/max^2-weighted MSE on raw labels.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .data import Dataset, LabelScaler, label_components, training_arrays
from .nn.layers import (
    ActivationSpec,
    BatchNormSpec,
    Conv3x3Spec,
    DenseSpec,
    DropoutSpec,
    FlattenSpec,
    LinearOutputSpec,
    MaxPool2x2Spec,
)
from .tpe import Categorical, LogUniform, Ordinal, SearchSpace, Uniform

POWER_CHOICES = tuple(2**k for k in range(1, 10))  # 2, 4, ..., 512
BATCH_CHOICES = (16, 32, 64, 128)
LAYER_COUNT_CHOICES = (1, 2, 3, 4, 5)


class ArchitectureError(ValueError):
    """Requested conv depth is infeasible for the input size."""


@dataclass(frozen=True)
class Hyperparams:
    """One point in the architecture/training search space."""

    n_conv: int = 3
    n_filters: int = 16
    n_dense: int = 1
    n_units: int = 64
    activation: str = "relu"
    dropout: float = 0.0
    l1: float = 1e-4
    l2: float = 1e-4
    batch_size: int = 32
    use_batchnorm: bool = True

    def __post_init__(self) -> None:
        if self.n_conv not in LAYER_COUNT_CHOICES:
            raise ValueError(f"n_conv {self.n_conv} not in {LAYER_COUNT_CHOICES}")
        if self.n_dense not in LAYER_COUNT_CHOICES:
            raise ValueError(f"n_dense {self.n_dense} not in {LAYER_COUNT_CHOICES}")
        if self.n_filters not in POWER_CHOICES:
            raise ValueError(f"n_filters {self.n_filters} not a power of two <= 512")
        if self.n_units not in POWER_CHOICES:
            raise ValueError(f"n_units {self.n_units} not a power of two <= 512")
        if self.activation not in ("relu", "elu"):
            raise ValueError(f"activation {self.activation!r} not relu/elu")
        if not 0.0 <= self.dropout <= 0.5:
            raise ValueError(f"dropout {self.dropout} outside [0, 0.5]")
        for name in ("l1", "l2"):
            v = getattr(self, name)
            if not 1e-4 <= v <= 1e-1:
                raise ValueError(f"{name} {v} outside [1e-4, 1e-1]")
        if self.batch_size not in BATCH_CHOICES:
            raise ValueError(f"batch_size {self.batch_size} not in {BATCH_CHOICES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**d)


def hyperparameter_space() -> SearchSpace:
    """The full architecture/training search space."""
    return SearchSpace((
        Ordinal("n_conv", LAYER_COUNT_CHOICES),
        Ordinal("n_filters", POWER_CHOICES),
        Ordinal("n_dense", LAYER_COUNT_CHOICES),
        Ordinal("n_units", POWER_CHOICES),
        Categorical("activation", ("relu", "elu")),
        Uniform("dropout", 0.0, 0.5),
        LogUniform("l1", 1e-4, 1e-1),
        LogUniform("l2", 1e-4, 1e-1),
        Ordinal("batch_size", BATCH_CHOICES),
        Categorical("use_batchnorm", (True, False)),
    ))


def conv_ladder(input_size: int, n_conv: int) -> list[int]:
    """Spatial sizes after each conv and pool; raises if the chain collapses."""
    sizes = []
    s = input_size
    for i in range(n_conv):
        if s < 3:
            raise ArchitectureError(
                f"conv block {i + 1}: spatial size {s} < 3 "
                f"(n_conv={n_conv} infeasible for {input_size}x{input_size} input)"
            )
        s -= 2
        sizes.append(s)
        if s < 2:
            raise ArchitectureError(
                f"pool in block {i + 1}: spatial size {s} < 2 "
                f"(n_conv={n_conv} infeasible for {input_size}x{input_size} input)"
            )
        s //= 2
        sizes.append(s)
    return sizes


def max_feasible_conv(input_size: int) -> int:
    n = 0
    s = input_size
    while s >= 3 and (s - 2) >= 2 and n < max(LAYER_COUNT_CHOICES):
        s = (s - 2) // 2
        n += 1
    return n


def build(hp: Hyperparams, n_out: int, input_size: int, seed: int = 0,
          dtype=np.float64, metadata: dict | None = None) -> nn.Model:
    """Model for a (1, input_size, input_size) binary image and n_out outputs."""
    conv_ladder(input_size, hp.n_conv)  # feasibility check
    act = hp.activation
    specs = []
    for _ in range(hp.n_conv):
        specs.append(Conv3x3Spec(hp.n_filters))
        if hp.use_batchnorm:
            specs.append(BatchNormSpec())
        specs.append(ActivationSpec(act))
        specs.append(MaxPool2x2Spec())
    specs.append(FlattenSpec())
    for _ in range(hp.n_dense):
        specs.append(DropoutSpec(hp.dropout))
        specs.append(DenseSpec(hp.n_units))
        specs.append(ActivationSpec(act))
    specs.append(DropoutSpec(hp.dropout))
    specs.append(LinearOutputSpec(n_out))
    return nn.build_model(specs, (1, input_size, input_size), seed=seed, dtype=dtype,
                          metadata=metadata)


def fit(
    hp: Hyperparams,
    train_ds: Dataset,
    val_ds: Dataset,
    seed: int = 0,
    learning_rate: float = 1e-4,
    lr_decay: float = 1e-6,
    max_epochs: int = 200,
    patience_epochs: int = 10,
    dtype=np.float64,
) -> tuple[nn.Model, float]:
    """Train on scaled labels; returns the model and its best validation MSE."""
    if train_ds.object_type != val_ds.object_type:
        raise ValueError(
            f"object types differ: train {train_ds.object_type!r} "
            f"vs val {val_ds.object_type!r}"
        )
    x_train, y_train, scaler = training_arrays(train_ds)
    x_val, y_val, _ = training_arrays(val_ds)
    input_size = x_train.shape[-1]
    n_out = y_train.shape[1]
    metadata = {
        "object_type": train_ds.object_type,
        "input_size": input_size,
        "hyperparams": hp.to_dict(),
        "label_components": list(scaler.component_names),
        "label_scales": [float(s) for s in scaler.scales],
        "seed": seed,
    }
    model = build(hp, n_out, input_size, seed=seed, dtype=dtype, metadata=metadata)
    config = nn.TrainConfig(
        learning_rate=learning_rate,
        lr_decay=lr_decay,
        batch_size=min(hp.batch_size, len(x_train)),
        patience_epochs=patience_epochs,
        max_epochs=max_epochs,
        l1_coeff=hp.l1,
        l2_coeff=hp.l2,
        seed=seed,
    )
    result = nn.train(model, (x_train, y_train), (x_val, y_val), config)
    model.metadata["history"] = result.history
    model.metadata["best_epoch"] = result.best_epoch
    model.metadata["stopped_epoch"] = result.stopped_epoch
    model.metadata["best_val_loss"] = result.best_val_loss
    return model, result.best_val_loss


def scaler_from_model(model: nn.Model) -> LabelScaler:
    meta = model.metadata
    return LabelScaler(
        component_names=tuple(meta["label_components"]),
        scales=np.array(meta["label_scales"], dtype=float),
    )


def predict_poses(model: nn.Model, images: np.ndarray) -> np.ndarray:
    """Pose predictions in physical units for a stack of {0,1} images."""
    x = np.asarray(images, dtype=float)
    if x.ndim == 3:
        x = x[:, None, :, :]
    scaled = nn.predict(model, x)
    return scaler_from_model(model).unscale(scaled)


def mean_predictor_loss(train_ds: Dataset, eval_ds: Dataset) -> float:
    """Scaled-label MSE of always predicting the training-label mean."""
    y_train, scaler = training_arrays(train_ds)[1:]
    y_eval = scaler.scale(eval_ds.labels())
    mean = y_train.mean(axis=0, keepdims=True)
    return nn.weighted_mse(np.repeat(mean, len(y_eval), axis=0), y_eval)


def _moving_average(series: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; edge windows shrink to the available samples."""
    n = len(series)
    csum = np.concatenate([[0.0], np.cumsum(series)])
    half = window // 2
    lo = np.clip(np.arange(n) - half, 0, n)
    hi = np.clip(np.arange(n) + window - half, 0, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


@dataclass
class EvalReport:
    """Per-component MAE plus label-ordered prediction series for plotting."""

    component_names: tuple[str, ...]
    mae: np.ndarray
    labels_sorted: dict[str, np.ndarray]
    predictions_sorted: dict[str, np.ndarray]
    smoothed_predictions: dict[str, np.ndarray]
    window: int

    def summary(self) -> dict:
        return {
            "mae": {c: float(m) for c, m in zip(self.component_names, self.mae)},
            "window": self.window,
            "n": int(len(next(iter(self.labels_sorted.values())))),
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")

    def to_csv(self, path: str | Path) -> None:
        """Per-sample table: label, prediction and smoothed prediction per
        component, each ordered by that component's label value."""
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            header = []
            for c in self.component_names:
                header += [f"{c}_label", f"{c}_prediction", f"{c}_smoothed"]
            writer.writerow(header)
            n = len(next(iter(self.labels_sorted.values())))
            for i in range(n):
                row = []
                for c in self.component_names:
                    row += [
                        repr(float(self.labels_sorted[c][i])),
                        repr(float(self.predictions_sorted[c][i])),
                        repr(float(self.smoothed_predictions[c][i])),
                    ]
                writer.writerow(row)


def evaluate(model: nn.Model, test_ds: Dataset, window: int = 100) -> EvalReport:
    """MAE per component in physical units, plus smoothed label-sweep series."""
    if len(test_ds) < 1:
        raise ValueError("test set is empty")
    if model.metadata.get("object_type") not in (None, test_ds.object_type):
        raise ValueError(
            f"model was trained for {model.metadata['object_type']!r}, "
            f"test set is {test_ds.object_type!r}"
        )
    preds = predict_poses(model, test_ds.images())
    labels = test_ds.labels()
    comps = label_components(test_ds.object_type)
    mae = np.abs(preds - labels).mean(axis=0)
    window = min(window, len(labels))
    labels_sorted, preds_sorted, smoothed = {}, {}, {}
    for i, name in enumerate(comps):
        order = np.argsort(labels[:, i], kind="stable")
        labels_sorted[name] = labels[order, i]
        preds_sorted[name] = preds[order, i]
        smoothed[name] = _moving_average(preds[order, i], window)
    return EvalReport(
        component_names=comps,
        mae=mae,
        labels_sorted=labels_sorted,
        predictions_sorted=preds_sorted,
        smoothed_predictions=smoothed,
        window=window,
    )


def make_estimator(model: nn.Model, sim) -> Callable:
    """Image-driven pose estimator for the servo loop: (image, tf) -> pose array."""

    def estimator(image: np.ndarray, tf=None) -> np.ndarray:
        return predict_poses(model, image[None])[0]

    return estimator


def point_to_hyperparams(point: dict) -> Hyperparams:
    return Hyperparams(
        n_conv=int(point["n_conv"]),
        n_filters=int(point["n_filters"]),
        n_dense=int(point["n_dense"]),
        n_units=int(point["n_units"]),
        activation=str(point["activation"]),
        dropout=float(point["dropout"]),
        l1=float(point["l1"]),
        l2=float(point["l2"]),
        batch_size=int(point["batch_size"]),
        use_batchnorm=bool(point["use_batchnorm"]),
    )


def make_objective(
    train_ds: Dataset,
    val_ds: Dataset,
    seed: int = 0,
    learning_rate: float = 1e-4,
    max_epochs: int = 200,
    patience_epochs: int = 10,
) -> Callable[[dict], float]:
    """Objective for the hyperparameter optimizer: point -> validation MSE.

    Infeasible architectures and diverged runs raise, which the optimizer
    records as failed trials.
    """

    def objective(point: dict) -> float:
        hp = point_to_hyperparams(point)
        _, best_val = fit(
            hp, train_ds, val_ds, seed=seed,
            learning_rate=learning_rate, max_epochs=max_epochs,
            patience_epochs=patience_epochs,
        )
        return best_val

    return objective
