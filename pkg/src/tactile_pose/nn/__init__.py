"""Minimal deterministic deep-learning engine: exactly the layers, regularizers
and optimizer the pose-regression pipeline needs, with reverse-mode gradients
checked against finite differences."""

from .layers import (
    Activation,
    ActivationSpec,
    BatchNorm,
    BatchNormSpec,
    Conv3x3,
    Conv3x3Spec,
    Dense,
    DenseSpec,
    Dropout,
    DropoutSpec,
    Flatten,
    FlattenSpec,
    LinearOutput,
    LinearOutputSpec,
    MaxPool2x2,
    MaxPool2x2Spec,
    ShapeError,
    conv2d_direct,
)
from .model import CheckpointError, Model, build_model, load_model, save_model
from .optim import Adam
from .train import (
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    predict,
    train,
    weighted_mse,
    weighted_mse_grad,
)

__all__ = [
    "Activation", "ActivationSpec", "Adam", "BatchNorm", "BatchNormSpec",
    "CheckpointError", "Conv3x3", "Conv3x3Spec", "Dense", "DenseSpec",
    "Dropout", "DropoutSpec", "Flatten", "FlattenSpec", "LinearOutput",
    "LinearOutputSpec", "MaxPool2x2", "MaxPool2x2Spec", "Model", "ShapeError",
    "TrainConfig", "TrainResult", "TrainingDiverged", "build_model",
    "conv2d_direct", "load_model", "predict", "save_model", "train",
    "weighted_mse", "weighted_mse_grad",
]
