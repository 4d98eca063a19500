from .gradcheck import central_difference, gradient_check
from .layers import (
    CODABLE_KINDS,
    PARAMETERIZED_KINDS,
    LayerKind,
    LayerParams,
    LayerSpec,
    ShapeMismatchError,
)
from .model import ModelGraph, build_model, make_params, num_classes, trace_shapes
from .train import (
    Adam,
    TrainConfig,
    TrainReport,
    TrainingDivergedError,
    evaluate,
    softmax_cross_entropy,
    train,
)

__all__ = [
    "Adam",
    "CODABLE_KINDS",
    "LayerKind",
    "LayerParams",
    "LayerSpec",
    "ModelGraph",
    "PARAMETERIZED_KINDS",
    "ShapeMismatchError",
    "TrainConfig",
    "TrainReport",
    "TrainingDivergedError",
    "build_model",
    "central_difference",
    "evaluate",
    "gradient_check",
    "make_params",
    "num_classes",
    "softmax_cross_entropy",
    "trace_shapes",
    "train",
]
