"""Minimal deterministic numpy engine for the networks the search space emits."""
from .layers import (
    BackwardError,
    BatchNorm2d,
    Conv2d,
    ConvAttention,
    Flatten,
    GELU,
    LayerNorm,
    LeakyReLU,
    Linear,
    Param,
    ReLU,
    ShapeError,
    Softmax,
    fake_quantize,
)
from .network import INPUT_SHAPE, LayerSpec, Network, build_layer
from .optim import AdamW, scheduled_lr
from .training import (
    FULL_EPOCHS,
    PARTIAL_EPOCHS,
    Evaluation,
    TrainConfig,
    TrainResult,
    evaluate,
    train,
)

__all__ = [
    "AdamW", "BackwardError", "BatchNorm2d", "Conv2d", "ConvAttention", "Evaluation",
    "FULL_EPOCHS", "Flatten", "GELU", "INPUT_SHAPE", "LayerNorm", "LayerSpec", "LeakyReLU",
    "Linear", "Network", "PARTIAL_EPOCHS", "Param", "ReLU", "ShapeError", "Softmax",
    "TrainConfig", "TrainResult", "build_layer", "evaluate", "fake_quantize",
    "scheduled_lr", "train",
]
