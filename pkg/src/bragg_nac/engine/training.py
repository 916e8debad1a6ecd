"""Mini-batch MSE training and Euclidean-distance evaluation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as _layers
from .optim import SCHEDULES, AdamW, scheduled_lr

logger = logging.getLogger(__name__)

PATCH_SIZE = 11
PARTIAL_EPOCHS = 50
FULL_EPOCHS = 300
DIVERGENCE_LOSS = 1e6


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    schedule: str = "constant"
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 1e-5 <= self.lr <= 1e-1:
            raise ValueError(f"lr must lie in [1e-5, 1e-1], got {self.lr}")
        if not 0.0 <= self.weight_decay <= 1e-2:
            raise ValueError(f"weight_decay must lie in [0, 1e-2], got {self.weight_decay}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    failed: bool = False

    @property
    def final_loss(self):
        return self.history[-1]["loss"] if self.history else float("nan")


@dataclass
class Evaluation:
    mean_distance: float
    distances: np.ndarray


def mse_loss(pred, target):
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, (2.0 / diff.size) * diff


def train(network, X, y, config, on_step=None):
    """Train ``network`` in place with AdamW on MSE.

    Shuffling is driven by ``config.seed`` only, so identical inputs give
    bitwise-identical parameters. A NaN or exploding loss stops training and
    marks the result as failed instead of raising.
    """
    X = np.asarray(X, dtype=_layers.DTYPE)
    y = np.asarray(y, dtype=_layers.DTYPE)
    result = TrainResult()
    if config.epochs == 0:
        return result
    if len(X) == 0:
        raise ValueError("cannot train on an empty split")
    rng = np.random.default_rng(config.seed)
    opt = AdamW(network.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    network.train()
    n = len(X)
    try:
        for epoch in range(config.epochs):
            opt.lr = scheduled_lr(config.lr, config.schedule, epoch, config.epochs)
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                pred = network.forward(X[idx], grad=True)
                loss, grad = mse_loss(pred, y[idx])
                if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
                    logger.info("training diverged at epoch %d (loss=%s)", epoch, loss)
                    result.failed = True
                    return result
                opt.zero_grad()
                network.backward(grad.astype(_layers.DTYPE, copy=False))
                opt.step()
                if on_step is not None:
                    on_step(network)
                total += loss * len(idx)
            result.history.append({"epoch": epoch, "lr": opt.lr, "loss": total / n})
    finally:
        network.eval()
    return result


def evaluate(network, X, y, batch_size=1024):
    """Per-sample Euclidean distance in pixels between predictions and labels."""
    X = np.asarray(X, dtype=_layers.DTYPE)
    y = np.asarray(y, dtype=_layers.DTYPE)
    if len(X) == 0:
        raise ValueError("cannot evaluate on an empty split")
    network.eval()
    pred = network.predict(X, batch_size=batch_size).astype(np.float64)
    dist = PATCH_SIZE * np.linalg.norm(pred - y.astype(np.float64), axis=1)
    if not np.all(np.isfinite(dist)):
        return Evaluation(float("inf"), dist)
    return Evaluation(float(dist.mean()), dist)
