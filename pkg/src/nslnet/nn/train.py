"""Plain mini-batch SGD training and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..errors import ParameterError, ShapeError
from .graph import LayerGraph
from .layers import softmax_nll_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 20
    lr0: float = 0.01
    decay_start: int = 10  # last epoch (1-based) trained at lr0
    gamma: float = 0.5
    seed: int = 0
    precision: str = "single"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if not self.lr0 > 0:
            raise ParameterError("lr0 must be > 0")
        if self.precision not in ("single", "double"):
            raise ParameterError("precision must be 'single' or 'double'")


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """lr0 through epoch ``decay_start``, then multiplied by gamma every further epoch."""
    return cfg.lr0 * cfg.gamma ** max(0, epoch - cfg.decay_start)


def sgd_step(params: dict, grads: dict, epoch: int, cfg: TrainConfig) -> dict:
    """In-place ``p -= lr * g`` for every named block; returns ``params``."""
    lr = learning_rate(epoch, cfg)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        p -= p.dtype.type(lr) * g
    return params


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(epoch,))))
    return rng.permutation(n)


def train_epoch(graph: LayerGraph, images: np.ndarray, labels: np.ndarray, epoch: int, cfg: TrainConfig) -> float:
    """One shuffled pass over the data; returns the mean mini-batch loss."""
    if len(images) != len(labels):
        raise ShapeError(f"{len(images)} images but {len(labels)} labels")
    order = epoch_permutation(len(images), cfg.seed, epoch)
    params = graph.params
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        loss, d_logits = softmax_nll_loss(graph.logits(images[idx]), labels[idx])
        graph.backward(d_logits.astype(graph.dtype))
        sgd_step(params, graph.grads, epoch, cfg)
        losses.append(loss)
    return float(np.mean(losses))


def evaluate_loss(graph: LayerGraph, images, labels, batch_size: int = 256) -> float:
    total = 0.0
    for i in range(0, len(images), batch_size):
        loss, _ = softmax_nll_loss(graph.logits(images[i : i + batch_size]), labels[i : i + batch_size])
        total += loss * len(images[i : i + batch_size])
    return total / len(images)


def evaluate_accuracy(graph: LayerGraph, images, labels, batch_size: int = 256) -> float:
    labels = np.asarray(labels)
    if len(images) != len(labels):
        raise ShapeError(f"{len(images)} images but {len(labels)} labels")
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(graph.predict(images, batch_size) == labels))


def fit(graph: LayerGraph, images, labels, cfg: TrainConfig,
        on_epoch: Optional[Callable[[int, float], None]] = None) -> list[float]:
    """Train for ``cfg.epochs`` epochs; ``on_epoch(epoch, loss)`` runs after each one."""
    images = np.asarray(images, dtype=graph.dtype)
    labels = np.asarray(labels)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        loss = train_epoch(graph, images, labels, epoch, cfg)
        history.append(loss)
        log.info("epoch %d lr %.5g loss %.6f", epoch, learning_rate(epoch, cfg), loss)
        if on_epoch is not None:
            on_epoch(epoch, loss)
    return history
