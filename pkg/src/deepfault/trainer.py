"""Seeded mini-batch SGD for dense leaky-ReLU classifiers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from deepfault.errors import ArgumentError
from deepfault.network import (
    DEFAULT_ALPHA,
    Network,
    as_dataset,
    cross_entropy_loss,
    leaky_relu,
    leaky_relu_derivative,
    predict,
    softmax,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple = (20,) * 8
    learning_rate: float = 0.005
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden or min(self.hidden) < 1:
            raise ArgumentError(f"hidden widths must be positive and non-empty, got {self.hidden}")
        if not self.learning_rate > 0:
            raise ArgumentError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if not self.alpha > 0:
            raise ArgumentError(f"alpha must be > 0, got {self.alpha}")


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_network(input_width: int, num_classes: int, cfg: TrainConfig) -> tuple[list, list]:
    rng = np.random.default_rng(cfg.seed)
    widths = [input_width, *cfg.hidden, num_classes]
    weights = [glorot_uniform(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
    biases = [np.zeros(b) for b in widths[1:]]
    return weights, biases


def _sgd_step(weights, biases, x, y, lr, alpha):
    pre, post = [], [x]
    a = x
    for w, b in zip(weights[:-1], biases[:-1]):
        z = a @ w.T + b
        a = leaky_relu(z, alpha)
        pre.append(z)
        post.append(a)
    probs = softmax(a @ weights[-1].T + biases[-1])
    delta = probs
    delta[np.arange(len(y)), y] -= 1.0
    delta /= len(y)
    for i in range(len(weights) - 1, -1, -1):
        grad_w = delta.T @ post[i]
        grad_b = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i]) * leaky_relu_derivative(pre[i - 1], alpha)
        weights[i] -= lr * grad_w
        biases[i] -= lr * grad_b


def train(data, cfg: TrainConfig, num_classes: Optional[int] = None,
          on_epoch: Optional[Callable[[int, Network], None]] = None) -> Network:
    """Train a classifier on ``data`` with plain mini-batch SGD on softmax cross-entropy.

    The result depends only on ``data``, ``cfg`` and ``num_classes``: the seed
    drives both weight initialisation and the batch order, which is drawn
    once and replayed every epoch.

    Args:
        data: A :class:`~deepfault.network.Dataset` or sequence of ``LabeledInput``.
        cfg: Hyper-parameters.
        num_classes: Output width; defaults to ``max(label) + 1``.
        on_epoch: Called as ``on_epoch(epoch, net)`` after every epoch (1-based).
    """
    data = as_dataset(data)
    if len(data) == 0:
        raise ArgumentError("training data is empty")
    if num_classes is None:
        num_classes = int(data.labels.max()) + 1
    if data.labels.min() < 0 or data.labels.max() >= num_classes:
        raise ArgumentError(f"labels must lie in 0..{num_classes - 1}")

    weights, biases = init_network(data.features.shape[1], num_classes, cfg)
    # one seeded permutation reused every epoch
    order = np.random.default_rng([cfg.seed, 1]).permutation(len(data))
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _sgd_step(weights, biases, data.features[idx], data.labels[idx],
                      cfg.learning_rate, cfg.alpha)
        if on_epoch is not None:
            on_epoch(epoch, Network(weights, biases, cfg.alpha))
        logger.debug("epoch %d/%d done", epoch, cfg.epochs)
    return Network(weights, biases, cfg.alpha)


def evaluate_accuracy(net: Network, data) -> float:
    data = as_dataset(data)
    if len(data) == 0:
        raise ArgumentError("evaluate_accuracy needs at least one input")
    return float(np.mean(predict(net, data.features) == data.labels))


@dataclass
class LossHistory:
    """``on_epoch`` callback that records full-dataset loss after each epoch."""

    data: object
    losses: list = field(default_factory=list)

    def __call__(self, epoch, net):
        self.losses.append(cross_entropy_loss(net, self.data))

    def regressions(self):
        return sum(b > a for a, b in zip(self.losses, self.losses[1:]))
