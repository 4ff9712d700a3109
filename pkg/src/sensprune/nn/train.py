"""SGD-with-momentum training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, InvalidRequestError, TrainingError
from . import ops
from .network import Network

EVAL_CHUNK = 500


@dataclass
class DatasetSplit:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)


@dataclass
class TrainConfig:
    epochs: int = 5
    lr_schedule: list = field(default_factory=lambda: [(0, 0.01)])
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        self.lr_schedule = [(int(e), float(lr)) for e, lr in self.lr_schedule]
        if not self.lr_schedule or self.lr_schedule[0][0] != 0:
            raise ConfigError("lr_schedule must start at epoch 0")
        starts = [e for e, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError(f"lr_schedule epochs must be strictly increasing, got {starts}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def lr_at(self, epoch):
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if epoch >= start:
                lr = value
        return lr

    @property
    def final_lr(self):
        return self.lr_schedule[-1][1]


def loss_and_grads(net: Network, x, y):
    logits, cache = net.forward(x, train=True)
    loss, dlogits = ops.softmax_xent(logits, y)
    correct = int((logits.reshape(len(y), -1).argmax(axis=1) == y).sum())
    grads, skip_grads, _ = net.backward(dlogits, cache)
    return loss, correct, grads, skip_grads


def train(net: Network, data: DatasetSplit, cfg: TrainConfig):
    """Train ``net`` in place. Returns one ``{"epoch", "loss", "accuracy", "lr"}``
    dict per epoch."""
    if len(data) == 0:
        raise InvalidRequestError("training data is empty")
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    dtype = net.dtype
    velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params]
    skip_velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in net.skip_params]
    momentum = dtype.type(cfg.momentum)
    wd = dtype.type(cfg.weight_decay)
    log = []
    for epoch in range(cfg.epochs):
        lr = dtype.type(cfg.lr_at(epoch))
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 and seen:
                continue  # batch norm needs two samples
            x = data.images[idx]
            y = data.labels[idx]
            loss, ok, grads, skip_grads = loss_and_grads(net, x, y)
            if not np.isfinite(loss):
                raise TrainingError("loss diverged to non-finite value", epoch=epoch)
            total_loss += loss * len(idx)
            correct += ok
            seen += len(idx)
            for i, g in enumerate(grads):
                if i in net.frozen:
                    continue
                _sgd_step(net.params[i], g, velocity[i], lr, momentum, wd)
            for e, g in enumerate(skip_grads):
                _sgd_step(net.skip_params[e], g, skip_velocity[e], lr, momentum, wd)
        log.append({"epoch": epoch, "loss": total_loss / seen, "accuracy": correct / seen, "lr": float(lr)})
    return log


def _sgd_step(params, grads, velocity, lr, momentum, wd):
    for k, g in grads.items():
        if wd and k == "w":
            g = g + wd * params[k]
        v = velocity[k]
        v *= momentum
        v += g
        params[k] -= lr * v


def predict(net: Network, images):
    out = []
    for start in range(0, len(images), EVAL_CHUNK):
        logits, _ = net.forward(images[start:start + EVAL_CHUNK], train=False)
        out.append(logits.reshape(logits.shape[0], -1).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(net: Network, data: DatasetSplit) -> float:
    if len(data) == 0:
        raise InvalidRequestError("evaluation data is empty")
    pred = predict(net, data.images)
    return float(np.sum(pred == data.labels, dtype=np.int64)) / len(data)
