"""Minibatch SGD (optional momentum) on mean cross-entropy."""

import csv
import logging
from dataclasses import dataclass, fields

import numpy as np

from fssd import tensor as T
from fssd.models import Checkpoint, forward_logits
from fssd.tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    snapshot_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.snapshot_every < 1:
            raise ValueError("batch_size, epochs and snapshot_every must be positive")

    def to_dict(self):
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = float(d[f.name]) if f.type is float or f.type == "float" else int(d[f.name])
        return cls(**kw)


@dataclass
class TrainResult:
    model: object
    snapshots: list
    log: list  # (step, loss, accuracy) per optimisation step


def loss_and_grads(model, x, y, params=None):
    params = model.param_tensors() if params is None else params
    _, logits = model.forward(Tensor(x), params)
    loss = T.cross_entropy(logits, y)
    grads = T.gradient(loss, list(params.values()))
    return loss.item(), {name: grads[t] for name, t in params.items()}, logits.data


def train(model, data, cfg):
    """Train a copy of ``model``; the input model is left untouched.

    Snapshots are taken at step 0, every ``snapshot_every`` steps, and at
    the final step.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    if data.labels.min() < 0 or data.labels.max() >= model.num_classes:
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    model = model.copy()
    steps_per_epoch = -(-len(data) // cfg.batch_size)
    if cfg.epochs * steps_per_epoch < cfg.snapshot_every:
        log.warning("snapshot_every=%d exceeds the %d total steps; only the first and last snapshot will be kept",
                    cfg.snapshot_every, cfg.epochs * steps_per_epoch)
    rng = np.random.default_rng(cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    snapshots = [Checkpoint.from_model(model, step=0, seed=cfg.seed)]
    history = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads, logits = loss_and_grads(model, data.inputs[idx], data.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(step, loss)
            acc = float(np.mean(np.argmax(logits, axis=1) == data.labels[idx]))
            for k, g in grads.items():
                velocity[k] = cfg.momentum * velocity[k] + g
                model.params[k] = model.params[k] - cfg.learning_rate * velocity[k]
            step += 1
            history.append((step, loss, acc))
            if step % cfg.snapshot_every == 0:
                snapshots.append(Checkpoint.from_model(model, step=step, seed=cfg.seed))
    if snapshots[-1].step != step:
        snapshots.append(Checkpoint.from_model(model, step=step, seed=cfg.seed))
    return TrainResult(model=model, snapshots=snapshots, log=history)


def evaluate_accuracy(model, data):
    if len(data) == 0:
        return 0.0
    logits = forward_logits(model, data.inputs)
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


def write_training_log(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "accuracy"])
        for step, loss, acc in history:
            w.writerow([step, repr(loss), repr(acc)])
