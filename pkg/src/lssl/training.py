"""Mini-batch training loop shared by the CLI and the estimators."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .grad import AdamState, adam_step, loss_and_grad, model_backward
from .layer import LsslModel, model_forward
from .tasks import Dataset

__all__ = [
    "DivergenceError",
    "ReduceOnPlateau",
    "TrainResult",
    "evaluate",
    "predict",
    "train_model",
    "loss_for",
]


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


def loss_for(dataset: Dataset) -> str:
    return "cross_entropy" if dataset.task_kind == "classify" else "mse"


@dataclass
class ReduceOnPlateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    lr: float
    factor: float = 0.2
    patience: int = 10
    min_lr: float = 0.0
    best: float = np.inf
    bad_epochs: int = 0

    def step(self, value: float) -> float:
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = np.inf
    best_params: Optional[dict] = None


def predict(model: LsslModel, X, batch_size=256, mode="conv"):
    """Forward pass in batches."""
    X = np.asarray(X, dtype=np.float64)
    outs = [model_forward(model, X[i:i + batch_size], mode) for i in range(0, len(X), batch_size)]
    return np.concatenate(outs, axis=0)


def evaluate(model: LsslModel, dataset: Dataset, batch_size=256):
    """``(loss, metric)``: accuracy for classification, RMSE for regression."""
    loss = loss_for(dataset)
    pred = predict(model, dataset.X, batch_size)
    value, _ = loss_and_grad(pred, dataset.y, loss)
    if loss == "mse":
        metric = float(np.sqrt(value))
    else:
        metric = float(np.mean(pred.argmax(axis=-1) == dataset.y))
    return value, metric


def train_model(model: LsslModel, train: Dataset, val: Optional[Dataset] = None, *,
                epochs=10, lr=1e-3, batch_size=32, seed=0, factor=0.2, patience=10,
                stop_below: Optional[float] = None, on_epoch: Optional[Callable] = None,
                clock=time.perf_counter) -> TrainResult:
    """Adam with reduce-on-plateau; keeps the parameters of the best validation epoch.

    ``on_epoch(epoch, split, loss, metric, wall_seconds)`` is called once per
    split per epoch. The best parameters are restored into ``model`` at the end.
    With ``stop_below`` set, training ends early once the monitored loss
    (validation if given, else training) drops below it.

    Raises
    ------
    DivergenceError
        If any batch loss or gradient is non-finite.
    """
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    loss = loss_for(train)
    rng = np.random.default_rng(seed)
    sched = ReduceOnPlateau(lr, factor, patience)
    state = AdamState()
    result = TrainResult()
    start = clock()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            try:
                value, grads = model_backward(model, train.X[idx], train.y[idx], loss)
            except FloatingPointError as exc:
                raise DivergenceError(f"non-finite loss at epoch {epoch}") from exc
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(f"non-finite gradient at epoch {epoch}")
            params = {k: v for k, v in model.parameters(trainable_only=True).items()}
            new, state = adam_step(params, grads, state, sched.lr)
            model.update(new)
            total += value * len(idx)
            count += len(idx)
        train_metric = evaluate(model, train)[1] if loss == "cross_entropy" else float(np.sqrt(total / count))
        row = (epoch, "train", total / count, train_metric, clock() - start)
        result.history.append(row)
        if on_epoch:
            on_epoch(*row)
        if val is not None and len(val):
            v_loss, v_metric = evaluate(model, val)
            if not np.isfinite(v_loss):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
            row = (epoch, "val", v_loss, v_metric, clock() - start)
            result.history.append(row)
            if on_epoch:
                on_epoch(*row)
            score = v_loss
        else:
            score = total / count
        if score < result.best_val:
            result.best_val = score
            result.best_epoch = epoch
            result.best_params = {k: v.copy() for k, v in model.parameters(trainable_only=True).items()}
        sched.step(score)
        if stop_below is not None and score < stop_below:
            break
    if result.best_params is not None:
        model.update(result.best_params)
    return result
