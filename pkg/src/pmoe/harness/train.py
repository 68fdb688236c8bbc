"""AdamW, the mini-batch training loop, and evaluation."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from ..dispatch import DispatchTrace
from ..model import PMoEModel, forward, pmoe_forward, trainable_parameters
from ..numerics import Rng, Tensor, cross_entropy, no_grad
from .data import Dataset


class TrainingError(ArithmeticError):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int | None = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("learning_rate and eps must be positive, weight_decay non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class AdamWState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[Tensor], grads: list[np.ndarray], state: AdamWState, config: TrainConfig) -> AdamWState:
    """One in-place AdamW update (weight decay decoupled from the moments)."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    t = state.step + 1
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {i}", t)
    b1, b2, lr = config.beta1, config.beta2, config.learning_rate
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.data.shape != g.shape or m.shape != g.shape:
            raise ValueError(f"shape mismatch: param {p.data.shape}, grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * config.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    state.step = t
    return state


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: float | None


@dataclass
class MetricsReport:
    epochs: list[EpochMetrics] = field(default_factory=list)
    steps: int = 0
    trace_histogram: dict[int, list[int]] = field(default_factory=dict)

    @property
    def final(self) -> EpochMetrics:
        return self.epochs[-1]

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "train_acc", "eval_acc"])
            for e in self.epochs:
                w.writerow([e.epoch, f"{e.train_loss:.6f}", f"{e.train_acc:.6f}", "" if e.eval_acc is None else f"{e.eval_acc:.6f}"])


def predict(model, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Logits for every image, computed without recording a graph."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(forward(model, images[i : i + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, 0))


def evaluate(model, data: Dataset, batch_size: int = 128) -> tuple[float, float]:
    """(mean cross-entropy, accuracy)."""
    logits = predict(model, data.images, batch_size)
    loss = cross_entropy(Tensor(logits), data.labels).item()
    acc = float((logits.argmax(axis=1) == data.labels).mean())
    return loss, acc


def accuracy(model, data: Dataset) -> float:
    return evaluate(model, data)[1]


def collect_trace(model: PMoEModel, images: np.ndarray, batch_size: int = 128) -> DispatchTrace:
    trace = DispatchTrace()
    with no_grad():
        for i in range(0, len(images), batch_size):
            pmoe_forward(model, images[i : i + batch_size], trace)
    return trace


def train(model, dataset: Dataset, config: TrainConfig, eval_set: Dataset | None = None, log=None) -> MetricsReport:
    """Mini-batch cross-entropy training of the model's trainable parameters.

    Epoch 0 is the evaluation before any update.  Batches come from a seeded
    shuffle per epoch.  Training stops early after ``config.max_steps``.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    params = trainable_parameters(model)
    state = AdamWState()
    rng = Rng(config.seed)
    report = MetricsReport()

    def record(epoch: int) -> None:
        loss, acc = evaluate(model, dataset)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite training loss in epoch {epoch}", state.step)
        ev = evaluate(model, eval_set)[1] if eval_set is not None and len(eval_set) else None
        report.epochs.append(EpochMetrics(epoch, loss, acc, ev))
        if log is not None:
            log(report.epochs[-1])

    record(0)
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        order = rng.child(epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            if config.max_steps is not None and state.step >= config.max_steps:
                break
            idx = order[start : start + config.batch_size]
            for p in params:
                p.grad = None
            loss = cross_entropy(forward(model, dataset.images[idx]), dataset.labels[idx])
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss {loss.item()}", state.step + 1)
            loss.backward()
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
            adamw_step(params, grads, state, config)
        record(epoch)
        if config.max_steps is not None and state.step >= config.max_steps:
            break
    for p in params:
        p.grad = None
    report.steps = state.step
    if isinstance(model, PMoEModel) and model.config.mode == "pmoe":
        source = eval_set if eval_set is not None and len(eval_set) else dataset
        report.trace_histogram = {l: h.tolist() for l, h in collect_trace(model, source.images).histogram().items()}
    return report
