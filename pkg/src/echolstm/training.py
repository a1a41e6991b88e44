"""Mini-batch training: cross-entropy, Adam with decoupled weight decay, early stopping."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .cells import ConfigError, DataError, SequenceClassifier
from .tasks import Dataset, to_batch
from .tensor import Rng, log_softmax

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Optimisation produced non-finite numbers."""


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 5e-4
    dropout: float = 0.3
    max_epochs: int = 120
    patience: int = 15
    seed: int = 0
    eval_every: int = 1
    clip_norm: float | None = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.eval_every < 1:
            raise ConfigError("batch_size, max_epochs and eval_every must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0 <= self.patience <= self.max_epochs:
            raise ConfigError("patience must lie in [0, max_epochs]")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or None")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def cross_entropy(logits, label: int) -> float:
    """-log softmax(logits)[label], via log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 0 <= label < logits.size:
        raise DataError(f"label {label} out of range for {logits.size} classes")
    return float(-log_softmax(logits)[label])


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], cfg: TrainConfig | None = None) -> "AdamState":
        cfg = cfg or TrainConfig()
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
            0,
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
        )


def adam_step(params: dict[str, np.ndarray], grads, state: AdamState, cfg: TrainConfig) -> None:
    """In-place update: decoupled decay ``p -= lr*wd*p``, then bias-corrected Adam."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if cfg.weight_decay:
            p -= cfg.lr * cfg.weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_by_global_norm(grads, max_norm: float) -> float:
    norm = grads.global_norm()
    if norm > max_norm:
        k = max_norm / norm
        for g in grads.grads.values():
            g *= k
    return norm


def predict(model: SequenceClassifier, dataset: Dataset, batch_size: int = 250) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class id."""
    preds = []
    for start in range(0, len(dataset), batch_size):
        tokens, _, lengths = to_batch(dataset.samples[start : start + batch_size])
        preds.append(np.argmax(model.logits(tokens, lengths), axis=1))
    return np.concatenate(preds)


def evaluate(model: SequenceClassifier, dataset: Dataset, batch_size: int = 250) -> float:
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, dataset, batch_size) == dataset.labels))


@dataclass
class RunResult:
    best_val_accuracy: float
    test_accuracy: float | None
    loss_curve: list[float]
    accuracy_curve: list[float]
    stopped_epoch: int
    best_epoch: int
    config: dict
    seed: int
    wall_time: float
    train_accuracy: float | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(**d)

    def write_curves(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_acc"])
            for epoch, (loss, acc) in enumerate(zip(self.loss_curve, self.accuracy_curve), 1):
                w.writerow([epoch, repr(float(loss)), repr(float(acc))])


def train(
    model: SequenceClassifier,
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig,
    test_set: Dataset | None = None,
) -> tuple[SequenceClassifier, RunResult]:
    """Train in place; returns the best-validation snapshot and its RunResult.

    Early stopping watches validation accuracy (ties keep the earlier epoch)
    and stops once ``patience`` evaluations in a row failed to improve it.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("train and validation sets must be non-empty")
    started = time.perf_counter()
    rng = Rng(cfg.seed)
    state = AdamState.for_params(model.params, cfg)
    best_acc, best_epoch, best_params = -1.0, 0, None
    since_best = 0
    loss_curve: list[float] = []
    acc_curve: list[float] = []
    last_acc = 0.0
    n = len(train_set)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            batch = [train_set.samples[i] for i in order[start : start + cfg.batch_size]]
            tokens, labels, lengths = to_batch(batch)
            loss, grads = model.gradients(tokens, labels, lengths, train=True, rng=rng)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged (non-finite) in epoch {epoch}")
            if cfg.clip_norm is not None:
                clip_by_global_norm(grads, cfg.clip_norm)
            try:
                adam_step(model.params, grads, state, cfg)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from None
            total += loss * len(batch)
            count += len(batch)
        loss_curve.append(total / count)

        evaluated = epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs
        if evaluated:
            last_acc = evaluate(model, val_set)
        acc_curve.append(last_acc)
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, loss_curve[-1], last_acc)
        if not evaluated:
            continue
        if last_acc > best_acc:
            best_acc, best_epoch = last_acc, epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                break

    model.params = best_params
    test_acc = evaluate(model, test_set) if test_set is not None and len(test_set) else None
    result = RunResult(
        best_val_accuracy=best_acc,
        test_accuracy=test_acc,
        loss_curve=loss_curve,
        accuracy_curve=acc_curve,
        stopped_epoch=len(loss_curve),
        best_epoch=best_epoch,
        config={"train": cfg.to_dict(), "model": model.config.to_dict()},
        seed=cfg.seed,
        wall_time=time.perf_counter() - started,
    )
    return model, result
