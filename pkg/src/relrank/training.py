"""Margin ranking loss, SGD with Nesterov momentum, and the epoch loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

import numpy as np

from .network import PairViews, SiameseRanker, score_batches, score_pair
from .tensor import ContractError, DimensionError, RngStream, Tape, Tensor, backward, make_op


class LabelError(ValueError):
    pass


def _check_label(y) -> None:
    if np.any((np.asarray(y) != 1) & (np.asarray(y) != -1)):
        raise LabelError(f"labels must be +1 or -1, got {y}")


def margin_loss(d: float, y: int, delta: float = 3.0) -> float:
    """max(0, delta - y * d)."""
    _check_label(y)
    if delta < 0:
        raise ValueError("delta must be non-negative")
    return max(0.0, delta - y * d)


def margin_loss_grad(d: float, y: int, delta: float = 3.0) -> float:
    """dL/dd; zero on and beyond the margin boundary."""
    _check_label(y)
    return float(-y) if y * d < delta else 0.0


def hinge(d: Tensor, y: np.ndarray, delta: float) -> Tensor:
    """Mean margin loss over a batch of scores, recorded for backprop."""
    y = np.asarray(y, dtype=d.dtype).reshape(d.shape)
    _check_label(y)
    slack = delta - y * d.data
    active = slack > 0
    n = max(d.data.size, 1)
    out = np.asarray(np.where(active, slack, 0).sum() / n, dtype=d.dtype)
    return make_op("hinge", out, (d,), lambda g: (np.where(active, -y, 0).astype(d.dtype) * (g / n),))


@dataclass
class TrainConfig:
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-6
    nesterov: bool = True
    batch_size: int = 50
    lr_decay: float = 0.15
    lr_step: int = 10
    delta: float = 3.0
    patience: int = 10
    max_epochs: int = 100
    min_improvement: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: ``lr0 * (1 - lr_decay) ** (epoch // lr_step)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr0 * (1.0 - cfg.lr_decay) ** (epoch // cfg.lr_step)


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    epoch: int = 0
    lr: float = 0.0

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float = 0.0) -> "OptimizerState":
        return cls({k: np.zeros_like(t.data) for k, t in params.items()}, 0, lr)


def decays(name: str) -> bool:
    return not name.endswith(".bias")


def sgd_nesterov_step(params: dict[str, Tensor], state: OptimizerState, cfg: TrainConfig) -> None:
    """In-place update of every parameter from its ``grad``.

    ``g = grad + wd * p`` (weights only), ``v <- mu v - lr g``, then
    ``p <- p + mu v - lr g`` with Nesterov or ``p <- p + v`` without.
    """
    lr, mu = state.lr, cfg.momentum
    for name, p in params.items():
        if p.grad is None:
            continue
        v = state.velocity[name]
        if v.shape != p.data.shape or p.grad.shape != p.data.shape:
            raise DimensionError(f"{name}: optimizer shapes {v.shape}/{p.grad.shape} vs parameter {p.data.shape}")
        g = p.grad + cfg.weight_decay * p.data if decays(name) and cfg.weight_decay else p.grad
        v *= mu
        v -= lr * g
        if cfg.nesterov:
            p.data += mu * v - lr * g
        else:
            p.data += v


class PairSource(Protocol):
    """Anything that turns pair samples into batched network views."""

    def pair_views(self, pairs, train: bool = False, rng: Optional[RngStream] = None) -> PairViews: ...


def train_step(ranker: SiameseRanker, pv: PairViews, labels, state: OptimizerState, cfg: TrainConfig, rng) -> float:
    ranker.zero_grad()
    with Tape() as tape:
        loss = hinge(score_pair(ranker, pv, train=True, rng=rng), labels, cfg.delta)
    backward(tape, loss)
    sgd_nesterov_step(ranker.parameters(), state, cfg)
    return float(loss.data)


def train_epoch(ranker: SiameseRanker, pairs: Sequence, source: PairSource, cfg: TrainConfig,
                state: OptimizerState, rng: RngStream) -> float:
    """One shuffled pass in mini-batches; returns the mean per-pair loss."""
    if len(pairs) == 0:
        raise ContractError("train_epoch: no training pairs")
    order = rng.permutation(len(pairs))
    total = 0.0
    for k in range(0, len(pairs), cfg.batch_size):
        batch = [pairs[i] for i in order[k : k + cfg.batch_size]]
        pv = source.pair_views(batch, train=True, rng=rng)
        labels = np.array([p.label for p in batch])
        total += train_step(ranker, pv, labels, state, cfg, rng) * len(batch)
    return total / len(pairs)


def ranking_hits(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per pair: the predicted ordering agrees with the label (d == 0 never does)."""
    return np.sign(scores).astype(np.int64) == np.asarray(labels)


def score_pairs(ranker: SiameseRanker, pairs: Sequence, source: PairSource, batch_size: int = 50) -> np.ndarray:
    return score_batches(
        ranker, (source.pair_views(pairs[k : k + batch_size]) for k in range(0, len(pairs), batch_size))
    )


def validate_pairs(ranker: SiameseRanker, pairs: Sequence, source: PairSource, cfg: TrainConfig) -> tuple[float, float]:
    """(ranking accuracy, mean margin loss) in eval mode."""
    d = score_pairs(ranker, pairs, source, cfg.batch_size)
    y = np.array([p.label for p in pairs])
    loss = np.maximum(0.0, cfg.delta - y * d.astype(np.float64)).mean()
    return float(ranking_hits(d, y).mean()), float(loss)


@dataclass
class EpochRow:
    epoch: int
    loss: float
    val_accuracy: float
    val_loss: float
    lr: float


@dataclass
class TrainReport:
    rows: list[EpochRow] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    @property
    def best(self) -> EpochRow:
        return self.rows[self.best_epoch]

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "val_accuracy", "lr"])
            for r in self.rows:
                w.writerow([r.epoch, repr(r.loss), repr(r.val_accuracy), repr(r.lr)])


def snapshot(ranker: SiameseRanker) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in ranker.parameters().items()}


def restore(ranker: SiameseRanker, weights: dict[str, np.ndarray]) -> None:
    for k, t in ranker.parameters().items():
        t.data[...] = weights[k]


Validator = Callable[[SiameseRanker], tuple[float, float]]


def fit(ranker: SiameseRanker, train_pairs: Sequence, val_pairs: Sequence, source: PairSource,
        cfg: TrainConfig, validate: Optional[Validator] = None,
        epoch_fn: Optional[Callable[..., float]] = None) -> TrainReport:
    """Train with early stopping; leaves the best epoch's weights in ``ranker``.

    The best epoch has the highest validation accuracy, ties (within
    ``min_improvement``) going to the lower validation loss. Training stops
    once ``patience`` consecutive epochs bring no gain above
    ``min_improvement``. ``validate`` and ``epoch_fn`` replace the default
    validation and epoch routines (used by tests).
    """
    if len(val_pairs) == 0 and validate is None:
        raise ContractError("fit: validation set is empty")
    validate = validate or (lambda r: validate_pairs(r, val_pairs, source, cfg))
    epoch_fn = epoch_fn or train_epoch
    rng = RngStream(cfg.seed).spawn(0x7A1)
    state = OptimizerState.for_params(ranker.parameters())
    report = TrainReport()
    best_weights = snapshot(ranker)
    best_acc, best_loss = -math.inf, math.inf
    stale = 0
    for epoch in range(cfg.max_epochs):
        state.epoch, state.lr = epoch, lr_at(epoch, cfg)
        loss = epoch_fn(ranker, train_pairs, source, cfg, state, rng)
        acc, vloss = validate(ranker)
        report.rows.append(EpochRow(epoch, loss, acc, vloss, state.lr))
        significant = acc > best_acc + cfg.min_improvement
        tie_better = not significant and abs(acc - best_acc) <= cfg.min_improvement and vloss < best_loss
        if significant or tie_better:
            if significant:
                best_acc = acc
            best_loss = vloss
            report.best_epoch = epoch
            best_weights = snapshot(ranker)
        stale = 0 if significant else stale + 1
        if stale >= cfg.patience:
            report.stop_reason = f"no improvement for {cfg.patience} epochs"
            break
    else:
        report.stop_reason = f"reached max_epochs={cfg.max_epochs}"
    restore(ranker, best_weights)
    return report


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
