"""Adam training loop with a two-level learning-rate schedule.

The schedule follows the reference recipe: a first phase at lr_phase1, then
a drop to lr_phase2 after ``phase_split`` epochs (defaults: 200 epochs, 100
per phase, 1e-3 then 1e-4, batches of 64). The returned model is the
snapshot with the lowest validation loss, evaluated in deterministic eval
mode each epoch.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import model as nn
from .dataset import TRAIN, VAL, LagDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-4
    phase_split: int = 100
    batch_size: int = 64
    dropout: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 0.0  # 0 disables gradient clipping
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        # lr = 0 is allowed as a degenerate no-op configuration
        if self.lr_phase1 < 0 or self.lr_phase2 < 0:
            raise ValueError("learning rates must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0 <= self.phase_split <= self.epochs:
            raise ValueError("phase_split must lie in [0, epochs]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index."""
        return self.lr_phase1 if epoch <= self.phase_split else self.lr_phase2


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def append(self, epoch, train_loss, val_loss, lr, seconds):
        self.epoch.append(int(epoch))
        self.train_loss.append(float(train_loss))
        self.val_loss.append(float(val_loss))
        self.lr.append(float(lr))
        self.seconds.append(float(seconds))

    def best_epoch(self) -> int:
        return int(np.argmin(self.val_loss)) + 1

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,val_loss,lr,seconds\n")
            for row in zip(
                self.epoch, self.train_loss, self.val_loss, self.lr, self.seconds
            ):
                fh.write("%d,%.17g,%.17g,%.17g,%.17g\n" % row)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: TrainHistory):
        super().__init__(message)
        self.history = history


def adam_step(params, grads, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied in place over named arrays."""
    if t < 1:
        raise ValueError("step index t must be >= 1")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * (g * g)
        update = lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + eps)
        if not np.all(np.isfinite(update)):
            raise FloatingPointError(f"non-finite Adam update for {name}")
        p -= update
    return params, m, v


def _clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def batch_slices(n: int, batch_size: int, order: np.ndarray):
    """Index batches covering all of ``order``; the last may be short."""
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def train(
    model: nn.ShredModel, dataset: LagDataset, cfg: TrainConfig
) -> tuple[nn.ShredModel, TrainHistory]:
    """Optimize ``model`` on the train split, selecting by validation loss.

    Train samples are reshuffled each epoch from a Philox stream seeded by
    cfg.seed; the same stream supplies dropout masks, so a fixed (config,
    dataset, seed) triple replays bitwise.
    """
    train_rows = dataset.rows(TRAIN)
    val_rows = dataset.rows(VAL)
    if train_rows.size == 0 or val_rows.size == 0:
        raise ValueError("dataset needs nonempty train and val splits")
    model = model.copy()
    model.dropout = cfg.dropout
    params = nn.param_dict(model)
    m = {k: np.zeros_like(p) for k, p in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    history = TrainHistory()
    best = model.copy()
    best_val = np.inf
    step = 0
    val_w = dataset.windows[val_rows]
    val_t = dataset.targets[val_rows]
    scratch: dict = {}
    # the per-step matmuls are too small for BLAS threading to pay off;
    # cap it so concurrent training runs (sweeps) scale across cores instead
    with threadpool_limits(limits=1):
        for epoch in range(1, cfg.epochs + 1):
            tic = time.perf_counter()
            lr = cfg.lr_at(epoch)
            order = train_rows[rng.permutation(train_rows.size)]
            total = 0.0
            for rows in batch_slices(train_rows.size, cfg.batch_size, order):
                loss, grads = nn.backward(
                    model, dataset.windows[rows], dataset.targets[rows], rng, scratch
                )
                if cfg.clip_norm > 0:
                    _clip_global_norm(grads, cfg.clip_norm)
                step += 1
                adam_step(
                    params, grads, m, v, step, lr,
                    cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                )
                total += loss * rows.size
            train_loss = total / train_rows.size
            val_loss = nn.eval_loss(model, val_w, val_t, scratch=scratch)
            history.append(epoch, train_loss, val_loss, lr, time.perf_counter() - tic)
            if not np.isfinite(val_loss):
                raise TrainingDiverged(
                    f"validation loss diverged at epoch {epoch}", history
                )
            if val_loss < best_val:
                best_val = val_loss
                best = model.copy()
            log.debug(
                "epoch %d lr %.2g train %.5g val %.5g", epoch, lr, train_loss, val_loss
            )
    return best, history
