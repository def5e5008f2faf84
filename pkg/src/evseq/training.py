"""Population-level training over all training sequences.

Full backpropagation through time per sequence (no truncation), one Adam
update per sequence, sequences shuffled every epoch with a seeded generator.
A patient-level validation split drives early stopping; the returned
model is the best-validation-epoch snapshot, not the last epoch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .events import EventSequence
from .model import (
    ModelConfig,
    ModelState,
    backward,
    clip_global_norm,
    clone_model,
    init_model,
    optimizer_step,
    sequence_loss,
)

GRAD_CLIP_NORM = 5.0

L2_GRID_DEFAULT = (1e-4, 1e-5, 1e-6, 1e-7)


@dataclass
class TrainConfig:
    max_epochs: int = 25
    patience: int = 4
    val_fraction: float = 0.1
    shuffle_seed: int = 0
    l2_weight: float | None = None  # None: use the model config's value

    def validate(self) -> None:
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be strictly between 0 and 1")
        if self.l2_weight is not None and self.l2_weight < 0:
            raise ValueError("l2_weight must be >= 0")


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    wall_time: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.train_losses)


def _mean_step_loss(model: ModelState, data: list[EventSequence]) -> float:
    """Unregularized loss per supervised step, for comparable epochs."""
    total = 0.0
    steps = 0
    for seq in data:
        total += sequence_loss(model, seq)
        steps += len(seq) - 1
    return total / steps


def train_population(
    data: list[EventSequence], mcfg: ModelConfig, tcfg: TrainConfig
) -> tuple[ModelState, TrainReport]:
    """Train a fresh model; returns the best-epoch snapshot and the report."""
    tcfg.validate()
    if len(data) < 2:
        raise ValueError("need at least 2 training sequences")
    for seq in data:
        if len(seq) < 2:
            raise ValueError(
                f"patient {seq.patient_id}: training sequences need length >= 2"
            )
    l2 = mcfg.l2_weight if tcfg.l2_weight is None else tcfg.l2_weight

    rng = np.random.default_rng(tcfg.shuffle_seed)
    perm = rng.permutation(len(data))
    n_val = min(max(int(round(tcfg.val_fraction * len(data))), 1), len(data) - 1)
    val_data = [data[i] for i in perm[:n_val]]
    train_data = [data[i] for i in perm[n_val:]]

    model = init_model(mcfg)
    report = TrainReport()
    best = clone_model(model)
    best_val = np.inf
    stale = 0
    start = time.perf_counter()
    for epoch in range(1, tcfg.max_epochs + 1):
        order = rng.permutation(len(train_data))
        epoch_loss = 0.0
        epoch_steps = 0
        for idx in order:
            seq = train_data[idx]
            loss, grads = backward(model, seq, l2_weight=l2)
            clip_global_norm(grads, GRAD_CLIP_NORM)
            optimizer_step(model, grads)
            epoch_loss += loss
            epoch_steps += len(seq) - 1
        report.train_losses.append(epoch_loss / epoch_steps)
        val_loss = _mean_step_loss(model, val_data)
        report.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best = clone_model(model)
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break
    report.wall_time = time.perf_counter() - start
    return best, report


def grid_select_l2(
    data: list[EventSequence],
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    candidates=L2_GRID_DEFAULT,
) -> tuple[float, dict[float, float]]:
    """Train one model per penalty candidate on the trainer's internal
    split and pick the best validation loss; ties go to the smaller
    penalty.  Returns (choice, per-candidate best validation loss)."""
    if not candidates:
        raise ValueError("need at least one candidate")
    scores: dict[float, float] = {}
    for lam in candidates:
        if lam < 0:
            raise ValueError("l2 candidates must be >= 0")
        trial = TrainConfig(
            max_epochs=tcfg.max_epochs,
            patience=tcfg.patience,
            val_fraction=tcfg.val_fraction,
            shuffle_seed=tcfg.shuffle_seed,
            l2_weight=lam,
        )
        _, report = train_population(data, mcfg, trial)
        scores[lam] = min(report.val_losses)
    choice = min(scores, key=lambda lam: (scores[lam], lam))
    return choice, scores
