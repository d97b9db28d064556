"""Training regimes: standard, adversarial, and natural-perturbation.

All three share one SGD loop. The robust regimes add, after a warm-up
``delay`` of clean-only epochs, a second loss term computed on perturbed
copies of each minibatch; the step then follows the mean of the two loss
gradients. Perturbed copies are drawn fresh every epoch from a
"train"-labelled seed stream, and the clean path consumes no randomness
beyond batch shuffling, so all regimes share bit-identical trajectories
until the delay expires (and throughout, when the perturbation is the
identity).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, pgd
from .data import DatasetSplit, batches
from .nn import ModelState, sgd_step
from .perturb import PerturbationSpec, perturb_batch
from .rng import derive_seed

MODES = ("standard", "adversarial", "natural")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    epochs: int
    lr: float
    batch_size: int
    seed: int
    delay: int = 1
    attack: AttackConfig | None = None
    spec: PerturbationSpec | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.delay < self.epochs:
            raise ValueError(f"delay must satisfy 0 <= delay < epochs, got {self.delay}")
        if self.mode == "adversarial" and self.attack is None:
            raise ValueError("adversarial mode needs an attack config")
        if self.mode == "natural" and self.spec is None:
            raise ValueError("natural mode needs a perturbation spec")


@dataclass
class EpochStats:
    epoch: int
    loss_std: float
    loss_robust: float | None
    loss_combined: float
    train_acc: float
    val_acc: float | None


@dataclass
class TrainTrace:
    rows: list = field(default_factory=list)

    def to_csv(self, path, extra: dict | None = None) -> None:
        extra = extra or {}
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(list(extra) + ["epoch", "loss_std", "loss_robust",
                                      "loss_combined", "train_acc", "val_acc"])
            for r in self.rows:
                w.writerow(list(extra.values()) + [
                    r.epoch, repr(r.loss_std),
                    "" if r.loss_robust is None else repr(r.loss_robust),
                    repr(r.loss_combined), repr(r.train_acc),
                    "" if r.val_acc is None else repr(r.val_acc),
                ])


def _combine(grads_a, grads_b):
    return tuple((a + b) / 2.0 for a, b in zip(grads_a, grads_b))


def _run(model: ModelState, split: DatasetSplit, cfg: TrainConfig,
         val_split: DatasetSplit | None, robust_batch) -> tuple[ModelState, TrainTrace]:
    trace = TrainTrace()
    for epoch in range(1, cfg.epochs + 1):
        robust_active = robust_batch is not None and epoch > cfg.delay
        sums = {"std": 0.0, "robust": 0.0, "combined": 0.0}
        nb = 0
        shuffle = derive_seed(cfg.seed, "order", epoch)
        for step, (xb, yb, idx) in enumerate(batches(split, cfg.batch_size, shuffle)):
            loss_s, grads_s, _ = model.loss_and_grads(xb, yb)
            if robust_active:
                xr = robust_batch(model, xb, yb, idx, epoch, step)
                loss_r, grads_r, _ = model.loss_and_grads(xr, yb)
                loss = (loss_s + loss_r) / 2.0
                grads = _combine(grads_s, grads_r)
                sums["robust"] += loss_r
            else:
                loss, grads = loss_s, grads_s
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            sums["std"] += loss_s
            sums["combined"] += loss
            nb += 1
            model = sgd_step(model, grads, cfg.lr)
        trace.rows.append(EpochStats(
            epoch=epoch,
            loss_std=sums["std"] / nb,
            loss_robust=(sums["robust"] / nb) if robust_active else None,
            loss_combined=sums["combined"] / nb,
            train_acc=model.accuracy(split.images, split.labels),
            val_acc=(model.accuracy(val_split.images, val_split.labels)
                     if val_split is not None else None),
        ))
    return model, trace


def train_standard(model, split, cfg: TrainConfig, val_split=None):
    """Plain cross-entropy SGD."""
    if cfg.mode != "standard":
        raise ValueError(f"expected standard mode, got {cfg.mode!r}")
    return _run(model, split, cfg, val_split, None)


def train_adversarial(model, split, cfg: TrainConfig, val_split=None):
    """After the delay: each minibatch also contributes the loss on
    random-start attack examples regenerated against the current weights."""
    if cfg.mode != "adversarial":
        raise ValueError(f"expected adversarial mode, got {cfg.mode!r}")
    attack = replace(cfg.attack, random_start=True)

    def robust(current, xb, yb, idx, epoch, step):
        return pgd(current, xb, yb, attack,
                   seed=derive_seed(cfg.seed, "attack", epoch, step))

    return _run(model, split, cfg, val_split, robust)


def train_natural(model, split, cfg: TrainConfig, val_split=None):
    """After the delay: each minibatch also contributes the loss on freshly
    perturbed copies; draws are per example and redrawn every epoch."""
    if cfg.mode != "natural":
        raise ValueError(f"expected natural mode, got {cfg.mode!r}")

    def robust(current, xb, yb, idx, epoch, step):
        epoch_spec = cfg.spec.reseeded(derive_seed(cfg.spec.seed, "train", epoch))
        return perturb_batch(xb, epoch_spec, idx)

    return _run(model, split, cfg, val_split, robust)


def train(model, split, cfg: TrainConfig, val_split=None):
    """Dispatch on cfg.mode."""
    fn = {"standard": train_standard, "adversarial": train_adversarial,
          "natural": train_natural}[cfg.mode]
    return fn(model, split, cfg, val_split)
