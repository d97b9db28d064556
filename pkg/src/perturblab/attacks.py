"""l-infinity bounded iterative gradient attacks.

``bim`` is the plain iterated sign-gradient ascent used for evaluation;
``pgd`` adds a uniform random start inside the budget ball and is what the
adversarial training regime uses. Both project onto the epsilon ball and
re-clip to [0, 1] after every step, so the budget holds exactly at all
times. Attacks maximize the training cross-entropy on the true labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import derive_seed, rng_for


class AttackError(RuntimeError):
    """Raised when an attack cannot proceed (e.g. non-finite gradients)."""


@dataclass(frozen=True)
class AttackConfig:
    """Budget and schedule for an l-infinity attack.

    ``step_size`` defaults to ``2.5 * epsilon / steps`` when unset, the
    usual choice that lets the iterate traverse the ball and back.
    """

    epsilon: float
    steps: int = 10
    step_size: float | None = None
    random_start: bool = False
    norm: str = "linf"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size is not None and self.step_size <= 0 and self.steps > 0:
            raise ValueError("step_size must be > 0")
        if self.norm != "linf":
            raise ValueError(f"only the linf norm is supported, got {self.norm!r}")

    @property
    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.steps == 0:
            return 0.0
        return 2.5 * self.epsilon / self.steps

    def to_json(self) -> dict:
        return {"epsilon": self.epsilon, "steps": self.steps,
                "step_size": self.step_size, "random_start": self.random_start,
                "norm": self.norm}

    @classmethod
    def from_json(cls, d: dict) -> "AttackConfig":
        return cls(float(d["epsilon"]), int(d.get("steps", 10)),
                   d.get("step_size"), bool(d.get("random_start", False)),
                   d.get("norm", "linf"))


def _ascend(model, clean: np.ndarray, start: np.ndarray, labels,
            cfg: AttackConfig) -> np.ndarray:
    x = start
    step = cfg.resolved_step_size
    for _ in range(cfg.steps):
        _, _, grad = model.loss_and_grads(x, labels)
        if not np.all(np.isfinite(grad)):
            raise AttackError("non-finite input gradient during attack")
        x = x + step * np.sign(grad)
        x = np.clip(x, clean - cfg.epsilon, clean + cfg.epsilon)
        x = np.clip(x, 0.0, 1.0)
    return x


def bim(model, batch, labels, cfg: AttackConfig) -> np.ndarray:
    """Iterated sign-gradient ascent from the clean input.

    Exactly ``cfg.steps`` gradient steps; after each one the iterate is
    projected back into the epsilon ball around the input and into [0, 1].
    A zero budget returns the input unchanged.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if cfg.epsilon == 0 or cfg.steps == 0:
        return batch.copy()
    return _ascend(model, batch, batch.copy(), labels, cfg)


def pgd(model, batch, labels, cfg: AttackConfig, seed: int) -> np.ndarray:
    """BIM from a uniform random point inside the epsilon ball.

    Deterministic given (model, batch, labels, cfg, seed).
    """
    batch = np.asarray(batch, dtype=np.float64)
    if cfg.epsilon == 0 or cfg.steps == 0:
        return batch.copy()
    rng = rng_for(seed, "pgd-init")
    start = batch + rng.uniform(-cfg.epsilon, cfg.epsilon, size=batch.shape)
    start = np.clip(start, 0.0, 1.0)
    return _ascend(model, batch, start, labels, cfg)


def attack_batch(model, batch, labels, cfg: AttackConfig, seed=None) -> np.ndarray:
    """Dispatch to pgd when the config asks for a random start, else bim."""
    if cfg.random_start:
        if seed is None:
            raise ValueError("random-start attacks need a seed")
        return pgd(model, batch, labels, cfg, seed)
    return bim(model, batch, labels, cfg)


def attack_drop(model, split, cfg: AttackConfig, seed=None,
                batch_size: int = 256) -> float:
    """Accuracy lost to the attack over a split: clean minus attacked."""
    if len(split) == 0:
        raise ValueError("cannot measure attack drop on an empty split")
    clean_hits = 0
    adv_hits = 0
    for lo in range(0, len(split), batch_size):
        xb = split.images[lo:lo + batch_size]
        yb = split.labels[lo:lo + batch_size]
        clean_hits += int((model.predict(xb) == yb).sum())
        adv = attack_batch(model, xb, yb, cfg,
                           seed=None if seed is None else derive_seed(seed, "chunk", lo))
        adv_hits += int((model.predict(adv) == yb).sum())
    n = len(split)
    return clean_hits / n - adv_hits / n
