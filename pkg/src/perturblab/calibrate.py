"""Standardize every perturbation to the same accuracy drop.

Fair comparison across perturbation styles requires each one to cost the
classifier the same number of points. Each natural kind exposes a single
intensity in [0, 1] with a monotone effect by construction, and the attack
exposes its budget, so a bisection on the measured drop finds the matching
setting. Measurement draws are seeded per example, which makes the drop a
deterministic function of intensity and the bisection bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, bim
from .perturb import PerturbationSpec, perturb_batch, validate_kind
from .rng import derive_seed

ADVERSARIAL = "adversarial"


class CalibrationError(RuntimeError):
    """Unreachable target or invalid search bracket."""


@dataclass(frozen=True)
class CalibrationTarget:
    """Accuracy drop to standardize on, and how precisely to hit it."""

    alpha: float = 0.10
    tolerance: float = 0.01
    max_iterations: int = 20

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class CalibrationResult:
    """Outcome of one calibration search."""

    kind: str                      # a natural kind, or "adversarial"
    intensity: float               # calibrated intensity, or epsilon for attacks
    measured_drop: float
    iterations: int
    converged: bool
    params: dict = field(default_factory=dict)   # resolved operator params
    steps: int | None = None                     # attack steps, if adversarial
    trace: list = field(default_factory=list)    # [(intensity, drop), ...]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "intensity": self.intensity,
            "measured_drop": self.measured_drop,
            "iterations": self.iterations,
            "converged": self.converged,
            "params": dict(self.params),
            "steps": self.steps,
            "trace": [list(t) for t in self.trace],
        }

    @classmethod
    def from_json(cls, d: dict) -> "CalibrationResult":
        return cls(d["kind"], float(d["intensity"]), float(d["measured_drop"]),
                   int(d["iterations"]), bool(d["converged"]),
                   dict(d.get("params", {})), d.get("steps"),
                   [tuple(t) for t in d.get("trace", [])])


def eval_spec(kind: str, intensity: float, seed: int, endpoints=None) -> PerturbationSpec:
    """The spec used for measurement-time draws.

    The seed stream is labelled "test" so it can never collide with the
    "train"-labelled streams that robust training consumes.
    """
    return PerturbationSpec.create(kind, intensity,
                                   seed=derive_seed(seed, "test", kind),
                                   endpoints=endpoints)


def spec_accuracy(model, split, spec: PerturbationSpec,
                  batch_size: int = 256) -> float:
    """Accuracy on the split after perturbing every image (one draw each,
    keyed by the example's position in the split)."""
    hits = 0
    for lo in range(0, len(split), batch_size):
        xb = split.images[lo:lo + batch_size]
        yb = split.labels[lo:lo + batch_size]
        xp = perturb_batch(xb, spec, np.arange(lo, lo + len(xb)))
        hits += int((model.predict(xp) == yb).sum())
    return hits / len(split)


def natural_accuracy(model, split, kind: str, intensity: float, seed: int,
                     endpoints=None, batch_size: int = 256) -> float:
    """Accuracy on the split under ``kind`` at the given intensity."""
    return spec_accuracy(model, split, eval_spec(kind, intensity, seed, endpoints),
                         batch_size=batch_size)


def adversarial_accuracy(model, split, cfg: AttackConfig,
                         batch_size: int = 256) -> float:
    """Accuracy on the split after a BIM attack on every image."""
    hits = 0
    for lo in range(0, len(split), batch_size):
        xb = split.images[lo:lo + batch_size]
        yb = split.labels[lo:lo + batch_size]
        adv = bim(model, xb, yb, cfg)
        hits += int((model.predict(adv) == yb).sum())
    return hits / len(split)


def bisect_drop(drop_fn, target: CalibrationTarget, hi: float = 1.0):
    """Bisection on a monotone drop curve over [0, hi].

    ``drop_fn(x)`` must be the measured accuracy drop at setting ``x`` with
    drop_fn(0) == 0. Returns (x, drop, iterations, converged, trace). The
    bracket invariant drop(lo) <= alpha <= drop(hi) holds at every step;
    if the iteration cap is hit, the best point seen is returned with
    converged=False.
    """
    alpha, tol = target.alpha, target.tolerance
    if alpha == 0.0:
        return 0.0, 0.0, 0, True, [(0.0, 0.0)]
    d_hi = drop_fn(hi)
    trace = [(hi, d_hi)]
    if d_hi < alpha:
        raise CalibrationError(
            f"drop at maximum setting {hi} is {d_hi:.4f} < target {alpha:.4f}; "
            "raise the endpoint constants for this perturbation"
        )
    if abs(d_hi - alpha) <= tol:
        return hi, d_hi, 1, True, trace
    lo, cur_hi = 0.0, hi
    for it in range(1, target.max_iterations + 1):
        mid = 0.5 * (lo + cur_hi)
        d = drop_fn(mid)
        trace.append((mid, d))
        if abs(d - alpha) <= tol:
            return mid, d, it, True, trace
        if d < alpha:
            lo = mid
        else:
            cur_hi = mid
    best_x, best_d = min(trace, key=lambda t: abs(t[1] - alpha))
    return best_x, best_d, target.max_iterations, False, trace


def _check_reachable(model, split, target: CalibrationTarget):
    clean = model.accuracy(split.images, split.labels)
    chance = 1.0 / split.classes
    if target.alpha > 0 and clean - chance <= target.alpha:
        raise CalibrationError(
            f"target drop {target.alpha:.3f} unreachable: clean accuracy "
            f"{clean:.3f} is within {target.alpha:.3f} of chance {chance:.3f}"
        )
    return clean


def calibrate_natural(model, split, kind: str, target: CalibrationTarget,
                      seed: int, endpoints=None) -> CalibrationResult:
    """Find the intensity at which ``kind`` costs the model ``alpha`` points."""
    validate_kind(kind)
    clean = _check_reachable(model, split, target)
    cache = {}

    def drop(s):
        if s not in cache:
            cache[s] = clean - natural_accuracy(model, split, kind, s, seed, endpoints)
        return cache[s]

    x, d, iters, converged, trace = bisect_drop(drop, target)
    spec = eval_spec(kind, x, seed, endpoints)
    return CalibrationResult(kind, x, d, iters, converged,
                             params=dict(spec.params), trace=trace)


def calibrate_adversarial(model, split, target: CalibrationTarget, seed: int,
                          steps: int = 10, eps_max: float = 0.1) -> CalibrationResult:
    """Find the attack budget epsilon that costs the model ``alpha`` points."""
    del seed  # the evaluation attack is deterministic; kept for symmetry
    clean = _check_reachable(model, split, target)
    cache = {}

    def drop(eps):
        if eps not in cache:
            cfg = AttackConfig(epsilon=eps, steps=steps)
            cache[eps] = clean - adversarial_accuracy(model, split, cfg)
        return cache[eps]

    x, d, iters, converged, trace = bisect_drop(drop, target, hi=eps_max)
    return CalibrationResult(ADVERSARIAL, x, d, iters, converged,
                             steps=steps, trace=trace)


@dataclass
class VerificationEntry:
    kind: str
    drop: float
    within_tolerance: bool


@dataclass
class VerificationReport:
    """Per-perturbation drops after calibration, with spread statistics."""

    target: CalibrationTarget
    entries: list
    mean_drop: float
    std_drop: float
    passed: bool
    failures: list

    def summary_lines(self):
        lines = [f"{e.kind:>16s}  drop={e.drop:.4f}  "
                 f"{'ok' if e.within_tolerance else 'OUT OF TOLERANCE'}"
                 for e in self.entries]
        lines.append(f"{'mean':>16s}  drop={self.mean_drop:.4f}  std={self.std_drop:.4f}")
        lines.append(f"verdict: {'pass' if self.passed else 'fail'}"
                     + (f" ({', '.join(self.failures)})" if self.failures else ""))
        return lines


def build_verification_report(drops: dict, target: CalibrationTarget) -> VerificationReport:
    """Assemble the pass/fail report from measured per-perturbation drops."""
    entries = [VerificationEntry(k, d, abs(d - target.alpha) <= target.tolerance)
               for k, d in drops.items()]
    values = np.array([e.drop for e in entries])
    failures = [e.kind for e in entries if not e.within_tolerance]
    return VerificationReport(target, entries, float(values.mean()),
                              float(values.std()), not failures, failures)


def verify_calibration(model, split, results, target: CalibrationTarget,
                       seed: int, endpoints=None) -> VerificationReport:
    """Re-measure every calibrated perturbation on ``split`` and report.

    Failures are reported, never raised.
    """
    drops = {}
    clean = model.accuracy(split.images, split.labels)
    for res in results:
        if res.kind == ADVERSARIAL:
            cfg = AttackConfig(epsilon=res.intensity, steps=res.steps or 10)
            acc = adversarial_accuracy(model, split, cfg)
            label = f"{ADVERSARIAL}_k{res.steps or 10}"
        else:
            acc = natural_accuracy(model, split, res.kind, res.intensity,
                                   seed, endpoints)
            label = res.kind
        drops[label] = clean - acc
    return build_verification_report(drops, target)
