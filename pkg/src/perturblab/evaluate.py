"""Accuracy-drop metric, the train-regime x test-mode matrix, and outputs.

A cell of the matrix is one model evaluated under one test mode. The drop
metric is the mean per-example indicator difference between perturbed and
clean correctness, which equals the plain accuracy difference. Cells are
cached by a content hash of everything that determines them, so interrupted
matrix runs resume instead of retraining.

Regime names: "standard", "adv_k<K>", "nat_<kind>".
Test modes:   "clean", "adv_k<K>", "<kind>".
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import charts
from .attacks import AttackConfig
from .calibrate import (ADVERSARIAL, CalibrationResult, CalibrationTarget,
                        adversarial_accuracy, calibrate_adversarial,
                        calibrate_natural, spec_accuracy)
from .data import DatasetBundle
from .nn import Architecture, ModelState, init_model, load_model, save_model
from .perturb import KINDS, PerturbationSpec
from .rng import derive_seed
from .training import EpochStats, TrainConfig, TrainTrace, train

DEFAULT_REGIMES = ("standard", "adv_k10") + tuple(f"nat_{k}" for k in KINDS)
DEFAULT_MODES = ("clean", "adv_k10") + KINDS

_ADV_RE = re.compile(r"^adv_k(\d+)$")


class MissingCalibration(KeyError):
    """A non-clean test mode was requested without a calibrated setting."""


def mode_requirement(mode: str):
    """What a mode needs: ("adv", K), ("natural", kind), or None for clean."""
    if mode == "clean":
        return None
    m = _ADV_RE.match(mode)
    if m:
        return ("adv", int(m.group(1)))
    if mode in KINDS:
        return ("natural", mode)
    raise ValueError(f"unknown test mode {mode!r}")


def regime_requirement(regime: str):
    if regime == "standard":
        return None
    m = _ADV_RE.match(regime)
    if m:
        return ("adv", int(m.group(1)))
    if regime.startswith("nat_") and regime[4:] in KINDS:
        return ("natural", regime[4:])
    raise ValueError(f"unknown regime {regime!r}")


@dataclass
class EvalRecord:
    """One matrix cell for one seed."""

    train_mode: str
    test_mode: str
    clean_acc: float
    pert_acc: float
    delta: float
    n: int
    seed: int

    def to_json(self) -> dict:
        return dict(train_mode=self.train_mode, test_mode=self.test_mode,
                    clean_acc=self.clean_acc, pert_acc=self.pert_acc,
                    delta=self.delta, n=self.n, seed=self.seed)

    @classmethod
    def from_json(cls, d: dict) -> "EvalRecord":
        return cls(d["train_mode"], d["test_mode"], float(d["clean_acc"]),
                   float(d["pert_acc"]), float(d["delta"]), int(d["n"]),
                   int(d["seed"]))


def delta_from_indicators(clean_correct, pert_correct) -> float:
    """Mean per-example indicator difference; equals the accuracy delta."""
    clean_correct = np.asarray(clean_correct, dtype=np.float64)
    pert_correct = np.asarray(pert_correct, dtype=np.float64)
    if clean_correct.shape != pert_correct.shape:
        raise ValueError("indicator arrays must align")
    return float((pert_correct - clean_correct).mean())


def delta_accuracy(model: ModelState, split, mode: str, calib: dict,
                   seed: int, train_mode: str = "?") -> EvalRecord:
    """Evaluate one cell; perturbation draws are seeded by example index
    from a test-labelled stream disjoint from all training streams."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    clean_acc = model.accuracy(split.images, split.labels)
    req = mode_requirement(mode)
    if req is None:
        pert_acc = clean_acc
    else:
        if mode not in calib:
            raise MissingCalibration(f"no calibrated setting for mode {mode!r}")
        res = calib[mode]
        if req[0] == "adv":
            cfg = AttackConfig(epsilon=res.intensity, steps=req[1])
            pert_acc = adversarial_accuracy(model, split, cfg)
        else:
            spec = PerturbationSpec(res.kind, res.intensity,
                                    derive_seed(seed, "test", res.kind),
                                    dict(res.params))
            pert_acc = spec_accuracy(model, split, spec)
    return EvalRecord(train_mode, mode, clean_acc, pert_acc,
                      pert_acc - clean_acc, len(split), seed)


# ---------------------------------------------------------------------------
# Matrix report
# ---------------------------------------------------------------------------

@dataclass
class MatrixReport:
    regimes: list
    modes: list
    seeds: list
    cells: dict = field(default_factory=dict)          # (regime, mode) -> dict
    calibrations: dict = field(default_factory=dict)   # seed -> label -> result
    baselines: dict = field(default_factory=dict)      # seed -> std clean acc
    traces: dict = field(default_factory=dict)         # (regime, seed) -> TrainTrace
    config: dict = field(default_factory=dict)
    dataset_hash: str = ""
    normalized: bool = False

    def cell(self, regime, mode) -> dict:
        return self.cells.setdefault((regime, mode), {"records": [], "errors": []})

    def records(self, regime, mode):
        return self.cell(regime, mode)["records"]

    def aggregate(self, regime, mode) -> dict:
        """Seed-mean and std for one cell; empty cells give NaNs."""
        recs = self.records(regime, mode)
        if not recs:
            nan = float("nan")
            return dict(clean_mean=nan, clean_std=nan, pert_mean=nan,
                        pert_std=nan, delta_mean=nan, delta_std=nan,
                        norm_mean=nan, n=0, count=0)
        clean = np.array([r.clean_acc for r in recs])
        pert = np.array([r.pert_acc for r in recs])
        delta = np.array([r.delta for r in recs])
        norm = np.array([r.pert_acc - self.baselines.get(r.seed, 0.0) for r in recs])
        return dict(
            clean_mean=float(clean.mean()), clean_std=float(clean.std()),
            pert_mean=float(pert.mean()), pert_std=float(pert.std()),
            delta_mean=float(delta.mean()), delta_std=float(delta.std()),
            norm_mean=float(norm.mean()), n=recs[0].n, count=len(recs),
        )

    def cell_id(self, regime, mode) -> str:
        payload = json.dumps({"dataset": self.dataset_hash, "regime": regime,
                              "mode": mode, "seeds": self.seeds,
                              "config": self.config}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def normalize_report(report: MatrixReport) -> MatrixReport:
    """A view of the report with accuracies re-expressed relative to the
    standard model's clean accuracy (per seed). Raw records are retained,
    so denormalizing is exact."""
    out = MatrixReport(report.regimes, report.modes, report.seeds,
                       report.cells, report.calibrations, report.baselines,
                       report.traces, report.config, report.dataset_hash,
                       normalized=True)
    return out


def denormalize_report(report: MatrixReport) -> MatrixReport:
    out = MatrixReport(report.regimes, report.modes, report.seeds,
                       report.cells, report.calibrations, report.baselines,
                       report.traces, report.config, report.dataset_hash,
                       normalized=False)
    return out


def normalized_accuracy(report: MatrixReport, regime: str, mode: str, seed: int) -> float:
    """Cell accuracy minus that seed's standard clean accuracy."""
    for r in report.records(regime, mode):
        if r.seed == seed:
            return r.pert_acc - report.baselines[seed]
    raise KeyError(f"no record for ({regime}, {mode}, seed {seed})")


# ---------------------------------------------------------------------------
# Matrix runner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatrixSettings:
    """Training and calibration knobs shared by every matrix cell."""

    epochs: int = 10
    lr: float = 0.08
    batch_size: int = 64
    delay: int = 1
    eps_max: float = 0.1
    alpha: float = 0.10
    tolerance: float = 0.01
    max_iterations: int = 20
    conv1: int = 16
    conv2: int = 32
    endpoints: dict | None = None

    def target(self) -> CalibrationTarget:
        return CalibrationTarget(self.alpha, self.tolerance, self.max_iterations)

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "epochs", "lr", "batch_size", "delay", "eps_max", "alpha",
            "tolerance", "max_iterations", "conv1", "conv2")}
        d["endpoints"] = dict(self.endpoints) if self.endpoints else None
        return d


class _Cache:
    def __init__(self, root):
        self.root = Path(root) if root else None
        if self.root:
            (self.root / "models").mkdir(parents=True, exist_ok=True)
            (self.root / "cells").mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(payload: dict) -> str:
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def load_model(self, key):
        if not self.root:
            return None
        path = self.root / "models" / f"{key}.ckpt"
        if not path.exists():
            return None
        model = load_model(path)
        trace = TrainTrace()
        tpath = self.root / "models" / f"{key}.trace.json"
        if tpath.exists():
            for row in json.loads(tpath.read_text()):
                trace.rows.append(EpochStats(**row))
        return model, trace

    def store_model(self, key, model, trace):
        if not self.root:
            return
        save_model(model, self.root / "models" / f"{key}.ckpt")
        rows = [vars(r) for r in trace.rows]
        (self.root / "models" / f"{key}.trace.json").write_text(json.dumps(rows))

    def load_cell(self, key):
        if not self.root:
            return None
        path = self.root / "cells" / f"{key}.json"
        if not path.exists():
            return None
        return EvalRecord.from_json(json.loads(path.read_text()))

    def store_cell(self, key, record):
        if not self.root:
            return
        (self.root / "cells" / f"{key}.json").write_text(json.dumps(record.to_json()))


def _calibration_labels(regimes, modes):
    """Union of calibrated settings the matrix needs, as mode-style labels."""
    labels = []
    for name, req in [(r, regime_requirement(r)) for r in regimes] + \
                     [(m, mode_requirement(m)) for m in modes]:
        del name
        if req is None:
            continue
        label = f"adv_k{req[1]}" if req[0] == "adv" else req[1]
        if label not in labels:
            labels.append(label)
    return labels


def run_matrix(bundle: DatasetBundle, regimes=DEFAULT_REGIMES,
               modes=DEFAULT_MODES, seeds=(0, 1, 2),
               settings: MatrixSettings = MatrixSettings(),
               cache_dir=None, log=None) -> MatrixReport:
    """Train every regime per seed, calibrate on the validation split, and
    evaluate every (regime, mode) cell on the test split.

    Per-cell failures are recorded in the report instead of aborting the
    run. Models and cells are cached under ``cache_dir`` when given.
    """
    log = log or (lambda msg: None)
    regimes, modes, seeds = list(regimes), list(modes), list(seeds)
    for r in regimes:
        regime_requirement(r)
    for m in modes:
        mode_requirement(m)
    target = settings.target()
    cache = _Cache(cache_dir)
    h, w, c = bundle.train.image_shape
    arch = Architecture(h, w, c, bundle.classes, settings.conv1, settings.conv2)
    report = MatrixReport(regimes, modes, seeds, config=settings.to_json(),
                          dataset_hash=bundle.content_hash())

    for seed in seeds:
        init = init_model(arch, derive_seed(seed, "init"))
        base_cfg = dict(epochs=settings.epochs, lr=settings.lr,
                        batch_size=settings.batch_size,
                        seed=derive_seed(seed, "train"), delay=settings.delay)

        def fit(regime, cfg):
            key = _Cache.key({"dataset": report.dataset_hash, "regime": regime,
                              "seed": seed, "cfg": _cfg_fingerprint(cfg)})
            hit = cache.load_model(key)
            if hit:
                log(f"seed {seed}: {regime} (cached)")
                return hit
            log(f"seed {seed}: training {regime}")
            model, trace = train(init, bundle.train, cfg, bundle.val)
            cache.store_model(key, model, trace)
            return model, trace

        std_cfg = TrainConfig(mode="standard", **base_cfg)
        std_model, std_trace = fit("standard", std_cfg)
        report.traces[("standard", seed)] = std_trace
        report.baselines[seed] = std_model.accuracy(bundle.test.images,
                                                    bundle.test.labels)

        calib = {}
        cal_errors = {}
        for label in _calibration_labels(regimes, modes):
            try:
                m = _ADV_RE.match(label)
                if m:
                    res = calibrate_adversarial(std_model, bundle.val, target,
                                                seed, steps=int(m.group(1)),
                                                eps_max=settings.eps_max)
                else:
                    res = calibrate_natural(std_model, bundle.val, label,
                                            target, seed,
                                            endpoints=settings.endpoints)
                calib[label] = res
                log(f"seed {seed}: calibrated {label} -> {res.intensity:.5f} "
                    f"(drop {res.measured_drop:.4f}, converged={res.converged})")
            except Exception as exc:  # recorded per cell below
                cal_errors[label] = f"calibration failed: {exc}"
                log(f"seed {seed}: calibration {label} FAILED: {exc}")
        report.calibrations[seed] = calib

        models = {}
        for regime in regimes:
            req = regime_requirement(regime)
            try:
                if req is None:
                    models[regime] = std_model
                    continue
                label = f"adv_k{req[1]}" if req[0] == "adv" else req[1]
                if label in cal_errors:
                    raise RuntimeError(cal_errors[label])
                res = calib[label]
                if req[0] == "adv":
                    cfg = TrainConfig(mode="adversarial", **base_cfg,
                                      attack=AttackConfig(epsilon=res.intensity,
                                                          steps=req[1]))
                else:
                    spec = PerturbationSpec(res.kind, res.intensity,
                                            derive_seed(seed, "nat-train", res.kind),
                                            dict(res.params))
                    cfg = TrainConfig(mode="natural", **base_cfg, spec=spec)
                model, trace = fit(regime, cfg)
                models[regime] = model
                report.traces[(regime, seed)] = trace
            except Exception as exc:
                for mode in modes:
                    report.cell(regime, mode)["errors"].append(
                        f"seed {seed}: {exc}")

        for regime in regimes:
            if regime not in models:
                continue
            for mode in modes:
                cell = report.cell(regime, mode)
                req = mode_requirement(mode)
                label = None
                if req is not None:
                    label = f"adv_k{req[1]}" if req[0] == "adv" else req[1]
                    if label in cal_errors:
                        cell["errors"].append(f"seed {seed}: {cal_errors[label]}")
                        continue
                key = _Cache.key({
                    "dataset": report.dataset_hash, "regime": regime,
                    "mode": mode, "seed": seed, "config": settings.to_json(),
                    "calib": calib[label].to_json() if label else None,
                })
                hit = cache.load_cell(key)
                if hit is not None:
                    cell["records"].append(hit)
                    continue
                try:
                    rec = delta_accuracy(models[regime], bundle.test, mode,
                                         calib, seed, train_mode=regime)
                    cache.store_cell(key, rec)
                    cell["records"].append(rec)
                except Exception as exc:
                    cell["errors"].append(f"seed {seed}: {exc}")
        log(f"seed {seed}: done")
    return report


def _cfg_fingerprint(cfg: TrainConfig) -> dict:
    d = {"mode": cfg.mode, "epochs": cfg.epochs, "lr": cfg.lr,
         "batch_size": cfg.batch_size, "seed": cfg.seed, "delay": cfg.delay}
    if cfg.attack is not None:
        d["attack"] = cfg.attack.to_json()
    if cfg.spec is not None:
        d["spec"] = cfg.spec.to_json()
    return d


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------

MATRIX_HEADER = ["regime", "test_mode", "cell_id", "n_seeds", "n_examples",
                 "clean_acc_mean", "clean_acc_std", "pert_acc_mean",
                 "pert_acc_std", "delta_mean", "delta_std",
                 "normalized_mean", "errors"]


def matrix_rows(report: MatrixReport):
    rows = []
    for regime in report.regimes:
        for mode in report.modes:
            agg = report.aggregate(regime, mode)
            errors = ";".join(report.cell(regime, mode)["errors"])
            rows.append([regime, mode, report.cell_id(regime, mode),
                         agg["count"], agg["n"],
                         repr(agg["clean_mean"]), repr(agg["clean_std"]),
                         repr(agg["pert_mean"]), repr(agg["pert_std"]),
                         repr(agg["delta_mean"]), repr(agg["delta_std"]),
                         repr(agg["norm_mean"]), errors])
    return rows


def write_matrix_csv(report: MatrixReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MATRIX_HEADER)
        w.writerows(matrix_rows(report))


def parse_matrix_csv(path):
    """Read matrix.csv back into the row structure ``matrix_rows`` emits."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != MATRIX_HEADER:
            raise ValueError(f"unexpected matrix header: {header}")
        return [row for row in reader]


def write_calibration_csv(report: MatrixReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "label", "kind", "steps", "intensity",
                    "measured_drop", "iterations", "converged"])
        for seed in report.seeds:
            for label, res in sorted(report.calibrations.get(seed, {}).items()):
                w.writerow([seed, label, res.kind,
                            "" if res.steps is None else res.steps,
                            repr(res.intensity), repr(res.measured_drop),
                            res.iterations, res.converged])


def emit_outputs(report: MatrixReport, out_dir, extra_manifest=None):
    """Write matrix.csv, calibration.csv, per-regime traces, SVG figures and
    the run manifest. Returns the list of written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "figures").mkdir(exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create output directory {out}: {exc}") from exc
    written = []

    def emit(path, writer):
        writer(path)
        written.append(path)

    emit(out / "matrix.csv", lambda p: write_matrix_csv(report, p))
    emit(out / "calibration.csv", lambda p: write_calibration_csv(report, p))
    for regime in report.regimes:
        rows_by_seed = [(s, report.traces[(regime, s)]) for s in report.seeds
                        if (regime, s) in report.traces]
        if not rows_by_seed:
            continue
        path = out / f"trace_{regime}.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["seed", "epoch", "loss_std", "loss_robust",
                        "loss_combined", "train_acc", "val_acc"])
            for s, trace in rows_by_seed:
                for r in trace.rows:
                    w.writerow([s, r.epoch, repr(r.loss_std),
                                "" if r.loss_robust is None else repr(r.loss_robust),
                                repr(r.loss_combined), repr(r.train_acc),
                                "" if r.val_acc is None else repr(r.val_acc)])
        written.append(path)

    series = {}
    for regime in report.regimes:
        vals = []
        for mode in report.modes:
            agg = report.aggregate(regime, mode)
            vals.append(agg["norm_mean"] if agg["count"] else None)
        series[regime] = vals
    fig = out / "figures" / "normalized_accuracy.svg"
    fig.write_text(charts.line_chart(
        list(report.modes), series,
        title="Normalized accuracy by test mode",
        y_label="accuracy - standard clean"))
    written.append(fig)
    for regime in report.regimes:
        fig = out / "figures" / f"regime_{regime}.svg"
        fig.write_text(charts.line_chart(
            list(report.modes), {regime: series[regime]},
            title=f"Regime {regime}", y_label="accuracy - standard clean"))
        written.append(fig)

    manifest = {
        "dataset_hash": report.dataset_hash,
        "config": report.config,
        "regimes": report.regimes,
        "modes": report.modes,
        "seeds": report.seeds,
        "baselines": {str(k): v for k, v in sorted(report.baselines.items())},
        "calibrations": {
            str(seed): {label: res.to_json() for label, res in sorted(c.items())}
            for seed, c in sorted(report.calibrations.items())
        },
        "cells": {
            f"{regime}|{mode}": {
                "cell_id": report.cell_id(regime, mode),
                "records": [r.to_json() for r in report.records(regime, mode)],
                "errors": report.cell(regime, mode)["errors"],
            }
            for regime in report.regimes for mode in report.modes
        },
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    manifest["outputs"] = {
        str(p.relative_to(out)): hashlib.sha256(Path(p).read_bytes()).hexdigest()
        for p in written
    }
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    written.append(mpath)
    return written
