"""Command-line front door.

Subcommands: perturb, attack, calibrate, train, evaluate, matrix. Global
flags --seed, --config and --out apply to every subcommand; --config points
at a JSON file whose keys (see README) provide defaults for any flag not
given explicitly. Without --dataset every command falls back to the
built-in synthetic blobs manifest, so the whole pipeline runs without any
downloaded data.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig, attack_batch
from .calibrate import (ADVERSARIAL, CalibrationTarget, calibrate_adversarial,
                        calibrate_natural, verify_calibration)
from .data import load_dataset, save_image
from .evaluate import (DEFAULT_MODES, DEFAULT_REGIMES, MatrixSettings,
                       delta_accuracy, emit_outputs, mode_requirement,
                       run_matrix)
from .nn import Architecture, init_model, load_model, save_model
from .perturb import KINDS, PerturbationSpec, perturb
from .rng import derive_seed
from .training import TrainConfig, train

DEFAULT_DATASET = {"format": "blobs"}


def _load_config(path):
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


def _resolve_dataset(args, cfg):
    manifest = args.dataset or cfg.get("dataset") or DEFAULT_DATASET
    return load_dataset(manifest)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _settings_from(cfg: dict, args=None) -> MatrixSettings:
    s = dict(cfg.get("settings", {}))
    if args is not None:
        for key in ("epochs", "lr", "batch_size", "delay", "alpha", "tolerance"):
            val = getattr(args, key, None)
            if val is not None:
                s[key] = val
    if s.get("endpoints") is None:
        s.pop("endpoints", None)
    return MatrixSettings(**s)


def cmd_perturb(args, cfg):
    bundle = _resolve_dataset(args, cfg)
    split = getattr(bundle, args.split)
    out = _out_dir(args)
    spec = PerturbationSpec.create(args.kind, args.intensity,
                                   seed=derive_seed(args.seed, "cli-perturb"))
    count = min(args.count, len(split))
    records = []
    for i in range(count):
        image, label = split.example(i)
        result = perturb(image, spec, i)
        orig = out / f"orig_{i:04d}.{args.format}"
        pert = out / f"pert_{i:04d}.{args.format}"
        save_image(orig, image)
        save_image(pert, result)
        records.append({"index": i, "label": label,
                        "original": orig.name, "perturbed": pert.name,
                        "l1_mean": float(np.abs(result - image).mean())})
    manifest = {"tool": "perturb", "version": __version__,
                "spec": spec.to_json(), "split": split.name,
                "images": records}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {count} image pairs and manifest.json to {out}")
    return 0


def cmd_attack(args, cfg):
    bundle = _resolve_dataset(args, cfg)
    split = getattr(bundle, args.split)
    model = load_model(args.checkpoint)
    out = _out_dir(args)
    attack = AttackConfig(epsilon=args.eps, steps=args.steps,
                          random_start=args.pgd)
    count = min(args.count, len(split))
    images = split.images[:count]
    labels = split.labels[:count]
    adv = attack_batch(model, images, labels, attack,
                       seed=derive_seed(args.seed, "cli-attack"))
    clean_pred = model.predict(images)
    adv_pred = model.predict(adv)
    csv_path = out / "attack.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "label", "clean_pred", "adv_pred", "linf_distance"])
        for i in range(count):
            linf = float(np.abs(adv[i] - images[i]).max())
            w.writerow([i, int(labels[i]), int(clean_pred[i]),
                        int(adv_pred[i]), repr(linf)])
            save_image(out / f"adv_{i:04d}.{args.format}", adv[i])
    manifest = {"tool": "attack", "version": __version__,
                "attack": attack.to_json(), "split": split.name,
                "count": count,
                "clean_acc": float((clean_pred == labels).mean()),
                "adv_acc": float((adv_pred == labels).mean())}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"attacked {count} images: clean acc {manifest['clean_acc']:.4f} "
          f"-> adv acc {manifest['adv_acc']:.4f}; outputs in {out}")
    return 0


def cmd_calibrate(args, cfg):
    bundle = _resolve_dataset(args, cfg)
    model = load_model(args.checkpoint)
    out = _out_dir(args)
    target = CalibrationTarget(args.alpha, args.tolerance)
    kinds = list(KINDS) + [ADVERSARIAL] if args.kind == "all" else [args.kind]
    results = []
    for kind in kinds:
        if kind == ADVERSARIAL:
            res = calibrate_adversarial(model, bundle.val, target, args.seed,
                                        steps=args.steps)
        else:
            res = calibrate_natural(model, bundle.val, kind, target, args.seed)
        results.append(res)
        print(f"{kind:>16s}: intensity {res.intensity:.5f} drop "
              f"{res.measured_drop:.4f} converged={res.converged} "
              f"({res.iterations} iterations)")
    with open(out / "calibration.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", "steps", "intensity", "measured_drop",
                    "iterations", "converged"])
        for res in results:
            w.writerow([res.kind, "" if res.steps is None else res.steps,
                        repr(res.intensity), repr(res.measured_drop),
                        res.iterations, res.converged])
    with open(out / "calibration_trace.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", "evaluation", "intensity", "drop"])
        for res in results:
            for i, (x, d) in enumerate(res.trace):
                w.writerow([res.kind, i, repr(x), repr(d)])
    manifest = {"tool": "calibrate", "version": __version__,
                "target": {"alpha": target.alpha, "tolerance": target.tolerance},
                "results": [r.to_json() for r in results]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    if len(results) > 1:
        report = verify_calibration(model, bundle.val, results, target, args.seed)
        for line in report.summary_lines():
            print(line)
    print(f"calibration outputs in {out}")
    return 0


def cmd_train(args, cfg):
    bundle = _resolve_dataset(args, cfg)
    h, w, c = bundle.train.image_shape
    arch = Architecture(h, w, c, bundle.classes)
    model = init_model(arch, derive_seed(args.seed, "init"))
    tc_kwargs = dict(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                     seed=derive_seed(args.seed, "train"), delay=args.delay)
    if args.mode == "adversarial":
        if args.eps is None:
            raise SystemExit("adversarial training needs --eps")
        tc = TrainConfig(mode="adversarial",
                         attack=AttackConfig(epsilon=args.eps, steps=args.steps),
                         **tc_kwargs)
    elif args.mode == "natural":
        if args.kind is None or args.intensity is None:
            raise SystemExit("natural training needs --kind and --intensity")
        spec = PerturbationSpec.create(
            args.kind, args.intensity,
            seed=derive_seed(args.seed, "nat-train", args.kind))
        tc = TrainConfig(mode="natural", spec=spec, **tc_kwargs)
    else:
        tc = TrainConfig(mode="standard", **tc_kwargs)
    model, trace = train(model, bundle.train, tc, bundle.val)
    out = _out_dir(args)
    ckpt = out / args.checkpoint_name
    save_model(model, ckpt)
    trace.to_csv(out / f"trace_{args.mode}.csv")
    last = trace.rows[-1]
    print(f"trained {args.mode} for {args.epochs} epochs: train acc "
          f"{last.train_acc:.4f}, val acc {last.val_acc:.4f}; "
          f"checkpoint {ckpt}")
    return 0


def cmd_evaluate(args, cfg):
    bundle = _resolve_dataset(args, cfg)
    model = load_model(args.checkpoint)
    calib = {}
    req = mode_requirement(args.mode)
    if req is not None:
        from .calibrate import CalibrationResult
        if args.calibration:
            with open(args.calibration) as f:
                data = json.load(f)
            results = [CalibrationResult.from_json(r) for r in data["results"]]
            for r in results:
                label = f"adv_k{r.steps}" if r.kind == ADVERSARIAL else r.kind
                calib[label] = r
        elif args.intensity is not None:
            if req[0] == "adv":
                calib[args.mode] = CalibrationResult(
                    ADVERSARIAL, args.intensity, float("nan"), 0, True,
                    steps=req[1])
            else:
                spec = PerturbationSpec.create(args.mode, args.intensity, 0)
                calib[args.mode] = CalibrationResult(
                    args.mode, args.intensity, float("nan"), 0, True,
                    params=dict(spec.params))
        else:
            raise SystemExit("non-clean modes need --calibration or --intensity")
    record = delta_accuracy(model, getattr(bundle, args.split), args.mode,
                            calib, args.seed)
    print(json.dumps(record.to_json(), indent=2))
    if args.out:
        out = _out_dir(args)
        (out / "evaluation.json").write_text(json.dumps(record.to_json(), indent=2))
    return 0


def cmd_matrix(args, cfg):
    bundle = _resolve_dataset(args, cfg)
    regimes = cfg.get("regimes", list(DEFAULT_REGIMES))
    modes = cfg.get("modes", list(DEFAULT_MODES))
    seeds = cfg.get("seeds", [args.seed])
    settings = _settings_from(cfg)
    out = _out_dir(args)
    cache = None if args.no_cache else (args.cache_dir or out / "cache")
    report = run_matrix(bundle, regimes, modes, seeds, settings,
                        cache_dir=cache,
                        log=(lambda m: print(m, flush=True)) if args.verbose else None)
    emit_outputs(report, out, extra_manifest={"dataset": bundle.manifest})
    print(f"matrix complete: {len(regimes)} regimes x {len(modes)} modes x "
          f"{len(seeds)} seeds; outputs in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="perturblab",
                                description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--dataset", default=None, help="dataset manifest JSON path")

    sp = sub.add_parser("perturb", help="write perturbed sample images")
    common(sp)
    sp.add_argument("--kind", choices=KINDS, required=True)
    sp.add_argument("--intensity", type=float, required=True)
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--format", choices=("png", "ppm"), default="png")
    sp.set_defaults(fn=cmd_perturb)

    sp = sub.add_parser("attack", help="emit adversarial images and a CSV")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--eps", type=float, required=True)
    sp.add_argument("--steps", type=int, default=10)
    sp.add_argument("--pgd", action="store_true", help="random-start attack")
    sp.add_argument("--count", type=int, default=64)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--format", choices=("png", "ppm"), default="png")
    sp.set_defaults(fn=cmd_attack)

    sp = sub.add_parser("calibrate", help="bisect intensities to the target drop")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--kind", default="all",
                    choices=list(KINDS) + [ADVERSARIAL, "all"])
    sp.add_argument("--alpha", type=float, default=0.10)
    sp.add_argument("--tolerance", type=float, default=0.01)
    sp.add_argument("--steps", type=int, default=10, help="attack steps")
    sp.set_defaults(fn=cmd_calibrate)

    sp = sub.add_parser("train", help="train one regime and save a checkpoint")
    common(sp)
    sp.add_argument("--mode", choices=("standard", "adversarial", "natural"),
                    default="standard")
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--lr", type=float, default=0.08)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--delay", type=int, default=1)
    sp.add_argument("--eps", type=float, default=None)
    sp.add_argument("--steps", type=int, default=10)
    sp.add_argument("--kind", choices=KINDS, default=None)
    sp.add_argument("--intensity", type=float, default=None)
    sp.add_argument("--checkpoint-name", default="model.ckpt")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate one cell")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--calibration", default=None,
                    help="manifest.json from the calibrate command")
    sp.add_argument("--intensity", type=float, default=None,
                    help="explicit intensity/epsilon instead of a calibration file")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("matrix", help="full regime x mode evaluation matrix")
    common(sp)
    sp.add_argument("--cache-dir", default=None)
    sp.add_argument("--no-cache", action="store_true")
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(fn=cmd_matrix)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _load_config(args.config)
    return args.fn(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
