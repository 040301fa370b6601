"""Command-line entry point: generate | train | eval | ablate | report.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 sweep
completed with partial failures. TIST_OUT_ROOT sets the default output
root; TIST_NUMBA selects the kernel backend (see kernels package).
"""

import argparse
import json
import os
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as cfg_mod
from . import data, eval_report, trainer
from .errors import TistError
from .model import load_checkpoint

OUT_ROOT_ENV = "TIST_OUT_ROOT"
DEFAULT_TAUS = (0.80, 0.85, 0.90, 0.95)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_root():
    return Path(os.environ.get(OUT_ROOT_ENV, "tist_out"))


def _parse_shift(text):
    if text is None:
        return data.ShiftParams()
    if text.strip().lower() == "none":
        return data.ShiftParams.none()
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise UsageError(
            "--shift expects 'brightness,noise_sigma,blur_sigma' or 'none'")
    return data.ShiftParams(*parts)


def _parse_list(text, cast):
    return [cast(p) for p in text.split(",") if p.strip() != ""]


# ---------------------------------------------------------------- generate

def cmd_generate(args):
    out = Path(args.out) if args.out else _out_root() / "dataset"
    if out.exists() and any(out.iterdir()):
        if not args.force:
            print(f"error: {out} exists and is not empty (use --force)",
                  file=sys.stderr)
            return 2
    shift = _parse_shift(args.shift)
    synth = data.SynthConfig(
        n_source=args.n_source, n_target=args.n_target,
        image_size=args.size, num_classes=args.classes,
        shapes=tuple(_parse_list(args.shapes, str)), shift=shift)
    source, target = data.generate_synthetic(synth, args.seed)
    data.save_folder_dataset(source, out / "source")
    data.save_folder_dataset(target, out / "target")
    manifest = {
        "kind": "synthetic", "seed": args.seed,
        "n_source": synth.n_source, "n_target": synth.n_target,
        "image_size": synth.image_size, "num_classes": synth.num_classes,
        "shapes": list(synth.shapes), "shift": asdict(shift),
    }
    manifest["hash"] = cfg_mod.config_hash({"manifest": {
        k: str(v) for k, v in manifest.items()}})
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"wrote dataset to {out} "
          f"({synth.n_source} source / {synth.n_target} target)")
    return 0


# ------------------------------------------------------------------- train

def _load_domains(root):
    root = Path(root)
    source = data.load_folder_dataset(root / "source", domain=data.SOURCE)
    target = data.load_folder_dataset(root / "target", domain=data.TARGET)
    manifest = {}
    mpath = root / "manifest.json"
    if mpath.exists():
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    return source, target, manifest


def _fold_split(source, target, fold_index):
    # fold layout depends only on the dataset ids, never the run seed,
    # so every method/seed evaluates the same held-out pool
    combined = data.Dataset(list(source.samples) + list(target.samples))
    folds = data.make_folds(combined, k=4, seed=0)
    return folds[fold_index]


def _resolve_train_cfg(args):
    file_sections = cfg_mod.read_ini(args.config) if args.config else {}
    overrides = {
        "method": args.method, "tau": args.tau, "epochs": args.epochs,
        "lr": args.lr, "lr_gamma": args.lr_gamma,
        "lr_step_epochs": args.lr_step_epochs, "batch_size": args.batch_size,
        "momentum": args.momentum, "seed": args.seed,
        "fold_index": args.fold, "base_width": args.base_width,
        "num_classes": args.classes, "dtype": args.dtype,
        "ramp_squared": args.ramp_squared or None,
        "image_size": args.size,
    }
    return cfg_mod.train_config_from_ini(file_sections, args.profile,
                                         **overrides)


def _run_training(cfg, source, target, manifest, out_dir, source_fraction=1.0,
                  resume_from=None, quiet=False):
    split = _fold_split(target, cfg.fold_index)
    source_ids = list(split.train_source_ids)
    if source_fraction < 1.0:
        rng = np.random.default_rng(0)
        perm = [source_ids[i] for i in rng.permutation(len(source_ids))]
        keep = max(1, int(round(source_fraction * len(source_ids))))
        source_ids = sorted(perm[:keep])
    source_train = source.subset(source_ids)
    target_train = target.subset(split.train_target_ids)
    eval_samples = [target.by_id(i) for i in split.test_ids]

    sections = cfg_mod.train_sections(cfg, extra={
        "data": {"manifest_hash": manifest.get("hash", ""),
                 "source_fraction": source_fraction}})
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_mod.write_ini(sections, out_dir / "config.ini")
    log = None if quiet else print
    result = trainer.train(cfg, source_train, target_train, eval_samples,
                           out_dir=out_dir, resume_from=resume_from, log=log)
    evals = [e["eval_dice"] for e in result.history["epochs"]
             if e["eval_dice"] is not None]
    summary = {
        "config_hash": result.history["config_hash"],
        "method": cfg.method, "tau": cfg.tau, "seed": cfg.seed,
        "fold_index": cfg.fold_index, "source_fraction": source_fraction,
        "best_dice": max(evals) if evals else None,
        "last_dice": evals[-1] if evals else None,
        "best_checkpoint": result.best_checkpoint,
        "last_checkpoint": result.last_checkpoint,
    }
    with open(out_dir / "result.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return result, summary


def cmd_train(args):
    if args.resume:
        run_dir = Path(args.resume)
        ini = run_dir / "config.ini"
        if not ini.exists():
            raise UsageError(f"--resume: no config.ini under {run_dir}")
        sections = cfg_mod.read_ini(ini)
        cfg = cfg_mod.train_config_from_ini(sections)
        if not args.data:
            raise UsageError("--resume also needs --data (dataset root)")
        source, target, manifest = _load_domains(args.data)
        _, summary = _run_training(
            cfg, source, target, manifest, run_dir,
            source_fraction=float(sections.get("data", {})
                                  .get("source_fraction", 1.0)),
            resume_from=run_dir / "ckpt_last.npz", quiet=args.quiet)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return 0
    if not args.data:
        raise UsageError("train requires --data")
    cfg = _resolve_train_cfg(args)
    source, target, manifest = _load_domains(args.data)
    sections = cfg_mod.train_sections(cfg)
    run_name = f"{cfg.method}_tau{cfg.tau:g}_seed{cfg.seed}_" \
               f"{cfg_mod.config_hash(sections)}"
    out_dir = Path(args.out) if args.out else _out_root() / "runs" / run_name
    _, summary = _run_training(cfg, source, target, manifest, out_dir,
                               source_fraction=args.source_fraction,
                               quiet=args.quiet)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


# -------------------------------------------------------------------- eval

def cmd_eval(args):
    ckpt = Path(args.ckpt)
    if ckpt.is_dir():
        ckpt = ckpt / "ckpt_best.npz"
    model, meta = load_checkpoint(ckpt)
    source, target, _ = _load_domains(args.data)
    dataset = target if args.domain == "target" else source
    if args.split == "test":
        split = _fold_split(target, args.fold)
        samples = [dataset.by_id(i) for i in split.test_ids] \
            if args.domain == "target" else list(dataset)
    else:
        samples = list(dataset)
    labeled = [s for s in samples if s._eval_label() is not None]
    skipped = [s.id for s in samples if s._eval_label() is None]
    if not labeled:
        print("error: no labeled samples to evaluate", file=sys.stderr)
        return 2
    max_class = max(int(np.max(s._eval_label())) for s in labeled)
    classes = [c for c in range(max_class + 1) if c != 255]
    if classes and max(classes) >= model.num_classes:
        print(f"error: dataset has class {max(classes)} but checkpoint "
              f"was trained with {model.num_classes} classes", file=sys.stderr)
        return 2
    result = eval_report.evaluate_model(model, labeled)
    pooled = eval_report.evaluate_model(model, labeled, pooled=True)
    report = {
        "checkpoint": str(ckpt),
        "n_images": result.n_images,
        "skipped_unlabeled": skipped,
        "per_class": result.per_class,
        "mean": result.mean,
        "foreground_mean": None if not np.isfinite(result.foreground_mean())
        else result.foreground_mean(),
        "pooled_per_class": pooled.per_class,
        "pooled_mean": pooled.mean,
    }
    baseline = None
    if args.baseline:
        bpath = Path(args.baseline)
        if bpath.is_dir():
            with open(bpath / "eval.json", "r", encoding="utf-8") as fh:
                baseline = json.load(fh)["mean"]
        else:
            baseline = float(args.baseline)
        report["baseline_mean"] = baseline
        report["relative_dice_pct"] = eval_report.relative_dice(
            result.mean * 100.0, baseline * 100.0)
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# ------------------------------------------------------------------ ablate

def cmd_ablate(args):
    if not args.data:
        raise UsageError("ablate requires --data")
    methods = _parse_list(args.methods, str)
    if any(m not in ("st", "tist") for m in methods):
        raise UsageError("ablate methods must be a subset of st,tist")
    taus = _parse_list(args.taus, float)
    seeds = _parse_list(args.seeds, int)
    fractions = _parse_list(args.fractions, float) if args.fractions else []
    if not taus and not fractions:
        raise UsageError("nothing to sweep: give --taus and/or --fractions")
    source, target, manifest = _load_domains(args.data)
    sweep_dir = Path(args.out) if args.out else _out_root() / "sweep"
    grid = []
    for m in methods:
        for t in taus:
            for s in seeds:
                grid.append((m, t, None, s))
        for f in fractions:
            for s in seeds:
                grid.append((m, args.fraction_tau, f, s))

    records, failures = [], 0
    for method, tau, fraction, seed in grid:
        cfg = cfg_mod.train_config(
            args.profile, method=method, tau=tau, seed=seed,
            epochs=args.epochs, base_width=args.base_width,
            lr=args.lr, momentum=args.momentum, num_classes=args.classes,
            image_size=args.size)
        frac = 1.0 if fraction is None else fraction
        name = f"{method}_tau{tau:g}_frac{frac:g}_seed{seed}"
        run_dir = sweep_dir / "runs" / name
        rec = {"method": method, "tau": tau, "fraction": fraction,
               "seed": seed, "run_dir": str(run_dir)}
        try:
            _, summary = _run_training(cfg, source, target, manifest, run_dir,
                                       source_fraction=frac, quiet=True)
            rec["dice"] = (summary["best_dice"] * 100.0
                           if summary["best_dice"] is not None else None)
            rec["status"] = "ok"
            print(f"done {name}: dice={rec['dice']}")
        except (TistError, OSError) as exc:
            rec["dice"] = None
            rec["status"] = "failed"
            rec["error"] = str(exc)
            failures += 1
            print(f"FAILED {name}: {exc}", file=sys.stderr)
        records.append(rec)
    expected = [(m, t, f, s) for (m, t, f, s) in grid]
    report_path = eval_report.sweep_report(records, sweep_dir, expected)
    print(f"sweep report: {report_path}")
    return 3 if failures else 0


# ------------------------------------------------------------------ report

def cmd_report(args):
    sweep_dir = Path(args.runs)
    runs_dir = sweep_dir / "runs"
    if not runs_dir.is_dir():
        raise UsageError(f"no runs directory under {sweep_dir}")
    records = []
    for run_dir in sorted(runs_dir.iterdir()):
        rpath = run_dir / "result.json"
        ini = run_dir / "config.ini"
        if not rpath.exists() or not ini.exists():
            continue
        summary = json.loads(rpath.read_text(encoding="utf-8"))
        sections = cfg_mod.read_ini(ini)
        frac = float(sections.get("data", {}).get("source_fraction", 1.0))
        records.append({
            "method": summary["method"], "tau": summary["tau"],
            "fraction": None if frac == 1.0 else frac,
            "seed": summary["seed"],
            "dice": (summary["best_dice"] * 100.0
                     if summary["best_dice"] is not None else None),
            "status": "ok" if summary["best_dice"] is not None else "failed",
            "run_dir": str(run_dir),
        })
    if not records:
        print("error: no completed runs found", file=sys.stderr)
        return 2
    report_path = eval_report.sweep_report(records, sweep_dir)
    print(f"sweep report: {report_path}")
    return 0


# ------------------------------------------------------------------- parse

def build_parser():
    p = _Parser(prog="tist", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic domain-shift dataset")
    g.add_argument("--out")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-source", type=int, default=40)
    g.add_argument("--n-target", type=int, default=40)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--shapes", default="ellipse,polygon")
    g.add_argument("--shift", default=None,
                   help="'brightness,noise,blur' or 'none' (default: built-in)")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--method", choices=cfg_mod.METHODS)
    t.add_argument("--tau", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-gamma", type=float)
    t.add_argument("--lr-step-epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--momentum", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--fold", type=int)
    t.add_argument("--base-width", type=int)
    t.add_argument("--classes", type=int)
    t.add_argument("--size", type=int)
    t.add_argument("--dtype")
    t.add_argument("--ramp-squared", action="store_true")
    t.add_argument("--profile", choices=sorted(cfg_mod.PROFILES))
    t.add_argument("--config", help="INI config file (flags win)")
    t.add_argument("--source-fraction", type=float, default=1.0)
    t.add_argument("--resume", help="run directory to continue")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--domain", choices=("target", "source"), default="target")
    e.add_argument("--split", choices=("test", "all"), default="test")
    e.add_argument("--fold", type=int, default=0)
    e.add_argument("--baseline",
                   help="baseline run dir (with eval.json) or Dice in [0,1]")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="threshold / labeled-size sweeps")
    a.add_argument("--data")
    a.add_argument("--out")
    a.add_argument("--methods", default="st,tist")
    a.add_argument("--taus", default=",".join(str(t) for t in DEFAULT_TAUS))
    a.add_argument("--seeds", default="0")
    a.add_argument("--fractions", default=None)
    a.add_argument("--fraction-tau", type=float, default=0.85,
                   help="tau used for labeled-size sweep points")
    a.add_argument("--profile", choices=sorted(cfg_mod.PROFILES),
                   default="desk")
    a.add_argument("--epochs", type=int)
    a.add_argument("--base-width", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--momentum", type=float)
    a.add_argument("--classes", type=int)
    a.add_argument("--size", type=int)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="(re)build a sweep report")
    r.add_argument("--runs", required=True, help="sweep directory")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except TistError as exc:
        print(f"error: {exc}", file=sys.stderr)
        snapshot = getattr(exc, "snapshot", None)
        if snapshot:
            print(json.dumps(snapshot, indent=2, sort_keys=True),
                  file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
