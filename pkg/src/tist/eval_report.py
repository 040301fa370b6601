"""Dice scoring, fold aggregation, and sweep/comparison reports.

Dice uses the empty-vs-empty = 1 convention so per-image averaging stays
well-defined; classes absent from every prediction and every ground
truth of an evaluation set are excluded from means and reported as
absent. Reports carry both per-image-averaged and pooled-pixel scores.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .model import predict_probs
from .pseudolabel import IGNORE_INDEX


def dice_score(pred, gt, class_id, ignore_index=IGNORE_INDEX):
    """2|P∩G| / (|P| + |G|) for one class; 1.0 when both sets are empty.

    Pixels whose ground truth is the ignore index are excluded from both
    sets. Symmetric in (pred, gt).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    keep = gt != ignore_index
    p = (pred == class_id) & keep
    g = (gt == class_id) & keep
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


@dataclass
class DiceResult:
    """Per-class Dice in [0, 1]; absent classes are None."""

    per_class: list
    mean: float
    n_images: int

    def foreground_mean(self):
        vals = [d for d in self.per_class[1:] if d is not None]
        return float(np.mean(vals)) if vals else float("nan")


def _present_classes(preds, gts, num_classes, ignore_index):
    present = np.zeros(num_classes, dtype=bool)
    for pred, gt in zip(preds, gts):
        keep = gt != ignore_index
        for c in range(num_classes):
            if not present[c]:
                present[c] = bool(((pred == c) & keep).any()
                                  or ((gt == c) & keep).any())
    return present


def dice_from_arrays(preds, gts, num_classes, ignore_index=IGNORE_INDEX):
    """Per-image-averaged Dice over paired prediction/label maps."""
    if not preds:
        raise InvalidInputError("no predictions to score")
    present = _present_classes(preds, gts, num_classes, ignore_index)
    per_class = []
    for c in range(num_classes):
        if not present[c]:
            per_class.append(None)
            continue
        scores = [dice_score(p, g, c, ignore_index) for p, g in zip(preds, gts)]
        per_class.append(float(np.mean(scores)))
    known = [d for d in per_class if d is not None]
    return DiceResult(per_class, float(np.mean(known)), len(preds))


def pooled_dice_from_arrays(preds, gts, num_classes, ignore_index=IGNORE_INDEX):
    """Pooled-pixel Dice: all images concatenated into one mask pair."""
    pred = np.concatenate([np.asarray(p).ravel() for p in preds])
    gt = np.concatenate([np.asarray(g).ravel() for g in gts])
    present = _present_classes([pred], [gt], num_classes, ignore_index)
    per_class = [dice_score(pred, gt, c, ignore_index) if present[c] else None
                 for c in range(num_classes)]
    known = [d for d in per_class if d is not None]
    return DiceResult(per_class, float(np.mean(known)), len(preds))


def predict_labels(model, images, batch_size=4):
    """Argmax predictions for a list/array of HWC images."""
    out = []
    for lo in range(0, len(images), batch_size):
        batch = np.stack([np.asarray(im, dtype=np.float32)
                          for im in images[lo:lo + batch_size]])
        probs = predict_probs(model, batch)
        out.extend(np.argmax(probs, axis=-1).astype(np.int32))
    return out


def evaluate_model(model, samples, batch_size=4, ignore_index=IGNORE_INDEX,
                   pooled=False):
    """DiceResult of a model over labeled samples (evaluation labels)."""
    images = [s.image for s in samples]
    gts = [np.asarray(s._eval_label()) for s in samples]
    if any(g is None for g in gts):
        raise InvalidInputError("evaluation requires labeled samples")
    preds = predict_labels(model, images, batch_size)
    fn = pooled_dice_from_arrays if pooled else dice_from_arrays
    return fn(preds, gts, model.num_classes, ignore_index)


def relative_dice(method_dice, supervised_dice):
    """Method minus supervised baseline, in the caller's units
    (percentage points in reports)."""
    return float(method_dice) - float(supervised_dice)


@dataclass
class FoldAggregate:
    mean_per_class: list
    std_per_class: list
    mean: float
    std: float
    n_folds: int


def aggregate_folds(results):
    """Mean and standard deviation per class and overall across folds."""
    if not results:
        raise InvalidInputError("no fold results to aggregate")
    num_classes = len(results[0].per_class)
    mean_pc, std_pc = [], []
    for c in range(num_classes):
        vals = [r.per_class[c] for r in results if r.per_class[c] is not None]
        if vals:
            mean_pc.append(float(np.mean(vals)))
            std_pc.append(float(np.std(vals)))
        else:
            mean_pc.append(None)
            std_pc.append(None)
    overall = [r.mean for r in results]
    return FoldAggregate(mean_pc, std_pc, float(np.mean(overall)),
                         float(np.std(overall)), len(results))


# ----------------------------------------------------------------- reports

def comparison_table(rows, baseline="supervised"):
    """Markdown table of method scores (in %) with relative improvements
    over the baseline method in parentheses."""
    scores = {r["method"]: r for r in rows}
    if baseline not in scores:
        raise InvalidInputError(f"baseline {baseline!r} missing from rows")
    base = scores[baseline]["dice"]
    lines = ["| Method | Dice (%) | Relative |", "|---|---|---|"]
    for row in rows:
        rel = relative_dice(row["dice"], base)
        rel_txt = "N/A" if row["method"] == baseline else f"({rel:+.2f})"
        lines.append(f"| {row['method']} | {row['dice']:.2f} | {rel_txt} |")
    return "\n".join(lines)


def _curve_plot(points_by_method, xlabel, out_path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in sorted(points_by_method):
        pts = sorted(points_by_method[method])
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                marker="o", label=method)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("Dice (%)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def sweep_report(records, out_dir, expected=None):
    """Emit sweep artifacts from per-run records.

    records: dicts with method, tau, fraction, seed, dice (in %), status
    ("ok"/"failed") and run_dir. Writes results.csv, results.json,
    report.md and Dice-vs-tau / Dice-vs-fraction curves when the grid has
    enough points. Missing grid points (from `expected`) are flagged, not
    fatal. Returns the report path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = sorted(records, key=lambda r: (r["method"], r.get("tau") or 0,
                                             r.get("fraction") or 0,
                                             r.get("seed") or 0))
    cols = ["method", "tau", "fraction", "seed", "dice", "status", "run_dir"]
    with open(out_dir / "results.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for r in records:
            writer.writerow({c: r.get(c, "") for c in cols})
    with open(out_dir / "results.json", "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)

    ok = [r for r in records if r.get("status", "ok") == "ok"]
    gaps = [r for r in records if r.get("status") == "failed"]
    if expected:
        have = {(r["method"], r.get("tau"), r.get("fraction"), r.get("seed"))
                for r in records}
        for key in expected:
            if key not in have:
                gaps.append({"method": key[0], "tau": key[1],
                             "fraction": key[2], "seed": key[3],
                             "status": "missing"})

    # aggregate over seeds for the curves
    def _agg(points):
        agg = {}
        for method, x, d in points:
            agg.setdefault((method, x), []).append(d)
        out = {}
        for (method, x), ds in agg.items():
            out.setdefault(method, []).append((x, float(np.mean(ds))))
        return out

    tau_pts = [(r["method"], r["tau"], r["dice"]) for r in ok
               if r.get("tau") is not None and r.get("fraction") in (None, "", 1.0)]
    frac_pts = [(r["method"], r["fraction"], r["dice"]) for r in ok
                if r.get("fraction") not in (None, "")]
    plots = []
    if len({x for _, x, _ in tau_pts}) >= 2:
        _curve_plot(_agg(tau_pts), "confidence threshold", out_dir / "dice_vs_tau.svg")
        plots.append("dice_vs_tau.svg")
    if len({x for _, x, _ in frac_pts}) >= 2:
        _curve_plot(_agg(frac_pts), "labeled fraction",
                    out_dir / "dice_vs_fraction.svg")
        plots.append("dice_vs_fraction.svg")

    lines = ["# Sweep report", ""]
    lines.append("| method | tau | fraction | seed | dice (%) | status |")
    lines.append("|---|---|---|---|---|---|")
    for r in records:
        lines.append("| {method} | {tau} | {fraction} | {seed} | {dice} | {status} |"
                     .format(method=r["method"], tau=r.get("tau", ""),
                             fraction=r.get("fraction", ""),
                             seed=r.get("seed", ""),
                             dice=("" if r.get("dice") is None
                                   else f"{r['dice']:.4f}"),
                             status=r.get("status", "ok")))
    if gaps:
        lines += ["", "## Gaps", ""]
        for g in gaps:
            lines.append(f"- {g['method']} tau={g.get('tau')} "
                         f"fraction={g.get('fraction')} seed={g.get('seed')}: "
                         f"{g['status']}")
    if plots:
        lines += ["", "## Plots", ""] + [f"- {p}" for p in plots]
    report_path = out_dir / "report.md"
    report_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return report_path
