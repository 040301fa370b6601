"""Training orchestration for supervised, self-training (st), and
transformation-invariant self-training (tist) runs.

Gradient routing: the plain-view forward of the target branch runs in
inference mode and contributes only the (constant) confidence mask; the
pseudo-supervised gradient flows exclusively through the transformed
view's forward pass. One optimizer update per step on the combined
objective sup + lam * ps.
"""

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import augment, data, eval_report, losses, pseudolabel
from .config import config_hash, train_sections
from .errors import InvalidInputError, TrainingDiverged
from .model import UNet, load_checkpoint, predict_probs, save_checkpoint, softmax

_INIT_TAG = 1000
_AUG_TAG = 2000


@dataclass
class StepMetrics:
    sup_loss: float
    ps_loss: float
    lam: float
    overall_loss: float
    retained_fraction: float


def lr_at(cfg, epoch):
    """Stepwise-decayed learning rate: lr * gamma^(epoch // step)."""
    return cfg.lr * cfg.lr_gamma ** (epoch // cfg.lr_step_epochs)


class SGD:
    """Stochastic gradient descent, optionally with classical momentum."""

    def __init__(self, momentum=0.0):
        self.momentum = momentum
        self._velocity = {}

    def step(self, params, grads, lr):
        for k, p in params.items():
            g = grads[k]
            if self.momentum > 0.0:
                v = self._velocity.get(k)
                if v is None:
                    v = np.zeros_like(p)
                    self._velocity[k] = v
                v *= p.dtype.type(self.momentum)
                v -= p.dtype.type(lr) * g
                p += v
            else:
                p -= p.dtype.type(lr) * g


def _loss_weights(cfg):
    return losses.LossWeights(cfg.ce_weight, cfg.log_dice_weight,
                              cfg.dice_smooth)


def augment_source_batch(samples, rng, ignore_index):
    """Fresh spatial+photometric augmentation per sample; returns arrays."""
    imgs, labs = [], []
    for s in samples:
        img = np.asarray(s.image, dtype=np.float32)
        lab = np.asarray(s.label, dtype=np.int32)
        gspec = augment.sample_spatial(rng, img.shape)
        img, lab = augment.apply_spatial(img, lab, gspec,
                                         ignore_index=ignore_index)
        fspec = augment.sample_nonspatial(rng)
        img = augment.apply_nonspatial(img, fspec)
        imgs.append(img.astype(np.float32))
        labs.append(lab)
    return np.stack(imgs), np.stack(labs)


def source_branch(model, x, y, weights, ignore_index):
    """Supervised forward/backward. Returns (loss value, gradient dict)."""
    logits = model.forward(x, train=True)
    probs = softmax(logits)
    res = losses.supervised_loss(probs, y, weights, ignore_index,
                                 with_grad=True)
    if res.n_valid == 0:
        return res.value, None
    model.backward(res.grad.astype(model.dtype))
    return res.value, {k: v.copy() for k, v in model.gradients().items()}


def pseudo_branch(model, x_plain, x_transformed, tau, ignore_index,
                  two_view=True):
    """Pseudo-supervised forward/backward on the target batch.

    Returns (loss value, gradient dict or None, retained fraction). The
    confidence mask ensembles both views when two_view, else uses only
    the transformed view; either way the mask and pseudo labels are
    constants for differentiation.
    """
    logits2 = model.forward(x_transformed, train=True)
    probs2 = softmax(logits2)
    mask = pseudolabel.confidence_mask(probs2, tau)
    if two_view:
        probs1 = predict_probs(model, x_plain)
        mask = pseudolabel.ensemble_mask(
            pseudolabel.confidence_mask(probs1, tau), mask)
    pseudo = pseudolabel.make_pseudo_labels(probs2, mask, ignore_index)
    res = losses.pseudo_supervised_loss(probs2, pseudo, ignore_index,
                                        with_grad=True)
    grads = None
    if res.n_valid > 0:
        model.backward(res.grad.astype(model.dtype))
        grads = {k: v.copy() for k, v in model.gradients().items()}
    return res.value, grads, pseudolabel.retained_fraction(mask)


def transform_target_batch(samples, rng):
    """Plain and freshly photometric-transformed views of a target batch."""
    x_plain = data.stack_images(samples)
    views = []
    for img in x_plain:
        fspec = augment.sample_nonspatial(rng)
        views.append(augment.apply_nonspatial(img, fspec).astype(np.float32))
    return x_plain, np.stack(views)


def _combine(g_sup, g_ps, lam):
    if g_ps is None:
        return g_sup
    return {k: g_sup[k] + lam * g_ps[k] for k in g_sup}


def _semi_step(model, optimizer, source_samples, target_samples, cfg,
               schedule, epoch, rng, lr, two_view):
    lam = losses.lambda_at(schedule, epoch)
    x, y = augment_source_batch(source_samples, rng, cfg.ignore_index)
    sup_val, g_sup = source_branch(model, x, y, _loss_weights(cfg),
                                   cfg.ignore_index)
    x_plain, x_tr = transform_target_batch(target_samples, rng)
    ps_val, g_ps, retained = pseudo_branch(model, x_plain, x_tr, cfg.tau,
                                           cfg.ignore_index, two_view)
    if g_sup is not None:
        optimizer.step(model.parameters(), _combine(g_sup, g_ps, lam), lr)
    overall = losses.overall_loss(sup_val, ps_val, lam)
    return StepMetrics(sup_val, ps_val, lam, overall, retained)


def tist_step(model, optimizer, source_samples, target_samples, cfg,
              schedule, epoch, rng, lr):
    """Two-view confidence-ensembled self-training step."""
    return _semi_step(model, optimizer, source_samples, target_samples, cfg,
                      schedule, epoch, rng, lr, two_view=True)


def st_step(model, optimizer, source_samples, target_samples, cfg,
            schedule, epoch, rng, lr):
    """Single-view (transformed) confidence-thresholded self-training step."""
    return _semi_step(model, optimizer, source_samples, target_samples, cfg,
                      schedule, epoch, rng, lr, two_view=False)


def supervised_step(model, optimizer, source_samples, cfg, schedule, epoch,
                    rng, lr):
    lam = losses.lambda_at(schedule, epoch)
    x, y = augment_source_batch(source_samples, rng, cfg.ignore_index)
    sup_val, g_sup = source_branch(model, x, y, _loss_weights(cfg),
                                   cfg.ignore_index)
    if g_sup is not None:
        optimizer.step(model.parameters(), g_sup, lr)
    return StepMetrics(sup_val, 0.0, lam, sup_val, 0.0)


@dataclass
class TrainResult:
    model: object
    history: dict
    best_checkpoint: str | None
    last_checkpoint: str | None


def _init_seed(seed):
    return int(np.random.SeedSequence((int(seed), _INIT_TAG)).generate_state(1)[0])


def build_model(cfg):
    return UNet(in_channels=cfg.in_channels, num_classes=cfg.num_classes,
                base_width=cfg.base_width,
                input_size=(cfg.image_size, cfg.image_size),
                dtype=np.dtype(cfg.dtype), init_seed=_init_seed(cfg.seed))


def train(cfg, source_train, target_train, eval_samples, out_dir=None,
          resume_from=None, log=print):
    """Run cfg.epochs of training; returns a TrainResult.

    source_train must be labeled; target_train labels are withheld here
    regardless of what was passed in. eval_samples (labeled, typically
    the held-out target fold) drive per-epoch Dice and best-checkpoint
    selection. With out_dir set, writes metrics.jsonl, history.json and
    best/last checkpoints; resume_from continues from a checkpoint with
    metric-exact agreement.
    """
    if cfg.method not in ("supervised", "st", "tist"):
        raise InvalidInputError(f"unknown method {cfg.method}")
    if len(source_train) == 0:
        raise InvalidInputError("source training set is empty")
    if cfg.method != "supervised" and len(target_train) == 0:
        raise InvalidInputError(f"{cfg.method} requires target samples")
    target_hidden = target_train.hidden() if len(target_train) else target_train

    sections = train_sections(cfg)
    chash = config_hash(sections)
    schedule = losses.RampSchedule(cfg.epochs, cfg.ramp_squared)
    optimizer = SGD(cfg.momentum)

    start_epoch = 0
    history = {"config": asdict(cfg), "config_hash": chash,
               "epochs": [], "steps": []}
    if resume_from is not None:
        model, meta = load_checkpoint(resume_from)
        if meta.get("config_hash") not in (None, chash):
            raise InvalidInputError(
                "checkpoint config hash does not match this configuration")
        start_epoch = int(meta.get("next_epoch", 0))
        prior = meta.get("history_path")
        if out_dir is not None and (Path(out_dir) / "history.json").exists():
            prior = Path(out_dir) / "history.json"
        if prior and Path(prior).exists():
            with open(prior, "r", encoding="utf-8") as fh:
                old = json.load(fh)
            history["epochs"] = [e for e in old.get("epochs", [])
                                 if e["epoch"] < start_epoch]
            history["steps"] = [s for s in old.get("steps", [])
                                if s["epoch"] < start_epoch]
    else:
        model = build_model(cfg)

    best_dice = -np.inf
    for rec in history["epochs"]:
        if rec.get("eval_dice") is not None:
            best_dice = max(best_dice, rec["eval_dice"])

    out_dir = Path(out_dir) if out_dir is not None else None
    best_path = last_path = None
    metrics_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        best_path = out_dir / "ckpt_best.npz"
        last_path = out_dir / "ckpt_last.npz"
        metrics_fh = open(out_dir / "metrics.jsonl",
                          "a" if resume_from else "w", encoding="utf-8")

    def emit(record):
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_fh.flush()

    try:
        t0 = time.time()
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(cfg, epoch)
            rng = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, _AUG_TAG, epoch)))
            if cfg.method == "supervised":
                n_steps = data.steps_per_epoch(len(source_train), 0,
                                               cfg.batch_size)
                batches = data.epoch_batches(source_train.ids, [],
                                             cfg.batch_size, cfg.seed, epoch,
                                             n_steps)
            else:
                batches = data.epoch_batches(source_train.ids,
                                             target_hidden.ids,
                                             cfg.batch_size, cfg.seed, epoch)
            sup_sum = ps_sum = 0.0
            for step, (sids, tids) in enumerate(batches):
                src = [source_train.by_id(i) for i in sids]
                if cfg.method == "supervised":
                    m = supervised_step(model, optimizer, src, cfg, schedule,
                                        epoch, rng, lr)
                else:
                    tgt = [target_hidden.by_id(i) for i in tids]
                    step_fn = tist_step if cfg.method == "tist" else st_step
                    m = step_fn(model, optimizer, src, tgt, cfg, schedule,
                                epoch, rng, lr)
                if not np.isfinite(m.overall_loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step}",
                        snapshot={"epoch": epoch, "step": step,
                                  "source_ids": list(sids),
                                  "target_ids": list(tids),
                                  "lam": m.lam, "lr": lr,
                                  "sup_loss": m.sup_loss,
                                  "ps_loss": m.ps_loss})
                rec = {"kind": "step", "epoch": epoch, "step": step,
                       **asdict(m)}
                history["steps"].append(rec)
                emit(rec)
                sup_sum += m.sup_loss
                ps_sum += m.ps_loss

            eval_dice = None
            eval_per_class = None
            if eval_samples:
                result = eval_report.evaluate_model(model, list(eval_samples),
                                                    cfg.batch_size,
                                                    cfg.ignore_index)
                fg = result.foreground_mean()
                eval_dice = float(fg) if np.isfinite(fg) else result.mean
                eval_per_class = result.per_class
            epoch_rec = {"kind": "epoch", "epoch": epoch, "lr": lr,
                         "lam": losses.lambda_at(schedule, epoch),
                         "mean_sup_loss": sup_sum / max(len(batches), 1),
                         "mean_ps_loss": ps_sum / max(len(batches), 1),
                         "eval_dice": eval_dice,
                         "eval_per_class": eval_per_class}
            history["epochs"].append(epoch_rec)
            emit(epoch_rec)
            if log is not None:
                log(f"[{cfg.method}] epoch {epoch + 1}/{cfg.epochs} "
                    f"lr={lr:.5f} sup={sup_sum / max(len(batches), 1):.4f} "
                    f"ps={ps_sum / max(len(batches), 1):.4f} "
                    f"dice={'-' if eval_dice is None else f'{eval_dice:.4f}'} "
                    f"({time.time() - t0:.0f}s)")

            if out_dir is not None:
                meta = {"next_epoch": epoch + 1, "config_hash": chash,
                        "rng": {"scheme": "per-epoch", "seed": cfg.seed},
                        "eval_dice": eval_dice}
                save_checkpoint(model, last_path, meta)
                if eval_dice is not None and eval_dice > best_dice:
                    best_dice = eval_dice
                    save_checkpoint(model, best_path, meta)
        if out_dir is not None:
            if eval_samples is None or not list(eval_samples):
                best_path = last_path
            elif not best_path.exists():
                best_path = last_path
            with open(out_dir / "history.json", "w", encoding="utf-8") as fh:
                json.dump(history, fh, indent=1, sort_keys=True)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    return TrainResult(model, history,
                       str(best_path) if best_path else None,
                       str(last_path) if last_path else None)
