"""Training and evaluation loops with CSV logging and best-DSC checkpoints."""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from .engine import EngineError, GradTape, Tensor, backward
from .data import augment
from .losses import LossConfig, total_loss
from .metrics import MetricsReport, evaluate_masks
from .model import ACMUNet, save_checkpoint
from .optim import AdamW, cosine_lr


class TrainingError(EngineError):
    pass


class EmptyDataset(TrainingError):
    pass


class NonFiniteLoss(TrainingError):
    pass


@dataclass
class TrainParams:
    lr: float = 5e-4
    weight_decay: float = 1e-3
    epochs: int = 30
    batch_size: int = 4
    alpha: float = 0.5
    seed: int = 0
    augment_flags: tuple = ("hflip", "vflip", "rot90")
    max_steps: int = 0       # 0 = run all epochs
    eval_every: int = 1      # epochs between validation passes

    def validate(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise TrainingError("batch_size and epochs must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise TrainingError(f"alpha must be in [0, 1], got {self.alpha}")
        return self


CSV_HEADER = "epoch,lr,train_loss,val_dsc_mean,val_hd95_mean,seconds"


def predict_labels(model: ACMUNet, images, batch_size: int = 4) -> np.ndarray:
    """Eval-mode argmax label maps for a list/stack of [3, h, w] images."""
    was_training = model.training
    model.eval()
    outs = []
    try:
        for i in range(0, len(images), batch_size):
            batch = np.stack([np.asarray(im, np.float32)
                              for im in images[i:i + batch_size]])
            logits = model(Tensor(batch))
            outs.append(np.argmax(logits.data, axis=1))
    finally:
        model.train(was_training)
    return np.concatenate(outs, axis=0)


def evaluate(model: ACMUNet, dataset, spacing=(1.0, 1.0),
             batch_size: int = 4) -> MetricsReport:
    """Per-class DSC/HD95 of eval-mode predictions over (image, mask) pairs."""
    if not dataset:
        raise EmptyDataset("cannot evaluate an empty dataset")
    preds = predict_labels(model, [img for img, _ in dataset], batch_size)
    gts = np.stack([np.rint(mask).astype(np.int64) for _, mask in dataset])
    return evaluate_masks(preds, gts, model.config.num_classes, spacing)


def _format_row(values) -> str:
    out = []
    for v in values:
        if v is None:
            out.append("nan")
        elif isinstance(v, int):
            out.append(str(v))
        else:
            out.append(f"{v:.6g}")
    return ",".join(out)


def train_loop(model: ACMUNet, train_set, val_set, params: TrainParams,
               out_dir=None, spacing=(1.0, 1.0)):
    """Cosine-scheduled AdamW training with per-epoch CSV rows.

    Returns (history, best_checkpoint_path, csv_path). Validation runs every
    ``eval_every`` epochs (and on the last); rows in between repeat the last
    known validation metrics. The best-DSC checkpoint is retained when
    ``out_dir`` is given. The seconds column is wall-clock and therefore not
    covered by the determinism guarantees.
    """
    params.validate()
    if not train_set:
        raise EmptyDataset("training set is empty")
    eval_set = val_set if val_set else train_set

    rng = np.random.default_rng(params.seed)
    opt = AdamW(model.parameters(), lr=params.lr,
                weight_decay=params.weight_decay)
    loss_cfg = LossConfig(alpha=params.alpha).validate()

    steps_per_epoch = math.ceil(len(train_set) / params.batch_size)
    total_steps = params.epochs * steps_per_epoch
    if params.max_steps:
        total_steps = min(total_steps, params.max_steps)

    csv_lines = [f"# alpha={params.alpha:.6g}", CSV_HEADER]
    csv_path = os.path.join(out_dir, "train_log.csv") if out_dir else None
    best_path = os.path.join(out_dir, "best.ckpt") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    history = []
    best_dsc = -1.0
    last_dsc, last_hd = None, None
    step = 0
    t0 = time.monotonic()
    model.train()
    done = False
    for epoch in range(params.epochs):
        order = rng.permutation(len(train_set))
        epoch_losses = []
        for b in range(steps_per_epoch):
            idx = order[b * params.batch_size:(b + 1) * params.batch_size]
            if len(idx) == 0:
                continue
            imgs, masks = [], []
            for i in idx:
                img, mask = train_set[i]
                if params.augment_flags:
                    img, mask = augment(img, mask, rng, params.augment_flags)
                imgs.append(img)
                masks.append(mask)
            x = Tensor(np.stack(imgs))
            y = np.stack(masks)
            lr = cosine_lr(step, total_steps, params.lr)
            with GradTape() as tape:
                loss = total_loss(model(x), y, loss_cfg)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise NonFiniteLoss(
                    f"non-finite loss {loss_val} at step {step} "
                    f"(epoch {epoch}, lr {lr:.3e})")
            backward(tape, loss)
            opt.step(lr=lr)
            epoch_losses.append(loss_val)
            step += 1
            if params.max_steps and step >= params.max_steps:
                done = True
                break

        is_last = done or epoch == params.epochs - 1
        if epoch % params.eval_every == 0 or is_last:
            report = evaluate(model, eval_set, spacing,
                              batch_size=params.batch_size)
            last_dsc = report.mean_dsc
            last_hd = report.mean_hd95
            if out_dir and last_dsc > best_dsc:
                best_dsc = last_dsc
                save_checkpoint(model, best_path, step=step,
                                seed=params.seed, optimizer=opt)
        row = {
            "epoch": epoch,
            "lr": cosine_lr(step, total_steps, params.lr),
            "train_loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
            "val_dsc_mean": last_dsc,
            "val_hd95_mean": last_hd,
            "seconds": time.monotonic() - t0,
        }
        history.append(row)
        csv_lines.append(_format_row([row["epoch"], row["lr"],
                                      row["train_loss"], row["val_dsc_mean"],
                                      row["val_hd95_mean"], row["seconds"]]))
        if done:
            break

    if out_dir:
        with open(csv_path, "w") as f:
            f.write("\n".join(csv_lines) + "\n")
        save_checkpoint(model, os.path.join(out_dir, "last.ckpt"), step=step,
                        seed=params.seed, optimizer=opt)
        if best_dsc < 0:
            save_checkpoint(model, best_path, step=step, seed=params.seed,
                            optimizer=opt)
    return history, best_path, csv_path
