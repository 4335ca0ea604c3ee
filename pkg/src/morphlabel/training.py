"""Training loop: Adam on the mode-specific objective with per-epoch
validation, best-weight checkpointing, and convergence detection.

Objectives per mode
  plain: Dice + BCE against the strong label
  ds:    weighted Dice + BCE at every level against max-pooled strong labels
  ma:    weighted composite; L-infinity of sub-outputs against the pseudo
         pyramid, Dice + BCE at the top

Augmentation (train split only, per-sample reproducible): rotation
uniform in [-pi, pi] (nearest for masks, bilinear for images), then
horizontal / vertical flips at p=0.5, then a 3x3 Gaussian blur of the
image at p=0.5. Pseudo labels / pooled targets are regenerated from the
augmented strong label (augment-then-generate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import losses
from .autodiff import backward
from .errors import DataError, EmptyDataset, NonFiniteLoss
from .losses import LossBreakdown, supervision_weights
from .metrics import dsc
from .network import MASegNet
from .optim import Adam
from .phantoms import Phantom, normalize_image
from .pseudolabel import build_pyramid, generate_pseudo_label

LR_DECAY_MODES = ("linear-to-zero", "paper-literal", "none")

_BLUR_KERNEL = np.array([1.0, 2.0, 1.0]) / 4.0


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: str = "linear-to-zero"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-10
    k_folds: int = 3
    hflip: bool = True
    vflip: bool = True
    rotate: bool = True
    blur: bool = True
    rotation_mode: str = "proper"
    sigma_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise DataError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise DataError(f"lr must be >= 0, got {self.lr}")
        if self.lr_decay not in LR_DECAY_MODES:
            raise DataError(
                f"lr_decay must be one of {LR_DECAY_MODES}, got {self.lr_decay!r}"
            )

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "lr_decay": self.lr_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "k_folds": self.k_folds,
            "augment": {
                "hflip": self.hflip,
                "vflip": self.vflip,
                "rotate": self.rotate,
                "blur": self.blur,
            },
            "rotation_mode": self.rotation_mode,
            "sigma_scale": self.sigma_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        aug = d.get("augment", {})
        return cls(
            epochs=int(d.get("epochs", 100)),
            batch_size=int(d.get("batch_size", 16)),
            lr=float(d.get("lr", 1e-3)),
            lr_decay=str(d.get("lr_decay", "linear-to-zero")),
            beta1=float(d.get("beta1", 0.9)),
            beta2=float(d.get("beta2", 0.999)),
            eps=float(d.get("eps", 1e-8)),
            weight_decay=float(d.get("weight_decay", 1e-10)),
            k_folds=int(d.get("k_folds", 3)),
            hflip=bool(aug.get("hflip", True)),
            vflip=bool(aug.get("vflip", True)),
            rotate=bool(aug.get("rotate", True)),
            blur=bool(aug.get("blur", True)),
            rotation_mode=str(d.get("rotation_mode", "proper")),
            sigma_scale=float(d.get("sigma_scale", 1.0)),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class EpochRow:
    epoch: int
    split: str
    breakdown: LossBreakdown
    lr: float
    dsc: float | None = None


@dataclass
class TrainLog:
    rows: list[EpochRow] = field(default_factory=list)
    convergence_epoch: int = 0
    best_epoch: int = 0
    best_val_dsc: float = 0.0

    def csv_lines(self, num_levels: int) -> list[str]:
        cols = ["epoch", "split", "total", "dice", "bce"]
        cols += [f"linf_{n}" for n in range(1, num_levels)]
        cols += ["lr", "dsc"]
        lines = [",".join(cols)]
        for r in self.rows:
            vals = [str(r.epoch), r.split, repr(r.breakdown.total),
                    repr(r.breakdown.dice_term), repr(r.breakdown.bce_term)]
            for n in range(num_levels - 1):
                terms = r.breakdown.linf_terms
                vals.append(repr(terms[n]) if n < len(terms) else "")
            vals.append(repr(r.lr))
            vals.append("" if r.dsc is None else repr(r.dsc))
            lines.append(",".join(vals))
        return lines

    def summary(self) -> dict:
        return {
            "convergence_epoch": self.convergence_epoch,
            "best_epoch": self.best_epoch,
            "best_val_dsc": self.best_val_dsc,
        }


def lr_at_epoch(base_lr: float, epoch: int, total_epochs: int, mode: str) -> float:
    """Learning rate for a 1-based epoch index.

    linear-to-zero: lr * (1 - (epoch-1)/total). paper-literal: each epoch
    multiplies the previous rate by (1 - 0.001 * epoch), a cumulative
    product that decays faster than the linear ramp.
    """
    if mode == "none":
        return base_lr
    if mode == "linear-to-zero":
        return base_lr * (1.0 - (epoch - 1) / float(total_epochs))
    lr = base_lr
    for e in range(1, epoch):
        lr *= max(0.0, 1.0 - 0.001 * e)
    return lr


def convergence_epoch(val_losses, window: int = 10, rel_improvement: float = 0.01) -> int:
    """First 1-based epoch where the trailing ``window``-epoch moving
    average of validation loss improves by less than ``rel_improvement``
    relative to the preceding window. Falls back to the final epoch."""
    v = list(val_losses)
    n = len(v)
    for e in range(2 * window, n + 1):
        recent = sum(v[e - window: e]) / window
        prev = sum(v[e - 2 * window: e - window]) / window
        if prev <= 0.0:
            continue
        if (prev - recent) / prev < rel_improvement:
            return e
    return n


def _rotate_pair(image, mask, angle_rad):
    deg = math.degrees(angle_rad)
    img = ndimage.rotate(image, deg, reshape=False, order=1, mode="constant",
                         cval=float(image.min()))
    msk = ndimage.rotate(mask.astype(np.uint8), deg, reshape=False, order=0,
                         mode="constant", cval=0)
    return img, (msk != 0).astype(np.uint8)


def _blur3(image):
    out = ndimage.convolve1d(image, _BLUR_KERNEL, axis=0, mode="nearest")
    return ndimage.convolve1d(out, _BLUR_KERNEL, axis=1, mode="nearest")


def augment_sample(image, mask, rng, cfg: TrainConfig):
    """Augmented (image, mask); falls back to the originals if rotation
    produces a label no ellipse can be fitted to."""
    img, msk = image, mask
    if cfg.rotate:
        angle = rng.uniform(-math.pi, math.pi)
        r_img, r_msk = _rotate_pair(img, msk, angle)
        if r_msk.sum() >= 12:
            try:
                generate_pseudo_label(r_msk, cfg.rotation_mode, cfg.sigma_scale)
                img, msk = r_img, r_msk
            except DataError:
                pass
    if cfg.hflip and rng.random() < 0.5:
        img, msk = img[:, ::-1].copy(), msk[:, ::-1].copy()
    if cfg.vflip and rng.random() < 0.5:
        img, msk = img[::-1, :].copy(), msk[::-1, :].copy()
    if cfg.blur and rng.random() < 0.5:
        img = _blur3(img)
    return normalize_image(img), msk


def _targets_for(mask, mode, depth, cfg: TrainConfig):
    """(strong target, per-level auxiliary targets) for one sample."""
    if mode == "plain":
        return mask, []
    if mode == "ds":  # max-pooled strong labels stay binary
        return mask, build_pyramid(mask.astype(np.float64), depth - 1)
    pseudo = generate_pseudo_label(mask, cfg.rotation_mode, cfg.sigma_scale)
    return mask, build_pyramid(pseudo, depth - 1)


def _batch_loss(model, images, strongs, aux_levels, weights):
    """Forward a stacked batch and assemble the mode objective."""
    mode = model.config.mode
    outs = model.forward(np.stack(images)[:, None])
    strong = np.stack(strongs)[:, None].astype(np.float64)
    dice = losses.dice_loss(outs[0], strong)
    bce = losses.bce_loss(outs[0], strong)
    if mode == "plain":
        total = dice + bce
        bd = LossBreakdown(total.item(), dice.item(), bce.item(), [])
        return total, bd, outs
    w0 = float(weights[0])
    total = w0 * (dice + bce)
    aux_vals = []
    for n in range(1, len(outs)):
        target = np.stack([lv[n - 1] for lv in aux_levels])[:, None]
        if mode == "ma":
            term = losses.linf_loss(outs[n], target)
        else:
            term = losses.dice_loss(outs[n], target) + losses.bce_loss(outs[n], target)
        aux_vals.append(term.item())
        total = total + float(weights[n]) * term
    bd = LossBreakdown(total.item(), dice.item(), bce.item(), aux_vals)
    return total, bd, outs


def _combine(breakdowns, counts) -> LossBreakdown:
    n = sum(counts)
    k = max((len(b.linf_terms) for b in breakdowns), default=0)
    return LossBreakdown(
        total=sum(b.total * c for b, c in zip(breakdowns, counts)) / n,
        dice_term=sum(b.dice_term * c for b, c in zip(breakdowns, counts)) / n,
        bce_term=sum(b.bce_term * c for b, c in zip(breakdowns, counts)) / n,
        linf_terms=[
            sum(b.linf_terms[i] * c for b, c in zip(breakdowns, counts)) / n
            for i in range(k)
        ],
    )


def train(model: MASegNet, train_set: list[Phantom], val_set: list[Phantom],
          cfg: TrainConfig):
    """Train in place; returns (TrainLog, best parameter state).

    Raises EmptyDataset for an empty train or val split and NonFiniteLoss
    if the objective stops being finite.
    """
    cfg.validate()
    if not train_set or not val_set:
        raise EmptyDataset(
            f"need non-empty splits, got train={len(train_set)} val={len(val_set)}"
        )
    mode = model.config.mode
    depth = model.config.depth
    levels = 1 if mode == "plain" else depth
    weights = supervision_weights(levels)
    optim = Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                 eps=cfg.eps, weight_decay=cfg.weight_decay)

    # validation targets are fixed; precompute once
    val_targets = [_targets_for(p.strong_label, mode, depth, cfg) for p in val_set]

    log = TrainLog()
    best_state = model.state()
    best_val = math.inf
    best_epoch = 0
    best_dsc = 0.0
    val_totals = []

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg.lr, epoch, cfg.epochs, cfg.lr_decay)
        optim.lr = lr
        order = _epoch_order(cfg.seed, epoch, len(train_set))
        step_bds = []
        step_counts = []
        for start in range(0, len(order), cfg.batch_size):
            idxs = order[start: start + cfg.batch_size]
            images, strongs, auxes = [], [], []
            for i in idxs:
                ph = train_set[i]
                rng = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, 101, epoch, int(i)])
                )
                img, msk = augment_sample(ph.image, ph.strong_label, rng, cfg)
                strong, aux = _targets_for(msk, mode, depth, cfg)
                images.append(img)
                strongs.append(strong)
                auxes.append(aux)
            total, bd, _ = _batch_loss(model, images, strongs, auxes, weights)
            if not math.isfinite(bd.total):
                raise NonFiniteLoss(
                    f"non-finite loss {bd.total} at epoch {epoch}"
                )
            optim.zero_grad()
            backward(total)
            optim.step()
            step_bds.append(bd)
            step_counts.append(len(idxs))
        train_bd = _combine(step_bds, step_counts)
        log.rows.append(EpochRow(epoch, "train", train_bd, lr))

        val_bd, val_dsc = _evaluate_split(model, val_set, val_targets, weights)
        if not math.isfinite(val_bd.total):
            raise NonFiniteLoss(f"non-finite validation loss at epoch {epoch}")
        log.rows.append(EpochRow(epoch, "val", val_bd, lr, dsc=val_dsc))
        val_totals.append(val_bd.total)
        if val_bd.total < best_val:
            best_val = val_bd.total
            best_epoch = epoch
            best_dsc = val_dsc
            best_state = model.state()

    log.best_epoch = best_epoch
    log.best_val_dsc = best_dsc
    log.convergence_epoch = convergence_epoch(val_totals)
    return log, best_state


def _epoch_order(seed, epoch, n) -> list[int]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 55, epoch]))
    return [int(i) for i in rng.permutation(n)]


def _evaluate_split(model, phantoms, targets, weights):
    """Loss breakdown and mean slice DSC over an un-augmented split."""
    bds = []
    counts = []
    dscs = []
    batch = 16
    for start in range(0, len(phantoms), batch):
        chunk = phantoms[start: start + batch]
        chunk_t = targets[start: start + batch]
        images = [p.image for p in chunk]
        strongs = [t[0] for t in chunk_t]
        auxes = [t[1] for t in chunk_t]
        total, bd, outs = _batch_loss(model, images, strongs, auxes, weights)
        bds.append(bd)
        counts.append(len(chunk))
        pred = outs[0].data[:, 0] >= 0.5
        for j, p in enumerate(chunk):
            dscs.append(dsc(pred[j], p.strong_label))
    return _combine(bds, counts), float(np.mean(dscs))
