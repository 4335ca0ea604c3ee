"""Segmentation quality metrics and fold-level aggregation.

DSC and SEN are reported in percent; HD in pixels over boundary pixel
sets with the exact Euclidean metric (classic max-max variant, with
HD95 available as an optional extra).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyGroundTruth, EmptyMask, MissingFold, ShapeMismatch


def _pair(pred, gt, name):
    p = np.asarray(pred) != 0
    g = np.asarray(gt) != 0
    if p.shape != g.shape:
        raise ShapeMismatch(f"{name}: {p.shape} vs {g.shape}")
    return p, g


def dsc(pred, gt) -> float:
    """100 * 2|P & G| / (|P| + |G|); 100 when both masks are empty."""
    p, g = _pair(pred, gt, "dsc")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 100.0
    return 200.0 * int(np.logical_and(p, g).sum()) / denom


def sensitivity(pred, gt) -> float:
    """100 * |P & G| / |G|."""
    p, g = _pair(pred, gt, "sensitivity")
    total = int(g.sum())
    if total == 0:
        raise EmptyGroundTruth("sensitivity undefined for empty ground truth")
    return 100.0 * int(np.logical_and(p, g).sum()) / total


def boundary_pixels(mask) -> np.ndarray:
    """Foreground pixels with a background 4-neighbor (image border
    counts as background); returned as an (N, 2) array of (row, col)."""
    m = np.asarray(mask) != 0
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    rows, cols = np.nonzero(m & ~interior)
    return np.column_stack((rows, cols))


def _directed_hd(from_pts, to_dist) -> float:
    return float(to_dist[from_pts[:, 0], from_pts[:, 1]].max())


def hausdorff(pred, gt) -> float:
    """Symmetric Hausdorff distance between boundary pixel sets,
    accelerated by exact Euclidean distance transforms."""
    p, g = _pair(pred, gt, "hausdorff")
    if not p.any() or not g.any():
        raise EmptyMask("hausdorff requires two non-empty masks")
    bp = boundary_pixels(p)
    bg = boundary_pixels(g)
    shape = p.shape
    gb_mask = np.zeros(shape, dtype=bool)
    gb_mask[bg[:, 0], bg[:, 1]] = True
    pb_mask = np.zeros(shape, dtype=bool)
    pb_mask[bp[:, 0], bp[:, 1]] = True
    dist_to_g = ndimage.distance_transform_edt(~gb_mask)
    dist_to_p = ndimage.distance_transform_edt(~pb_mask)
    return max(_directed_hd(bp, dist_to_g), _directed_hd(bg, dist_to_p))


def hausdorff95(pred, gt) -> float:
    """95th-percentile variant (max over both directions); informational
    only, not part of the acceptance surface."""
    p, g = _pair(pred, gt, "hausdorff95")
    if not p.any() or not g.any():
        raise EmptyMask("hausdorff95 requires two non-empty masks")
    bp = boundary_pixels(p)
    bg = boundary_pixels(g)
    d = np.sqrt(
        ((bp[:, None, :] - bg[None, :, :]).astype(np.float64) ** 2).sum(axis=2)
    )
    return max(
        float(np.percentile(d.min(axis=1), 95)),
        float(np.percentile(d.min(axis=0), 95)),
    )


@dataclass
class MetricsRecord:
    """Per-volume metrics plus their mean and spread (sample std)."""

    dsc_values: list[float] = field(default_factory=list)
    sen_values: list[float] = field(default_factory=list)
    hd_values: list[float] = field(default_factory=list)

    @property
    def dsc_mean(self) -> float:
        return float(np.mean(self.dsc_values))

    @property
    def sen_mean(self) -> float:
        return float(np.mean(self.sen_values))

    @property
    def hd_mean(self) -> float:
        return float(np.mean(self.hd_values))

    def _std(self, values) -> float:
        if len(values) < 2:
            return 0.0
        return float(np.std(values, ddof=1))

    def summary(self) -> dict:
        return {
            "dsc_mean": self.dsc_mean,
            "dsc_std": self._std(self.dsc_values),
            "sen_mean": self.sen_mean,
            "sen_std": self._std(self.sen_values),
            "hd_mean": self.hd_mean,
            "hd_std": self._std(self.hd_values),
            "n": len(self.dsc_values),
        }

    def formatted(self) -> dict:
        s = self.summary()
        return {
            "DSC": f"{s['dsc_mean']:.1f}±{s['dsc_std']:.1f}",
            "SEN": f"{s['sen_mean']:.1f}±{s['sen_std']:.1f}",
            "HD": f"{s['hd_mean']:.2f}±{s['hd_std']:.2f}",
        }


def volume_metrics(pred_slices, gt_slices, frame_diagonal=None) -> dict:
    """Metrics for one volume: DSC/SEN over the stacked voxels, HD as the
    worst per-slice boundary HD. A slice where exactly one mask is empty
    contributes the frame diagonal as its HD (documented convention)."""
    preds = [np.asarray(p) != 0 for p in pred_slices]
    gts = [np.asarray(g) != 0 for g in gt_slices]
    stack_p = np.stack(preds)
    stack_g = np.stack(gts)
    if frame_diagonal is None:
        h, w = preds[0].shape
        frame_diagonal = float(np.hypot(h - 1, w - 1))
    hd_vals = []
    for p, g in zip(preds, gts):
        if not p.any() and not g.any():
            hd_vals.append(0.0)
        elif not p.any() or not g.any():
            hd_vals.append(frame_diagonal)
        else:
            hd_vals.append(hausdorff(p, g))
    return {
        "dsc": dsc(stack_p, stack_g),
        "sen": sensitivity(stack_p, stack_g),
        "hd": float(max(hd_vals)),
    }


def evaluate_volumes(volume_pairs) -> MetricsRecord:
    """MetricsRecord over (pred_slices, gt_slices) volume pairs."""
    rec = MetricsRecord()
    for pred_slices, gt_slices in volume_pairs:
        m = volume_metrics(pred_slices, gt_slices)
        rec.dsc_values.append(m["dsc"])
        rec.sen_values.append(m["sen"])
        rec.hd_values.append(m["hd"])
    return rec


def aggregate_folds(records) -> dict:
    """Cross-fold mean +- sample std of the fold means."""
    records = list(records)
    if not records:
        raise MissingFold("no fold records to aggregate")
    out = {}
    for key in ("dsc", "sen", "hd"):
        means = [getattr(r, f"{key}_mean") for r in records]
        out[f"{key}_mean"] = float(np.mean(means))
        out[f"{key}_std"] = float(np.std(means, ddof=1)) if len(means) > 1 else 0.0
    out["folds"] = len(records)
    return out
