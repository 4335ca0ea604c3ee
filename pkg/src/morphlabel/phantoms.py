"""Synthetic ambiguous-boundary phantoms and volume-level k-fold splits.

Each phantom is a low-contrast ellipse over a noisy background with a
few distractor blobs. The ``ambiguity`` knob in [0, 1] scales boundary
blur, noise, and the random dilation/erosion applied to the strong
label (emulating observer variability). Generation is a pure function
of (seed, size, ambiguity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, InvalidSize, TooFewVolumes
from .geometry import EllipseParams, fit_mask_ellipse, rasterize_ellipse

VALID_SIZES = (64, 128, 256)
SLICES_PER_VOLUME = 8
_RETRIES = 8


@dataclass
class Phantom:
    image: np.ndarray        # float64, zero mean / unit variance
    strong_label: np.ndarray  # uint8 {0,1}
    true_params: EllipseParams
    seed: int


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _draw_params(rng, size) -> EllipseParams:
    w = rng.uniform(0.14, 0.24) * size
    h = rng.uniform(0.62, 1.0) * w
    theta = rng.uniform(0.0, math.pi)
    margin = w + 3.0
    x = rng.uniform(margin, size - 1 - margin)
    y = rng.uniform(margin, size - 1 - margin)
    return EllipseParams.canonical(x, y, w, h, theta)


def _signed_distance(mask: np.ndarray) -> np.ndarray:
    """Positive outside the region, negative inside, in pixels."""
    inside = mask != 0
    d_out = ndimage.distance_transform_edt(~inside)
    d_in = ndimage.distance_transform_edt(inside)
    return d_out - d_in


def _smooth_field(rng, size, scale, clip) -> np.ndarray:
    """Smooth random field with RMS ~= scale, hard-clipped to |field| <= clip."""
    coarse = rng.normal(size=(6, 6))
    field = ndimage.zoom(coarse, size / 6.0, order=3)[:size, :size]
    if field.shape != (size, size):
        field = np.pad(
            field,
            ((0, size - field.shape[0]), (0, size - field.shape[1])),
            mode="edge",
        )
    rms = float(np.sqrt(np.mean(field * field)))
    if rms == 0.0:
        return np.zeros((size, size))
    return np.clip(field * (scale / rms), -clip, clip)


def perturb_label(exact_mask, ambiguity, rng) -> np.ndarray:
    """Strong label with the boundary locally dilated/eroded by up to
    ceil(3 * ambiguity) pixels."""
    if ambiguity <= 0.0:
        return np.asarray(exact_mask, dtype=np.uint8).copy()
    max_px = math.ceil(3.0 * ambiguity)
    scale = rng.uniform(0.35, 0.8) * max_px
    field = _smooth_field(rng, exact_mask.shape[0], scale, max_px)
    sd = _signed_distance(exact_mask)
    return (sd <= field).astype(np.uint8)


def _distractor_mask(rng, size, main: EllipseParams) -> np.ndarray:
    for _ in range(20):
        w = rng.uniform(0.05, 0.11) * size
        h = rng.uniform(0.6, 1.0) * w
        theta = rng.uniform(0.0, math.pi)
        x = rng.uniform(w + 1, size - 2 - w)
        y = rng.uniform(w + 1, size - 2 - w)
        if math.hypot(x - main.x, y - main.y) > main.w + w + 0.05 * size:
            return rasterize_ellipse(
                EllipseParams.canonical(x, y, w, h, theta), size, size
            )
    return np.zeros((size, size), dtype=np.uint8)


def _render_image(rng, size, ambiguity, exact_mask, main) -> np.ndarray:
    contrast = rng.uniform(0.05, 0.2)
    img = contrast * exact_mask.astype(np.float64)
    for _ in range(int(rng.integers(2, 5))):
        img += rng.uniform(0.4, 1.0) * contrast * _distractor_mask(rng, size, main)
    blur_sigma = 0.4 + 2.4 * ambiguity
    img = ndimage.gaussian_filter(img, blur_sigma)
    noise_sigma = 0.55 * ambiguity * contrast
    img += rng.normal(0.0, 1.0, size=img.shape) * noise_sigma
    return normalize_image(img)


def normalize_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    std = img.std()
    if std < 1e-12:
        return img - img.mean()
    return (img - img.mean()) / std


def _phantom_from_params(params, seed, size, ambiguity) -> Phantom:
    for attempt in range(_RETRIES):
        rng = _rng(9001, seed, attempt)
        label = perturb_label(rasterize_ellipse(params, size, size), ambiguity, rng)
        try:
            if label.sum() < 12:
                raise DataError("label too small")
            fit_mask_ellipse(label)  # must admit an ellipse fit
        except DataError:
            continue
        image = _render_image(rng, size, ambiguity, label, params)
        return Phantom(image=image, strong_label=label, true_params=params, seed=seed)
    raise DataError(
        f"could not generate a fittable phantom for seed {seed} after {_RETRIES} tries"
    )


def gen_phantom(seed: int, size: int, ambiguity: float) -> Phantom:
    """Single phantom; deterministic in (seed, size, ambiguity)."""
    if size not in VALID_SIZES:
        raise InvalidSize(f"size must be one of {VALID_SIZES}, got {size}")
    if not 0.0 <= ambiguity <= 1.0:
        raise DataError(f"ambiguity must lie in [0, 1], got {ambiguity}")
    params = _draw_params(_rng(4242, seed), size)
    return _phantom_from_params(params, seed, size, ambiguity)


def relabel(phantom: Phantom, observer_seed: int, ambiguity: float) -> np.ndarray:
    """Alternative observer's strong label over the same true ellipse
    (paired-label analog of an intra/inter-observer consistency check)."""
    size = phantom.strong_label.shape[0]
    exact = rasterize_ellipse(phantom.true_params, size, size)
    return perturb_label(exact, ambiguity, _rng(5151, phantom.seed, observer_seed))


def gen_volume(seed: int, size: int, ambiguity: float,
               n_slices: int = SLICES_PER_VOLUME) -> list[Phantom]:
    """Volume = consecutive slices sharing a slowly drifting ellipse."""
    if size not in VALID_SIZES:
        raise InvalidSize(f"size must be one of {VALID_SIZES}, got {size}")
    rng = _rng(8080, seed)
    params = _draw_params(rng, size)
    slices = []
    margin_lo = 0.08 * size
    for j in range(n_slices):
        slices.append(
            _phantom_from_params(params, seed * 1000 + j, size, ambiguity)
        )
        x = params.x + rng.normal(0.0, 0.008 * size)
        y = params.y + rng.normal(0.0, 0.008 * size)
        w = float(np.clip(params.w * (1.0 + rng.normal(0.0, 0.03)),
                          0.12 * size, 0.26 * size))
        h = float(np.clip(params.h * (1.0 + rng.normal(0.0, 0.03)),
                          margin_lo, w))
        theta = (params.theta + rng.normal(0.0, 0.06)) % math.pi
        lim = w + 3.0
        x = float(np.clip(x, lim, size - 1 - lim))
        y = float(np.clip(y, lim, size - 1 - lim))
        params = EllipseParams.canonical(x, y, w, h, theta)
    return slices


def kfold_split(n_volumes: int, k: int, seed: int) -> list[dict]:
    """Deterministic volume-level folds with train/val/test in the
    15/5/10 proportions (val = 1/4 of the non-test volumes, at least 1).

    Returns one dict per fold: {"test": [...], "train": [...], "val": [...]}.
    """
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    if n_volumes < k:
        raise TooFewVolumes(f"{n_volumes} volumes cannot fill {k} folds")
    order = list(_rng(1313, seed).permutation(n_volumes))
    chunks = [sorted(int(v) for v in c) for c in np.array_split(order, k)]
    folds = []
    for i, test in enumerate(chunks):
        rest = sorted(v for j, c in enumerate(chunks) if j != i for v in c)
        if len(rest) < 2:
            raise TooFewVolumes(
                f"fold {i} leaves {len(rest)} volumes for train+val"
            )
        n_val = max(1, round(len(rest) / 4))
        shuffled = list(_rng(1717, seed, i).permutation(rest))
        val = sorted(int(v) for v in shuffled[:n_val])
        train = sorted(int(v) for v in shuffled[n_val:])
        folds.append({"test": test, "train": train, "val": val})
    return folds
