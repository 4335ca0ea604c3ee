"""Gaussian pseudo-label synthesis from binary strong labels.

A strong label's best-fit ellipse is turned into two orthogonal 1-D
Gaussian profiles over rotated coordinate grids; their element-wise
product is the pseudo label. Heatmaps are float64 arrays in memory and
persist as raw f32 (see io.py).
"""

from __future__ import annotations

import numpy as np

from .errors import IndivisibleDimensions, InvalidSigma
from .geometry import EllipseParams, fit_mask_ellipse

ROTATION_MODES = ("proper", "paper-literal")


def _check_mode(mode: str) -> None:
    if mode not in ROTATION_MODES:
        raise ValueError(f"rotation mode must be one of {ROTATION_MODES}, got {mode!r}")


def rotate_coordinate_grids(center, theta, width, height, mode="proper"):
    """Centered, rotated coordinate grids (Px, Py) for a width x height frame.

    The uniform grids hold column / row indices; they are shifted by the
    center and rotated by theta. "proper" applies the orthogonal rotation
    Px = Mx cos(t) + My sin(t), Py = My cos(t) - Mx sin(t); the
    "paper-literal" variant flips the sign of the shear term in Py
    (Py = My cos(t) + Mx sin(t)), which is not an orthogonal map but is
    kept selectable for fidelity experiments.
    """
    _check_mode(mode)
    if width < 1 or height < 1:
        raise ValueError(f"frame must be at least 1x1, got {width}x{height}")
    cx, cy = float(center[0]), float(center[1])
    ux = np.arange(width, dtype=np.float64)[None, :]
    uy = np.arange(height, dtype=np.float64)[:, None]
    mx = np.broadcast_to(ux - cx, (height, width))
    my = np.broadcast_to(uy - cy, (height, width))
    ct = np.cos(float(theta))
    st = np.sin(float(theta))
    px = mx * ct + my * st
    if mode == "proper":
        py = my * ct - mx * st
    else:
        py = my * ct + mx * st
    return px, py


def gaussianize(px, py, w, h, sigma_scale=1.0):
    """Peak-normalized Gaussian profiles of the rotated coordinates.

    Fx = exp(-Px^2 / (2 (s w)^2)), Fy = exp(-Py^2 / (2 (s h)^2)); both
    have peak value exactly 1 where the coordinate is zero.
    """
    if w <= 0 or h <= 0 or sigma_scale <= 0:
        raise InvalidSigma(
            f"w, h and sigma_scale must be positive, got w={w}, h={h}, "
            f"sigma_scale={sigma_scale}"
        )
    sx = sigma_scale * float(w)
    sy = sigma_scale * float(h)
    fx = np.exp(-np.square(px) / (2.0 * sx * sx))
    fy = np.exp(-np.square(py) / (2.0 * sy * sy))
    return fx, fy


def heatmap_from_params(params: EllipseParams, width, height, mode="proper",
                        sigma_scale=1.0) -> np.ndarray:
    """Joint Gaussian heatmap for explicit ellipse parameters."""
    px, py = rotate_coordinate_grids(
        (params.x, params.y), params.theta, width, height, mode
    )
    fx, fy = gaussianize(px, py, params.w, params.h, sigma_scale)
    return fx * fy


def generate_pseudo_label(strong_label, mode="proper", sigma_scale=1.0) -> np.ndarray:
    """Pseudo label P for a binary strong label.

    Fits the label's boundary with an ellipse and evaluates the joint
    Gaussian over the full frame. Values lie in (0, 1]. Propagates
    EmptyMask / TooFewPoints / DegenerateGeometry from the fit.
    """
    _check_mode(mode)
    s = np.asarray(strong_label)
    params = fit_mask_ellipse(s)
    h, w = s.shape
    return heatmap_from_params(params, w, h, mode, sigma_scale)


def max_pool_2x2(a: np.ndarray) -> np.ndarray:
    """2x2, stride-2 max pooling of a 2-D array (extents must be even)."""
    h, w = a.shape
    if h % 2 or w % 2:
        raise IndivisibleDimensions(f"cannot 2x2-pool a {h}x{w} array")
    return a.reshape(h // 2, 2, w // 2, 2).max(axis=(1, 3))


def build_pyramid(heatmap, depth: int) -> list[np.ndarray]:
    """Supervision pyramid: level n is the heatmap max-pooled n times.

    Returns levels 1..depth (the unpooled heatmap is not included).
    Raises IndivisibleDimensions unless both extents are divisible by
    2**depth.
    """
    if depth < 1:
        raise ValueError(f"pyramid depth must be >= 1, got {depth}")
    p = np.asarray(heatmap, dtype=np.float64)
    h, w = p.shape
    if h % (1 << depth) or w % (1 << depth):
        raise IndivisibleDimensions(
            f"{h}x{w} heatmap is not divisible by 2^{depth}"
        )
    levels = []
    cur = p
    for _ in range(depth):
        cur = max_pool_2x2(cur)
        levels.append(cur)
    return levels
