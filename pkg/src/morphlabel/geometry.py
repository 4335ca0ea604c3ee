"""Mask boundary extraction and direct least-squares ellipse fitting.

Coordinate convention used throughout the package: a pixel is addressed
as (col, row) = (x, y), rows grow downward, columns grow rightward, and
angles are measured from the +x (column) axis toward the +y (row) axis.
``w`` and ``h`` are SEMI-axes (w >= h), ``theta`` lies in [0, pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateGeometry,
    EmptyMask,
    NotAnEllipse,
    OutOfFrame,
    TooFewPoints,
)

# Moore neighborhood in clockwise screen order (row grows downward),
# starting at the west neighbor: W, NW, N, NE, E, SE, S, SW.
_MOORE = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))


@dataclass(frozen=True)
class ConicCoeffs:
    """Unit-norm coefficients of the conic a*x^2 + b*x*y + c*y^2 + d*x + e*y + f = 0."""

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    @property
    def discriminant(self) -> float:
        return 4.0 * self.a * self.c - self.b * self.b

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d, self.e, self.f])

    @classmethod
    def from_array(cls, v) -> "ConicCoeffs":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (6,):
            raise ValueError(f"expected 6 coefficients, got shape {v.shape}")
        norm = float(np.linalg.norm(v))
        if norm == 0.0 or not np.isfinite(norm):
            raise DegenerateGeometry("conic coefficient vector is zero or non-finite")
        v = v / norm
        if v[0] < 0.0 or (v[0] == 0.0 and v[2] < 0.0):
            v = -v
        return cls(*(float(t) for t in v))


@dataclass(frozen=True)
class EllipseParams:
    """Center (x, y), semi-axes w >= h, rotation theta in [0, pi)."""

    x: float
    y: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        if not (self.w >= self.h > 0.0):
            raise ValueError(f"require w >= h > 0, got w={self.w}, h={self.h}")
        if not (0.0 <= self.theta < math.pi):
            raise ValueError(f"theta must lie in [0, pi), got {self.theta}")

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "theta": self.theta}

    @classmethod
    def from_dict(cls, d: dict) -> "EllipseParams":
        return cls(float(d["x"]), float(d["y"]), float(d["w"]), float(d["h"]), float(d["theta"]))

    @classmethod
    def canonical(cls, x, y, w, h, theta) -> "EllipseParams":
        """Build params with the w >= h, theta in [0, pi) convention enforced."""
        if w < h:
            w, h = h, w
            theta = theta + math.pi / 2.0
        theta = theta % math.pi
        if theta == math.pi:  # fmod artifact for inputs just below 0
            theta = 0.0
        return cls(float(x), float(y), float(w), float(h), float(theta))


def _as_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    return m != 0


def _is_border(comp: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbor (image
    border counts as background)."""
    padded = np.pad(comp, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return comp & ~interior


def extract_boundary(mask) -> np.ndarray:
    """Trace the border of the largest 8-connected foreground component.

    Returns an (N, 2) int array of (col, row) pixel coordinates ordered
    by clockwise Moore-neighbor tracing from the topmost-leftmost border
    pixel. Each border pixel appears once.

    Raises EmptyMask if the mask has no foreground pixel.
    """
    m = _as_mask(mask)
    if not m.any():
        raise EmptyMask("mask contains no foreground pixel")

    labels, count = ndimage.label(m, structure=np.ones((3, 3), dtype=bool))
    if count > 1:
        sizes = ndimage.sum_labels(m, labels, index=np.arange(1, count + 1))
        comp = labels == (int(np.argmax(sizes)) + 1)
    else:
        comp = m

    h, w = comp.shape
    flat_start = int(np.argmax(comp))
    r0, c0 = divmod(flat_start, w)
    if comp.sum() == 1:
        return np.array([[c0, r0]], dtype=np.int64)

    def fg(r, c):
        return 0 <= r < h and 0 <= c < w and comp[r, c]

    start = (r0, c0)
    back = (r0, c0 - 1)  # west of the topmost-leftmost pixel is background
    first_back = back
    cur = start
    trace = [start]
    max_steps = 4 * int(comp.sum()) + 8
    for _ in range(max_steps):
        offs_idx = _MOORE.index((back[0] - cur[0], back[1] - cur[1]))
        nxt = None
        nxt_back = back
        for k in range(1, 9):
            dr, dc = _MOORE[(offs_idx + k) % 8]
            cand = (cur[0] + dr, cur[1] + dc)
            if fg(*cand):
                nxt = cand
                break
            nxt_back = cand
        if nxt is None:  # isolated pixel, handled above; defensive
            break
        if nxt == start and nxt_back == first_back:  # Jacob's stopping criterion
            break
        trace.append(nxt)
        back = nxt_back
        cur = nxt

    border = _is_border(comp)
    seen = set()
    out = []
    for r, c in trace:
        if (r, c) in seen or not border[r, c]:
            continue
        seen.add((r, c))
        out.append((c, r))
    return np.array(out, dtype=np.int64)


def _cubic_real_roots(c2: float, c1: float, c0: float) -> list[float]:
    """Real roots of lambda^3 - c2 lambda^2 + c1 lambda - c0 = 0, ascending.

    Closed form: one root by Cardano (trigonometric form when all three
    are real), the rest from the deflated quadratic.
    """
    # depressed cubic t^3 + p t + q = 0 with lambda = t + c2/3
    s = c2 / 3.0
    p = c1 - 3.0 * s * s
    q = -c0 + c1 * s - 2.0 * s**3
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    if p == 0.0 and q == 0.0:
        t1 = 0.0
    elif disc > 0.0:
        u = -q / 2.0 + math.sqrt(disc)
        v = -q / 2.0 - math.sqrt(disc)
        t1 = math.copysign(abs(u) ** (1 / 3), u) + math.copysign(abs(v) ** (1 / 3), v)
    else:
        m = 2.0 * math.sqrt(-p / 3.0)
        arg = min(1.0, max(-1.0, 3.0 * q / (p * m)))
        t1 = m * math.cos(math.acos(arg) / 3.0)
    roots = [t1]
    radicand = -3.0 * t1 * t1 - 4.0 * p  # from (t - t1)(t^2 + t1 t + p + t1^2)
    if radicand >= 0.0:
        root = math.sqrt(radicand)
        roots.extend([(-t1 - root) / 2.0, (-t1 + root) / 2.0])
    return sorted(t + s for t in roots)


def _eigvec_for(mat: np.ndarray, lam: float) -> np.ndarray:
    """Unit eigenvector of a 3x3 matrix for eigenvalue lam.

    Closed-form null vector from row cross products, refined by one pass
    of inverse iteration.
    """
    a = mat - lam * np.eye(3)
    crosses = [np.cross(a[i], a[j]) for i, j in ((0, 1), (0, 2), (1, 2))]
    norms = [float(np.linalg.norm(c)) for c in crosses]
    k = int(np.argmax(norms))
    if norms[k] < 1e-300:
        v = np.array([1.0, 1.0, 1.0])
    else:
        v = crosses[k] / norms[k]
    scale = float(np.max(np.abs(mat))) or 1.0
    try:
        refined = np.linalg.solve(a + 1e-12 * scale * np.eye(3), v)
        n = float(np.linalg.norm(refined))
        if np.isfinite(n) and n > 0.0:
            v = refined / n
    except np.linalg.LinAlgError:
        pass
    return v


def fit_ellipse_direct(points) -> ConicCoeffs:
    """Fit an ellipse through (col, row) points, minimizing algebraic
    distance subject to the ellipse constraint 4ac - b^2 > 0.

    Split-design-matrix formulation: the quadratic and linear monomials
    are separated, the problem reduces to a 3x3 eigenproblem solved in
    closed form, and the eigenvector satisfying the constraint is kept.

    Raises TooFewPoints (< 5 points) or DegenerateGeometry (no ellipse).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"points must be (N, 2), got shape {pts.shape}")
    if pts.shape[0] < 5:
        raise TooFewPoints(f"need at least 5 points, got {pts.shape[0]}")

    x = pts[:, 0]
    y = pts[:, 1]
    d1 = np.column_stack((x * x, x * y, y * y))
    d2 = np.column_stack((x, y, np.ones_like(x)))
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError:
        raise DegenerateGeometry("linear scatter matrix is singular") from None
    m = s1 + s2 @ t
    m = np.vstack((m[2] / 2.0, -m[1], m[0] / 2.0))  # premultiplied by inv(C1)

    scale = float(np.max(np.abs(m)))
    if not np.isfinite(scale) or scale == 0.0:
        raise DegenerateGeometry("degenerate reduced scatter matrix")
    ms = m / scale
    c2 = float(np.trace(ms))
    c1 = (
        ms[0, 0] * ms[1, 1] - ms[0, 1] * ms[1, 0]
        + ms[0, 0] * ms[2, 2] - ms[0, 2] * ms[2, 0]
        + ms[1, 1] * ms[2, 2] - ms[1, 2] * ms[2, 1]
    )
    c0 = float(np.linalg.det(ms))

    for lam in _cubic_real_roots(c2, float(c1), c0):
        v = _eigvec_for(ms, lam)
        if 4.0 * v[0] * v[2] - v[1] * v[1] > 0.0:
            a2 = t @ v
            return ConicCoeffs.from_array(np.concatenate((v, a2)))
    raise DegenerateGeometry("no eigenvector satisfies the ellipse constraint")


def conic_to_ellipse(coeffs: ConicCoeffs, *, semi_axis_pad: float = 0.0) -> EllipseParams:
    """Convert conic coefficients to center / semi-axes / rotation.

    ``semi_axis_pad`` is added to both recovered semi-axes. A conic fitted
    to traced border pixels of a rasterized mask underestimates the
    underlying region by about half a pixel (border pixel centers lie
    inside the region); pass 0.5 to compensate when converting such fits.
    The default leaves the conic's own geometry untouched.

    Raises NotAnEllipse if 4ac - b^2 <= 0 or the conic has no real points.
    """
    a, b, c, d, e, f = coeffs.as_array()
    if 4.0 * a * c - b * b <= 0.0:
        raise NotAnEllipse(f"discriminant 4ac - b^2 = {4 * a * c - b * b:g} <= 0")
    if a < 0.0:
        a, b, c, d, e, f = -a, -b, -c, -d, -e, -f

    # stationary point of the quadratic form
    det = 4.0 * a * c - b * b
    x0 = (b * e - 2.0 * c * d) / det
    y0 = (b * d - 2.0 * a * e) / det
    # conic value at the center; (p-c)^T Q (p-c) = -f0 on the ellipse
    f0 = a * x0 * x0 + b * x0 * y0 + c * y0 * y0 + d * x0 + e * y0 + f
    s = -f0
    if s <= 0.0:
        raise NotAnEllipse("conic has no real points")

    # eigen-decomposition of Q = [[a, b/2], [b/2, c]]
    half = 0.5 * (a + c)
    spread = math.hypot(0.5 * (a - c), 0.5 * b)
    lam_min = half - spread
    lam_max = half + spread
    if lam_min <= 0.0:
        raise NotAnEllipse("quadratic form is not positive definite")

    w = math.sqrt(s / lam_min) + semi_axis_pad
    h = math.sqrt(s / lam_max) + semi_axis_pad
    # eigenvector for lam_min (major axis direction)
    bb = 0.5 * b
    v = (bb, lam_min - a)
    if math.hypot(*v) < 1e-12 * max(abs(a), abs(c), abs(bb), 1e-300):
        v = (lam_min - c, bb)
    if math.hypot(*v) == 0.0:
        theta = 0.0
    else:
        theta = math.atan2(v[1], v[0])
    return EllipseParams.canonical(x0, y0, w, h, theta)


def ellipse_to_conic(params: EllipseParams) -> ConicCoeffs:
    """Analytic inverse of conic_to_ellipse (unit-norm coefficients)."""
    ct = math.cos(params.theta)
    st = math.sin(params.theta)
    iw2 = 1.0 / (params.w * params.w)
    ih2 = 1.0 / (params.h * params.h)
    a = ct * ct * iw2 + st * st * ih2
    b = 2.0 * ct * st * (iw2 - ih2)
    c = st * st * iw2 + ct * ct * ih2
    d = -(2.0 * a * params.x + b * params.y)
    e = -(b * params.x + 2.0 * c * params.y)
    f = (
        a * params.x * params.x
        + b * params.x * params.y
        + c * params.y * params.y
        - 1.0
    )
    return ConicCoeffs.from_array([a, b, c, d, e, f])


def ellipse_frame_offsets(params: EllipseParams, cols, rows):
    """Offsets of pixel centers in the ellipse's own frame.

    Returns (px, py) such that a point is inside the ellipse iff
    (px/w)^2 + (py/h)^2 <= 1. Shared by rasterization and inclusion tests.
    """
    dx = np.asarray(cols, dtype=np.float64) - params.x
    dy = np.asarray(rows, dtype=np.float64) - params.y
    ct = math.cos(params.theta)
    st = math.sin(params.theta)
    return dx * ct + dy * st, dy * ct - dx * st


def rasterize_ellipse(params: EllipseParams, width: int, height: int) -> np.ndarray:
    """Binary mask whose foreground pixels have centers inside the ellipse.

    Raises OutOfFrame if the ellipse bounding box misses every pixel center.
    """
    ct = math.cos(params.theta)
    st = math.sin(params.theta)
    ex = math.hypot(params.w * ct, params.h * st)
    ey = math.hypot(params.w * st, params.h * ct)
    if (
        params.x + ex < 0.0
        or params.x - ex > width - 1
        or params.y + ey < 0.0
        or params.y - ey > height - 1
    ):
        raise OutOfFrame(
            f"ellipse centered at ({params.x:g}, {params.y:g}) misses the "
            f"{width}x{height} frame"
        )
    cols = np.arange(width, dtype=np.float64)[None, :]
    rows = np.arange(height, dtype=np.float64)[:, None]
    px, py = ellipse_frame_offsets(params, cols, rows)
    q = (px / params.w) ** 2 + (py / params.h) ** 2
    return (q <= 1.0).astype(np.uint8)


def fit_mask_ellipse(mask, *, semi_axis_pad: float = 0.5) -> EllipseParams:
    """Boundary-trace a mask and return its best-fit ellipse parameters.

    Applies the half-pixel raster compensation by default since the input
    is a pixelated region rather than exact boundary samples.
    """
    return conic_to_ellipse(
        fit_ellipse_direct(extract_boundary(mask)), semi_axis_pad=semi_axis_pad
    )
