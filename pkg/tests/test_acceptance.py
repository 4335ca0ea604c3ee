"""Acceptance suite: one test per criterion, each printing a PASS/FAIL
line with its measured numbers. Criteria AC-1..AC-5 are cheap; AC-6
trains the full ablation (bounded at 30 minutes); AC-7 checks bytewise
reproducibility of an end-to-end ablation.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
report lines.
"""

import json
import math
import time

import numpy as np
import pytest

from morphlabel import io
from morphlabel.autodiff import Tensor
from morphlabel.cli import main as cli_main
from morphlabel.geometry import (
    EllipseParams,
    conic_to_ellipse,
    extract_boundary,
    fit_ellipse_direct,
    rasterize_ellipse,
)
from morphlabel.gradcheck import (
    REL_TOL,
    composite_ma_check,
    primitive_checks,
)
from morphlabel.losses import (
    bce_loss,
    composite_loss,
    dice_loss,
    linf_loss,
    supervision_weights,
)
from morphlabel.metrics import boundary_pixels, dsc, hausdorff, sensitivity
from morphlabel.pseudolabel import (
    build_pyramid,
    heatmap_from_params,
    rotate_coordinate_grids,
)

RASTER_PAD = 0.5


def report(name, ok, detail):
    print(f"{name}: {'PASS' if ok else 'FAIL'} ({detail})")


# ---------------------------------------------------------------------------
# AC-1 ellipse recovery


def test_ac1_ellipse_recovery():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    failures = {"center": 0, "axes": 0, "theta": 0}
    worst = {"center": 0.0, "axes": 0.0, "theta": 0.0}
    for _ in range(200):
        w = rng.uniform(10.0, 60.0)
        h = rng.uniform(10.0, 60.0)
        if w < h:
            w, h = h, w
        theta = rng.uniform(0.0, math.pi)
        ex = math.hypot(w * math.cos(theta), h * math.sin(theta))
        ey = math.hypot(w * math.sin(theta), h * math.cos(theta))
        x = rng.uniform(ex + 2.0, 255.0 - ex - 2.0)
        y = rng.uniform(ey + 2.0, 255.0 - ey - 2.0)
        params = EllipseParams(x, y, w, h, theta)
        mask = rasterize_ellipse(params, 256, 256)
        rec = conic_to_ellipse(
            fit_ellipse_direct(extract_boundary(mask)), semi_axis_pad=RASTER_PAD
        )
        c_err = math.hypot(rec.x - x, rec.y - y)
        a_err = max(abs(rec.w - w) / w, abs(rec.h - h) / h)
        t_err = abs(rec.theta - theta) % math.pi
        t_err = math.degrees(min(t_err, math.pi - t_err))
        worst["center"] = max(worst["center"], c_err)
        worst["axes"] = max(worst["axes"], a_err)
        failures["center"] += c_err > 0.5
        failures["axes"] += a_err > 0.02
        if w - h >= 2.0:  # axis-swap tolerance below this gap
            worst["theta"] = max(worst["theta"], t_err)
            failures["theta"] += t_err > 1.0
    elapsed = time.perf_counter() - t0
    ok = elapsed < 10.0 and not any(failures.values())
    report(
        "AC-1",
        ok,
        f"200 ellipses in {elapsed:.1f}s; worst center {worst['center']:.3f}px, "
        f"axes {worst['axes'] * 100:.2f}%, theta {worst['theta']:.2f}deg; "
        f"violations {failures}",
    )
    assert elapsed < 10.0
    assert failures["center"] == 0
    assert failures["axes"] == 0
    # Known limitation: the 1-degree theta bound for |w-h| >= 2 px sits
    # below the integer-contour quantization floor (a geometric-distance
    # refit shows the same tail), so this clause fails for ~1% of draws.
    assert failures["theta"] == 0


# ---------------------------------------------------------------------------
# AC-2 pseudo-label algebra


def test_ac2_pseudo_label_algebra():
    rng = np.random.default_rng(1)
    worst_identity = 0.0
    worst_symmetry = 0.0
    peaks_ok = True
    for _ in range(50):
        cx = int(rng.integers(48, 208))
        cy = int(rng.integers(48, 208))
        params = EllipseParams.canonical(
            cx, cy, rng.uniform(6, 40), rng.uniform(4, 40), rng.uniform(0, math.pi)
        )
        p = heatmap_from_params(params, 256, 256, "proper")
        px, py = rotate_coordinate_grids((params.x, params.y), params.theta,
                                         256, 256, "proper")
        q = (px / params.w) ** 2 + (py / params.h) ** 2
        worst_identity = max(worst_identity, np.abs(p - np.exp(-q / 2.0)).max())
        peaks_ok &= p[cy, cx] >= 0.999
        for _ in range(10):
            dx = int(rng.integers(-20, 21))
            dy = int(rng.integers(-20, 21))
            worst_symmetry = max(
                worst_symmetry,
                abs(p[cy + dy, cx + dx] - p[cy - dy, cx - dx]),
            )
    # paper-literal mode reproduces the printed step-5 formula
    literal_ok = True
    for theta in (0.0, math.pi / 4, math.pi / 2):
        px, py = rotate_coordinate_grids((5.0, 6.0), theta, 16, 16, "paper-literal")
        ux = np.broadcast_to(np.arange(16.0)[None, :], (16, 16))
        uy = np.broadcast_to(np.arange(16.0)[:, None], (16, 16))
        mx, my = ux - 5.0, uy - 6.0
        literal_ok &= np.abs(px - (mx * math.cos(theta) + my * math.sin(theta))).max() == 0.0
        literal_ok &= np.abs(py - (my * math.cos(theta) + mx * math.sin(theta))).max() == 0.0
    ok = (worst_identity < 1e-12 and peaks_ok and worst_symmetry < 1e-9
          and literal_ok)
    report(
        "AC-2",
        ok,
        f"identity err {worst_identity:.2e}, symmetry err {worst_symmetry:.2e}, "
        f"on-lattice peaks >= 0.999: {peaks_ok}, paper-literal exact: {literal_ok}",
    )
    assert worst_identity < 1e-12
    assert peaks_ok
    assert worst_symmetry < 1e-9
    assert literal_ok


# ---------------------------------------------------------------------------
# AC-3 loss oracles


def _dice_oracle(pred, target, eps=1e-6):
    inter = p_sum = t_sum = 0.0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            inter += pred[i, j] * target[i, j]
            p_sum += pred[i, j]
            t_sum += target[i, j]
    return 1.0 - (2.0 * inter + eps) / (p_sum + t_sum + eps)


def _bce_oracle(pred, target, clamp=1e-7):
    total = 0.0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p = min(max(pred[i, j], clamp), 1.0 - clamp)
            total -= target[i, j] * math.log(p) + (1 - target[i, j]) * math.log(1 - p)
    return total / pred.size


def _linf_oracle(x, p):
    return max(
        abs(x[i, j] - p[i, j])
        for i in range(x.shape[0])
        for j in range(x.shape[1])
    )


def test_ac3_loss_oracles():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        pred = rng.random((8, 8))
        target = (rng.random((8, 8)) > 0.5).astype(float)
        pseudo = rng.random((8, 8))
        worst = max(worst, abs(dice_loss(pred, target).item()
                               - _dice_oracle(pred, target)))
        worst = max(worst, abs(bce_loss(pred, target).item()
                               - _bce_oracle(pred, target)))
        worst = max(worst, abs(linf_loss(pred, pseudo).item()
                               - _linf_oracle(pred, pseudo)))
        pyramid = build_pyramid(pseudo, 1)
        weights = supervision_weights(2)
        outs = [Tensor(pred), Tensor(rng.random((4, 4)))]
        total, _ = composite_loss(outs, target, pyramid, weights)
        oracle = weights[0] * (_dice_oracle(pred, target) + _bce_oracle(pred, target))
        oracle += weights[1] * _linf_oracle(outs[1].data, pyramid[0])
        worst = max(worst, abs(total.item() - oracle))
    weights_ok = True
    for n in range(1, 7):
        w = supervision_weights(n)
        weights_ok &= abs(w.sum() - 1.0) < 1e-12
        weights_ok &= all(abs(w[k] - 2 * w[k + 1]) < 1e-12 for k in range(n - 1))
    ok = worst < 1e-9 and weights_ok
    report("AC-3", ok, f"worst oracle deviation {worst:.2e} over 100 instances; "
                       f"supervision weights sum/halving: {weights_ok}")
    assert worst < 1e-9
    assert weights_ok


# ---------------------------------------------------------------------------
# AC-4 gradient correctness


def test_ac4_gradient_correctness():
    t0 = time.perf_counter()
    worst = {}
    for seed in range(20):
        for name, err in primitive_checks(seed):
            worst[name] = max(worst.get(name, 0.0), err)
    comp = max(composite_ma_check(seed) for seed in range(20))
    worst["composite_loss_through_ma_block"] = comp
    elapsed = time.perf_counter() - t0
    worst_err = max(worst.values())
    ok = worst_err <= REL_TOL and elapsed < 60.0
    report("AC-4", ok, f"{len(worst)} checks x 20 seeds, max rel err "
                       f"{worst_err:.2e}, {elapsed:.1f}s")
    assert elapsed < 60.0
    bad = {k: v for k, v in worst.items() if v > REL_TOL}
    assert not bad, f"gradient failures: {bad}"


# ---------------------------------------------------------------------------
# AC-5 metric oracles


def _random_mask(rng, side=64):
    m = np.zeros((side, side), dtype=np.uint8)
    for _ in range(int(rng.integers(1, 4))):
        r, c = rng.integers(6, side - 6, size=2)
        rad = int(rng.integers(2, 7))
        yy, xx = np.ogrid[:side, :side]
        m |= ((yy - r) ** 2 + (xx - c) ** 2 <= rad * rad).astype(np.uint8)
    return m


def test_ac5_metric_oracles():
    rng = np.random.default_rng(3)
    hd_exact = 0
    for _ in range(50):
        a, b = _random_mask(rng), _random_mask(rng)
        pa = boundary_pixels(a).astype(np.float64)
        pb = boundary_pixels(b).astype(np.float64)
        d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2))
        brute = max(d.min(axis=1).max(), d.min(axis=0).max())
        hd_exact += hausdorff(a, b) == brute
        # set-arithmetic oracles for dsc / sen
        sa = {tuple(p) for p in np.argwhere(a)}
        sb = {tuple(p) for p in np.argwhere(b)}
        inter = len(sa & sb)
        assert dsc(a, b) == 200.0 * inter / (len(sa) + len(sb))
        assert sensitivity(a, b) == 100.0 * inter / len(sb)
    ok = hd_exact == 50
    report("AC-5", ok, f"hausdorff exact match on {hd_exact}/50 pairs; "
                       f"dsc/sen set oracles exact")
    assert hd_exact == 50


# ---------------------------------------------------------------------------
# AC-6 directional ablation (the expensive one)


def _run_ablation(tmp_path, data_dir, seeds, tag):
    cfg_path = tmp_path / f"ablate_cfg_{tag}.json"
    cfg_path.write_text(json.dumps({
        "train": {"epochs": 100, "batch_size": 16, "lr": 1e-3},
        "ablate": {"arms": ["plain", "ds", "ma"], "seeds": seeds, "folds": [0]},
    }))
    out = tmp_path / f"ablation_{tag}"
    import os
    os.environ.setdefault("MORPHLABEL_THREADS", "2")
    rc = cli_main(["ablate", "--config", str(cfg_path), "--data", str(data_dir),
                   "--out", str(out)])
    assert rc == 0
    return io.read_json(out / "ablation.json")


def _check_b_c(per_run, seeds):
    conv = {(r["arm"], r["seed"]): r["convergence_epoch"] for r in per_run}
    hd = {(r["arm"], r["seed"]): r["hd_mean"] for r in per_run}
    b_hits = sum(conv[("ma", s)] >= conv[("plain", s)] for s in seeds)
    b_ok = b_hits * 2 > len(seeds)  # majority
    c_ok = (np.mean([hd[("ma", s)] for s in seeds])
            <= np.mean([hd[("plain", s)] for s in seeds]))
    return b_ok, c_ok, b_hits, conv, hd


@pytest.mark.slow
def test_ac6_directional_ablation(tmp_path):
    t0 = time.perf_counter()
    data_dir = tmp_path / "data"
    rc = cli_main(["make-dataset", "--out", str(data_dir), "--volumes", "24",
                   "--slices-per-volume", "8", "--size", "64",
                   "--ambiguity", "0.5", "--seed", "0", "--folds", "3"])
    assert rc == 0
    seeds = [0, 1, 2]
    result = _run_ablation(tmp_path, data_dir, seeds, "base")
    per_run = result["per_run"]
    dsc_ok = all(r["dsc_mean"] >= 90.0 for r in per_run)
    b_ok, c_ok, b_hits, conv, hd = _check_b_c(per_run, seeds)
    reran = False
    if not (b_ok and c_ok):
        # stochastic-directional fallback: 5 seeds, majority vote
        reran = True
        seeds = [0, 1, 2, 3, 4]
        result = _run_ablation(tmp_path, data_dir, seeds, "retry")
        per_run = result["per_run"]
        dsc_ok = dsc_ok and all(r["dsc_mean"] >= 90.0 for r in per_run)
        b_ok, c_ok, b_hits, conv, hd = _check_b_c(per_run, seeds)
    elapsed = time.perf_counter() - t0
    ok = dsc_ok and b_ok and c_ok and elapsed <= 1800.0
    dsc_list = ", ".join(
        "{}/s{}={:.1f}".format(r["arm"], r["seed"], r["dsc_mean"]) for r in per_run
    )
    conv_list = ", ".join(
        "s{}: ma={} vs plain={}".format(s, conv[("ma", s)], conv[("plain", s)])
        for s in seeds
    )
    hd_ma = float(np.mean([hd[("ma", s)] for s in seeds]))
    hd_plain = float(np.mean([hd[("plain", s)] for s in seeds]))
    detail = (
        f"(a) all DSC >= 90: {dsc_ok} [{dsc_list}]; "
        f"(b) ma conv >= plain in {b_hits}/{len(seeds)} seeds: {b_ok} [{conv_list}]; "
        f"(c) mean HD ma {hd_ma:.2f} <= plain {hd_plain:.2f}: {c_ok}; "
        f"reran={reran}; {elapsed / 60:.1f} min"
    )
    report("AC-6", ok, detail)
    assert elapsed <= 1800.0, f"runtime {elapsed:.0f}s exceeds 30 min"
    assert dsc_ok
    assert b_ok
    assert c_ok


# ---------------------------------------------------------------------------
# AC-7 determinism


@pytest.mark.slow
def test_ac7_byte_identical_ablation(tmp_path):
    data_dir = tmp_path / "data7"
    rc = cli_main(["make-dataset", "--out", str(data_dir), "--volumes", "6",
                   "--slices-per-volume", "2", "--size", "64",
                   "--ambiguity", "0.5", "--seed", "2", "--folds", "3"])
    assert rc == 0
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "train": {"epochs": 3, "batch_size": 4},
        "ablate": {"arms": ["plain", "ds", "ma"], "seeds": [0], "folds": [0]},
    }))
    trees = []
    for tag in ("one", "two"):
        out = tmp_path / tag
        rc = cli_main(["ablate", "--config", str(cfg_path),
                       "--data", str(data_dir), "--out", str(out)])
        assert rc == 0
        trees.append(out)
    files_a = sorted(p.relative_to(trees[0]) for p in trees[0].rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(trees[1]) for p in trees[1].rglob("*") if p.is_file())
    assert files_a == files_b
    diffs = [
        str(rel)
        for rel in files_a
        if (trees[0] / rel).read_bytes() != (trees[1] / rel).read_bytes()
    ]
    ok = not diffs
    report("AC-7", ok, f"{len(files_a)} files compared, "
                       f"{'all byte-identical' if ok else 'diffs: ' + ', '.join(diffs)}")
    assert not diffs
