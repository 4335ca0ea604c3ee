"""Central finite-difference verification of every autodiff primitive.

Shared by the test suite and the `gradcheck` CLI subcommand. Each check
builds a scalar objective from one primitive, runs backward(), and
compares every leaf gradient against central differences.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FD_STEP = 1e-5
REL_TOL = 1e-4


def _rel_err(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric), 1e-8)
    return abs(analytic - numeric) / denom


def check_gradients(build, leaves, step=FD_STEP):
    """Max relative error between backward() and central differences.

    ``build`` maps the leaf tensors to a scalar Tensor; ``leaves`` is the
    list of tensors whose gradients are verified (all requires_grad).
    """
    out = build(*leaves)
    for leaf in leaves:
        leaf.grad = None
    ad.backward(out)
    worst = 0.0
    for leaf in leaves:
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = build(*leaves).item()
            flat[i] = orig - step
            lo = build(*leaves).item()
            flat[i] = orig
            worst = max(worst, _rel_err(gflat[i], (hi - lo) / (2.0 * step)))
    return worst


def _unique_max(rng, shape, margin=1e-2):
    """Random array whose global and per-window maxima are unique by a margin."""
    a = rng.uniform(-1.0, 1.0, size=shape)
    flat = a.reshape(-1)
    order = np.argsort(flat)
    flat[order] += margin * 10 * np.arange(flat.size)  # strictly separate values
    return a


def _away_from_zero(x, margin=2e-3):
    """Push every value at least ``margin`` from the relu/abs kink."""
    sign = np.where(x >= 0.0, 1.0, -1.0)
    return sign * (np.abs(x) + margin)


def _away_from(x, points, margin=2e-3):
    """Push values that sit within ``margin`` of any kink point past it."""
    out = np.array(x)
    for p in points:
        near = np.abs(out - p) < margin
        out[near] = p + np.where(out[near] >= p, margin, -margin)
    return out


def primitive_checks(seed: int):
    """Yield (name, worst_rel_err) for one seeded random shape and
    instance per primitive."""
    rng = np.random.default_rng(np.random.SeedSequence([777, seed]))

    def t(shape, gen=None):
        data = rng.uniform(-1.0, 1.0, size=shape) if gen is None else gen
        return Tensor(data, requires_grad=True)

    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    h = 2 * int(rng.integers(2, 5))
    w = 2 * int(rng.integers(2, 5))
    x = t((n, c, h, w))
    y = t((n, c, h, w))
    amap = t((n, 1, h, w))
    pos = t(None, gen=rng.uniform(0.1, 2.0, size=(n, c, h, w)))
    kinked = t(None, gen=_away_from_zero(rng.uniform(-1, 1, size=(n, c, h, w))))
    clampable = t(None, gen=_away_from(rng.uniform(-1, 1, size=(n, c, h, w)),
                                       (-0.5, 0.5)))
    kern3 = t(None, gen=rng.uniform(-0.5, 0.5, size=(3, c, 3, 3)))
    bias3 = t((3,))
    kern1 = t(None, gen=rng.uniform(-0.5, 0.5, size=(4, c)))
    bias1 = t((4,))
    uniq = Tensor(_unique_max(rng, (n, c, h, w)), requires_grad=True)
    # the conv -> relu composite needs pre-activations clear of the kink
    for attempt in range(40):
        sub = np.random.default_rng(np.random.SeedSequence([777, seed, attempt]))
        cx = Tensor(sub.uniform(-1, 1, size=(n, c, h, w)), requires_grad=True)
        ck = Tensor(sub.uniform(-0.5, 0.5, size=(3, c, 3, 3)), requires_grad=True)
        cb = Tensor(sub.uniform(-0.1, 0.1, size=(3,)), requires_grad=True)
        pre = ad.conv2d(cx, ck, cb, "same")
        if np.abs(pre.data).min() >= 1e-3:
            break

    yield "add", check_gradients(lambda a, b: ad.mean(ad.add(a, b)), [x, y])
    yield "sub", check_gradients(lambda a, b: ad.mean(ad.sub(a, b)), [x, y])
    yield "mul", check_gradients(lambda a, b: ad.mean(ad.mul(a, b)), [x, y])
    yield "mul_channel_broadcast", check_gradients(
        lambda a, b: ad.mean(ad.mul(a, b)), [x, amap]
    )
    yield "div", check_gradients(lambda a, b: ad.mean(ad.div(a, b)), [x, pos])
    yield "exp", check_gradients(lambda a: ad.mean(ad.exp(a)), [x])
    yield "log", check_gradients(lambda a: ad.mean(ad.log(a)), [pos])
    yield "abs", check_gradients(lambda a: ad.mean(ad.abs_(a)), [kinked])
    yield "relu", check_gradients(lambda a: ad.mean(ad.relu(a)), [kinked])
    yield "sigmoid", check_gradients(lambda a: ad.mean(ad.sigmoid(a)), [x])
    yield "clamp", check_gradients(
        lambda a: ad.mean(ad.clamp(a, -0.5, 0.5)), [clampable]
    )
    yield "sum", check_gradients(lambda a: ad.sum_(a), [x])
    yield "sum_axes", check_gradients(
        lambda a: ad.mean(ad.sum_(a, axes=(1, 2, 3))), [x]
    )
    yield "mean", check_gradients(lambda a: ad.mean(a), [x])
    yield "max_reduce", check_gradients(lambda a: ad.max_reduce(a), [uniq])
    yield "max_reduce_axes", check_gradients(
        lambda a: ad.mean(ad.max_reduce(a, axes=(1, 2, 3))), [uniq]
    )
    yield "max_pool_2x2", check_gradients(
        lambda a: ad.mean(ad.max_pool_2x2(a)), [uniq]
    )
    yield "upsample_nearest_2x", check_gradients(
        lambda a: ad.mean(ad.upsample_nearest_2x(a)), [x]
    )
    yield "concat_channels", check_gradients(
        lambda a, b: ad.mean(ad.concat_channels([a, b])), [x, y]
    )
    yield "conv2d_same", check_gradients(
        lambda a, k, b: ad.mean(ad.conv2d(a, k, b, "same")), [x, kern3, bias3]
    )
    yield "conv2d_valid", check_gradients(
        lambda a, k, b: ad.mean(ad.conv2d(a, k, b, "valid")), [x, kern3, bias3]
    )
    yield "conv2d_1x1", check_gradients(
        lambda a, k, b: ad.mean(ad.conv2d_1x1(a, k, b)), [x, kern1, bias1]
    )
    yield "composite_conv_relu_mean", check_gradients(
        lambda a, k, b: ad.mean(ad.relu(ad.conv2d(a, k, b, "same"))),
        [cx, ck, cb],
    )


def run_suite(seeds=range(20)):
    """Run the primitive checks across seeds.

    Returns (report, passed): report maps primitive name to its worst
    relative error across seeds.
    """
    report: dict[str, float] = {}
    for seed in seeds:
        for name, err in primitive_checks(seed):
            report[name] = max(report.get(name, 0.0), err)
    return report, all(err <= REL_TOL for err in report.values())


def _margins_ok(pre_act, sub_data, pooled_err, margin=1e-3) -> bool:
    """Every kink along the objective must be at least ``margin`` away so
    the finite-difference probe stays on one subgradient branch: relu
    inputs away from zero, max-pool window maxima and the L-infinity
    maximizer unique."""
    if np.abs(pre_act).min() < margin:
        return False
    flat = np.sort(pooled_err.reshape(-1))
    if flat[-1] - flat[-2] < margin:  # L-infinity argmax
        return False
    n, c, h, w = sub_data.shape
    windows = sub_data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat_w = np.sort(windows.reshape(-1, 4), axis=1)
    return bool((flat_w[:, 3] - flat_w[:, 2] >= margin).all())


def composite_ma_check(seed: int) -> float:
    """Finite-difference check of the composite loss routed through an
    attention block: conv features -> ma_block -> final head vs strong
    label, pooled sub-output vs pseudo pyramid level.

    Instances whose max paths have near-tied maximizers are redrawn (the
    subgradient is not FD-checkable there).
    """
    from . import losses
    from .network import ma_block

    c, h, w = 3, 8, 8
    for attempt in range(50):
        rng = np.random.default_rng(np.random.SeedSequence([888, seed, attempt]))
        x = Tensor(rng.normal(size=(1, 1, h, w)))
        conv_w = Tensor(rng.uniform(-0.5, 0.5, size=(c, 1, 3, 3)), requires_grad=True)
        conv_b = Tensor(rng.uniform(-0.1, 0.1, size=(c,)), requires_grad=True)
        head_w = Tensor(rng.uniform(-0.5, 0.5, size=(1, c)), requires_grad=True)
        head_b = Tensor(rng.uniform(-0.1, 0.1, size=(1,)), requires_grad=True)
        out_w = Tensor(rng.uniform(-0.5, 0.5, size=(1, c)), requires_grad=True)
        out_b = Tensor(rng.uniform(-0.1, 0.1, size=(1,)), requires_grad=True)
        strong = (rng.random((1, 1, h, w)) > 0.5).astype(np.float64)
        pyramid = [rng.random((1, 1, h // 2, w // 2))]
        weights = losses.supervision_weights(2)

        def build(cw, cb, hw, hb, ow, ob):
            feats = ad.relu(ad.conv2d(x, cw, cb, "same"))
            enhanced, sub = ma_block(feats, hw, hb, "post-sigmoid")
            x0 = ad.sigmoid(ad.conv2d_1x1(enhanced, ow, ob))
            x1 = ad.max_pool_2x2(sub)
            total, _ = losses.composite_loss([x0, x1], strong, pyramid, weights)
            return total

        leaves = [conv_w, conv_b, head_w, head_b, out_w, out_b]
        z = ad.conv2d(x, conv_w, conv_b, "same")
        _, sub = ma_block(ad.relu(z), head_w, head_b, "post-sigmoid")
        pooled = ad.max_pool_2x2(sub)
        if not _margins_ok(z.data, sub.data, np.abs(pooled.data - pyramid[0])):
            continue
        return check_gradients(build, leaves)
    raise RuntimeError(f"no margin-clean instance found for seed {seed}")


def run_composite_ma_check(seeds=range(20)) -> float:
    return max(composite_ma_check(seed) for seed in seeds)
