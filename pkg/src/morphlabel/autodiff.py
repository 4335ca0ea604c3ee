"""Minimal reverse-mode automatic differentiation over float64 arrays.

Tensors wrap numpy arrays and record their producing primitive as a
closure; backward() topologically sorts the recorded graph and applies
exact vector-Jacobian products in a fixed, deterministic order. Only the
primitives the segmentation network and its losses need are provided.

Broadcasting is restricted to two cases: scalar (0-d) operands, and a
single-channel NCHW tensor against a C-channel one (the attention-map
pattern). Anything else raises ShapeMismatch.
"""

from __future__ import annotations

import numpy as np

from .errors import NotScalarRoot, ShapeMismatch


class Tensor:
    """Node in the autodiff graph holding a float64 array and its gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents, vjp) -> Tensor:
    """Create a graph node; constant folding when no parent needs grads."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _check_binary(a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or sa == () or sb == ():
        return
    if (
        len(sa) == 4
        and len(sb) == 4
        and sa[0] == sb[0]
        and sa[2:] == sb[2:]
        and (sa[1] == 1 or sb[1] == 1)
    ):
        return
    raise ShapeMismatch(f"incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to the operand's (restricted) shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=1, keepdims=True)  # channel-broadcast case


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar root into every requires_grad node."""
    if root.data.size != 1:
        raise NotScalarRoot(f"root must be scalar, got shape {root.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad or g is None:
                continue
            g = _unbroadcast(np.asarray(g), parent.data.shape)
            if parent.grad is None:
                parent.grad = g.copy() if g.base is not None else g
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b)
    return _node(
        a.data / b.data,
        (a, b),
        lambda g: (g / b.data, -g * a.data / (b.data * b.data)),
    )


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _node(out_data, (a,), lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def abs_(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # overflow-safe: exp of a non-positive argument on both branches
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axes=None) -> Tensor:
    axes = None if axes is None else tuple(axes)

    def vjp(g):
        if axes is None:
            return (np.broadcast_to(g, a.data.shape),)
        return (np.broadcast_to(np.expand_dims(g, axes), a.data.shape),)

    return _node(a.data.sum(axis=axes), (a,), vjp)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape),)

    return _node(np.asarray(a.data.mean()), (a,), vjp)


def max_reduce(a: Tensor, axes=None) -> Tensor:
    """Max over all elements (axes=None) or over the given axes.

    Subgradient routes to the first maximizing element in row-major
    order within each reduction slice.
    """
    if axes is None:
        flat_idx = int(np.argmax(a.data))

        def vjp(g):
            gi = np.zeros_like(a.data)
            gi.flat[flat_idx] = float(g)
            return (gi,)

        return _node(np.asarray(a.data.max()), (a,), vjp)

    axes = tuple(sorted(ax % a.data.ndim for ax in axes))
    kept = tuple(i for i in range(a.data.ndim) if i not in axes)
    perm = kept + axes
    moved = a.data.transpose(perm)
    lead = moved.shape[: len(kept)]
    flat = moved.reshape(lead + (-1,))
    idx = np.argmax(flat, axis=-1)

    def vjp(g):
        gi_flat = np.zeros_like(flat)
        np.put_along_axis(gi_flat, idx[..., None], np.asarray(g)[..., None], axis=-1)
        gi = gi_flat.reshape(moved.shape).transpose(np.argsort(perm))
        return (gi,)

    return _node(flat.max(axis=-1), (a,), vjp)


# ---------------------------------------------------------------------------
# structural / convolutional primitives (NCHW)


def _require_nchw(a: Tensor, name: str) -> None:
    if a.data.ndim != 4:
        raise ShapeMismatch(f"{name} expects an NCHW tensor, got shape {a.data.shape}")


def concat_channels(tensors) -> Tensor:
    tensors = list(tensors)
    for t in tensors:
        _require_nchw(t, "concat_channels")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if s[0] != base[0] or s[2:] != base[2:]:
            raise ShapeMismatch(f"cannot concat {base} with {s}")
    sizes = [t.data.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            g[:, offsets[i]: offsets[i + 1]] for i in range(len(tensors))
        )

    return _node(np.concatenate([t.data for t in tensors], axis=1), tensors, vjp)


def max_pool_2x2(a: Tensor) -> Tensor:
    _require_nchw(a, "max_pool_2x2")
    n, c, h, w = a.data.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"max_pool_2x2 requires even extents, got {h}x{w}")
    windows = a.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, h // 2, w // 2, 4)

    def vjp(g):
        idx = np.argmax(flat, axis=-1)  # first maximizer within each window
        gi_flat = np.zeros_like(flat)
        np.put_along_axis(gi_flat, idx[..., None], g[..., None], axis=-1)
        gi = gi_flat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gi.reshape(n, c, h, w),)

    return _node(flat.max(axis=-1), (a,), vjp)


def upsample_nearest_2x(a: Tensor) -> Tensor:
    _require_nchw(a, "upsample_nearest_2x")
    n, c, h, w = a.data.shape
    out_data = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _node(out_data, (a,), vjp)


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad: pad + h, pad: pad + w] = x
    return xp


def _conv_forward(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1 correlation of a pre-padded input as k*k shifted channel
    contractions; keeps the working set cache-resident instead of
    materializing an im2col matrix."""
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    y = np.zeros((w.shape[0], xp.shape[0], ho, wo))
    for u in range(kh):
        for v in range(kw):
            y += np.tensordot(w[:, :, u, v], xp[:, :, u: u + ho, v: v + wo],
                              axes=([1], [1]))
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3))


def _conv_grad_weight(xp: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    cout, cin = g.shape[1], xp.shape[1]
    ho, wo = g.shape[2], g.shape[3]
    gw = np.empty((cout, cin, k, k))
    for u in range(k):
        for v in range(k):
            gw[:, :, u, v] = np.tensordot(
                g, xp[:, :, u: u + ho, v: v + wo], axes=([0, 2, 3], [0, 2, 3])
            )
    return gw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """2-D convolution (cross-correlation), stride 1, square kernel.

    weight: (C_out, C_in, k, k); bias: (C_out,). "same" keeps spatial
    extents (odd kernels); "valid" applies no padding.
    """
    _require_nchw(x, "conv2d")
    if weight.data.ndim != 4 or weight.data.shape[2] != weight.data.shape[3]:
        raise ShapeMismatch(f"kernel must be (Cout, Cin, k, k), got {weight.data.shape}")
    cout, cin, k, _ = weight.data.shape
    if x.data.shape[1] != cin:
        raise ShapeMismatch(
            f"input has {x.data.shape[1]} channels, kernel expects {cin}"
        )
    if bias.data.shape != (cout,):
        raise ShapeMismatch(f"bias must be ({cout},), got {bias.data.shape}")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeMismatch("same padding requires an odd kernel")
        pad = (k - 1) // 2
    elif padding == "valid":
        pad = 0
        if x.data.shape[2] < k or x.data.shape[3] < k:
            raise ShapeMismatch("input smaller than kernel under valid padding")
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    xp = _pad_hw(x.data, pad)
    out_data = _conv_forward(xp, weight.data)
    out_data += bias.data[None, :, None, None]

    def vjp(g):
        g = np.ascontiguousarray(g)
        gx = None
        if x.requires_grad:
            # full correlation of g with the flipped, channel-swapped kernel
            wt = np.ascontiguousarray(
                weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            )
            gx = _conv_forward(_pad_hw(g, k - 1 - pad), wt)
        gw = _conv_grad_weight(xp, g, k) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return (gx, gw, gb)

    return _node(out_data, (x, weight, bias), vjp)


def conv2d_1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Pointwise convolution; weight: (C_out, C_in), bias: (C_out,)."""
    _require_nchw(x, "conv2d_1x1")
    if weight.data.ndim != 2:
        raise ShapeMismatch(f"1x1 kernel must be (Cout, Cin), got {weight.data.shape}")
    cout, cin = weight.data.shape
    if x.data.shape[1] != cin:
        raise ShapeMismatch(
            f"input has {x.data.shape[1]} channels, kernel expects {cin}"
        )
    if bias.data.shape != (cout,):
        raise ShapeMismatch(f"bias must be ({cout},), got {bias.data.shape}")
    out_data = np.ascontiguousarray(
        np.tensordot(weight.data, x.data, axes=([1], [1])).transpose(1, 0, 2, 3)
    )
    out_data += bias.data[None, :, None, None]

    def vjp(g):
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray(
                np.tensordot(weight.data.T, g, axes=([1], [1])).transpose(1, 0, 2, 3)
            )
        gw = (
            np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))
            if weight.requires_grad
            else None
        )
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return (gx, gw, gb)

    return _node(out_data, (x, weight, bias), vjp)
