"""Differentiable operations on tensors.

Each op validates shapes eagerly, computes the forward value with numpy
(float64 throughout), and registers a gradient function on the output.
Leading batch axes are accepted wherever the math allows: an op documented
on (C, T) also works on (B, C, T), with parameter gradients reduced over
the extra axes. Convolution is cross-correlation (no kernel flip) with
zero "same" padding, and dropout is inverted dropout so inference needs no
rescaling.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .tensor import Array, Tensor, make_op


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / broadcasting


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op("add", (a, b), data, grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_op("mul", (a, b), data, grad_fn)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return make_op("scale", (x,), x.data * c, lambda g: (g * c,))


def relu(x) -> Tensor:
    """Elementwise max(0, x); gradient passes only where x > 0."""
    x = as_tensor(x)
    mask = x.data > 0
    return make_op("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return make_op("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity in eval mode or at p == 0 (returns the input tensor itself).
    """
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs a random generator")
    keep = rng.random(x.shape) >= p
    factor = 1.0 / (1.0 - p)
    data = np.where(keep, x.data * factor, 0.0)
    return make_op("dropout", (x,), data, lambda g: (np.where(keep, g * factor, 0.0),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_op("matmul", (a, b), data, grad_fn)


def linear(x, w, b) -> Tensor:
    """Affine map along the last axis: out[..., j] = sum_i x[..., i] w[i, j] + b[j]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2:
        raise DimensionError(f"linear: weight must be 2-d, got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    data = x.data @ w.data + b.data
    d_in, d_out = w.shape

    def grad_fn(g):
        g2 = g.reshape(-1, d_out)
        gx = g @ w.data.T
        gw = x.data.reshape(-1, d_in).T @ g2
        gb = g2.sum(axis=0)
        return gx, gw, gb

    return make_op("linear", (x, w, b), data, grad_fn)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    return make_op("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def swap_axes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return make_op("swap_axes", (x,), np.swapaxes(x.data, a, b), lambda g: (np.swapaxes(g, a, b),))


def transpose_last2(x) -> Tensor:
    """Swap the last two axes; (C, T) <-> (T, C) with any leading batch axes."""
    return swap_axes(x, -1, -2)


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise UsageError("concat of an empty list")
    ref = list(xs[0].shape)
    ax = axis if axis >= 0 else len(ref) + axis
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            i != ax and other[i] != ref[i] for i in range(len(ref))
        ):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in xs]} disagree off axis {axis}"
            )
    data = np.concatenate([t.data for t in xs], axis=ax)
    sizes = [t.shape[ax] for t in xs]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, offsets, axis=ax))

    return make_op("concat", xs, data, grad_fn)


def concat_channels(xs) -> Tensor:
    """Stack (C_i, T) feature maps along the channel axis into (sum C_i, T)."""
    return concat(xs, axis=-2)


# ---------------------------------------------------------------------------
# reductions


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
        return make_op("mean", (x,), np.asarray(x.data.mean()), lambda g: (np.ones(x.shape) * (g / n),))
    ax = axis if axis >= 0 else x.ndim + axis
    n = x.shape[ax]
    data = x.data.mean(axis=ax)

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape) / n,)

    return make_op("mean", (x,), data, grad_fn)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return make_op("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.ones(x.shape) * g,))


def softmax_lastdim(x) -> Tensor:
    """Softmax along the last axis, computed with max subtraction for stability."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a nonempty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        # Jacobian-vector product: y * (g - <g, y>)
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return make_op("softmax", (x,), y, grad_fn)


def mse_loss(pred, target) -> Tensor:
    """Mean squared error; gradient w.r.t. pred is 2(pred - target)/N."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: shapes differ, {pred.shape} vs {target.shape}")
    if pred.size < 1:
        raise DimensionError("mse_loss: empty inputs")
    diff = pred.data - target.data
    n = pred.size
    data = np.asarray((diff * diff).mean())

    def grad_fn(g):
        base = (2.0 / n) * diff * g
        return base, -base

    return make_op("mse", (pred, target), data, grad_fn)


# ---------------------------------------------------------------------------
# convolutions


def _sliding(x_padded: Array, k: int) -> Array:
    # (..., C, T + k - 1) -> (..., C, T, k)
    return np.lib.stride_tricks.sliding_window_view(x_padded, k, axis=-1)


def _flatten_lead(arr: Array, trailing: int) -> Array:
    # collapse any leading batch axes so einsum can reduce over them
    return arr.reshape((-1,) + arr.shape[arr.ndim - trailing:])


def _pad_last(x: Array, pad: int) -> Array:
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    return np.pad(x, widths)


def _check_conv_input(x: Tensor, k: int) -> None:
    if k % 2 != 1:
        raise ConfigError(f"conv kernel size must be odd, got {k}")
    if x.ndim < 2:
        raise DimensionError(f"conv input must be at least (C, T), got {x.shape}")
    if x.shape[-1] < 1:
        raise DimensionError(f"conv input has empty time axis: {x.shape}")


def conv1d_same(x, kernels, b) -> Tensor:
    """Cross-correlation over (..., C_in, T) giving (..., C_out, T).

    Zero padding of (k-1)/2 on each side keeps the output length at T.
    """
    x, kernels, b = as_tensor(x), as_tensor(kernels), as_tensor(b)
    if kernels.ndim != 3:
        raise DimensionError(f"conv kernels must be (C_out, C_in, k), got {kernels.shape}")
    c_out, c_in, k = kernels.shape
    _check_conv_input(x, k)
    if x.shape[-2] != c_in:
        raise DimensionError(f"conv: input {x.shape} does not match kernels {kernels.shape}")
    if b.shape != (c_out,):
        raise DimensionError(f"conv: bias {b.shape} does not match kernels {kernels.shape}")
    pad = (k - 1) // 2
    windows = _sliding(_pad_last(x.data, pad), k)
    data = np.einsum("...itk,oik->...ot", windows, kernels.data) + b.data[:, None]

    def grad_fn(g):
        gb = g.sum(axis=tuple(i for i in range(g.ndim) if i != g.ndim - 2))
        gk = np.einsum("bitk,bot->oik", _flatten_lead(windows, 3), _flatten_lead(g, 2))
        gwin = _sliding(_pad_last(g, pad), k)
        gx = np.einsum("...otk,oik->...it", gwin, kernels.data[:, :, ::-1])
        return gx, gk, gb

    return make_op("conv1d", (x, kernels, b), data, grad_fn)


def depthwise_conv1d(x, depth_kernels) -> Tensor:
    """Per-channel cross-correlation: channel c convolved with its own kernel."""
    x, depth_kernels = as_tensor(x), as_tensor(depth_kernels)
    if depth_kernels.ndim != 2:
        raise DimensionError(f"depthwise kernels must be (C, k), got {depth_kernels.shape}")
    c, k = depth_kernels.shape
    _check_conv_input(x, k)
    if x.shape[-2] != c:
        raise DimensionError(
            f"depthwise conv: input {x.shape} does not match kernels {depth_kernels.shape}"
        )
    pad = (k - 1) // 2
    windows = _sliding(_pad_last(x.data, pad), k)
    data = np.einsum("...ctk,ck->...ct", windows, depth_kernels.data)

    def grad_fn(g):
        gk = np.einsum("bctk,bct->ck", _flatten_lead(windows, 3), _flatten_lead(g, 2))
        gwin = _sliding(_pad_last(g, pad), k)
        gx = np.einsum("...ctk,ck->...ct", gwin, depth_kernels.data[:, ::-1])
        return gx, gk

    return make_op("depthwise_conv1d", (x, depth_kernels), data, grad_fn)


def depthwise_separable_conv1d(x, depth_kernels, point_kernels, b) -> Tensor:
    """Depthwise convolution followed by 1x1 cross-channel mixing plus bias."""
    x, pk, b = as_tensor(x), as_tensor(point_kernels), as_tensor(b)
    if pk.ndim != 2:
        raise DimensionError(f"pointwise kernels must be (C, C), got {pk.shape}")
    c = pk.shape[1]
    if b.shape != (pk.shape[0],):
        raise DimensionError(f"pointwise bias {b.shape} does not match kernels {pk.shape}")
    if x.shape[-2] != c:
        raise DimensionError(
            f"depthwise-separable conv: input {x.shape} does not match pointwise {pk.shape}"
        )
    depth = depthwise_conv1d(x, depth_kernels)
    mixed = matmul(pk, depth)
    return add(mixed, reshape(b, (pk.shape[0], 1)))
