"""Differentiable operator set over :class:`brain.tensor.Tensor`.

Every op computes its forward result with numpy and hands ``record`` a closure
mapping the output gradient to one gradient per input (``None`` = no gradient).
"""
from typing import Optional, Sequence, Tuple

import numpy as np

from app.errors import DegenerateVarianceError, DimensionError
from brain.tensor import Tensor, add_macs, as_tensor, record


# single-operand-pair einsums go through BLAS when optimize is on
EINSUM_OPTIMIZE = True


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    a_is = isinstance(a, Tensor)
    a = as_tensor(a, like=b if not a_is and isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    return a, b


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    return record("mul", (a, b), a.data * b.data,
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return record("div", (a, b), out,
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * out / b.data, b.shape)))


def power(x: Tensor, exponent: float) -> Tensor:
    return record("pow", (x,), x.data ** exponent,
                  lambda g: (g * exponent * x.data ** (exponent - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return record("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def clamp(x: Tensor, low: float, high: float) -> Tensor:
    inside = (x.data >= low) & (x.data <= high)
    return record("clamp", (x,), np.clip(x.data, low, high), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return record("relu", (x,), x.data * active, lambda g: (g * active,))


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} is invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", (x,), out,
                  lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# --- reductions and shape ---------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", (x,), out, backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return record("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def index(x: Tensor, key) -> Tensor:
    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, key, g)
        return (grad,)

    return record("index", (x,), x.data[key], backward)


def gather(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """``np.take`` along ``axis``; repeated indices accumulate their gradients."""
    indices = np.asarray(indices)
    axis = axis % x.ndim

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (slice(None),) * axis + (indices,), g)
        return (grad,)

    return record("gather", (x,), np.take(x.data, indices, axis=axis), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise DimensionError(
                f"concat on axis {axis}: shapes {[t.shape for t in tensors]} disagree off-axis"
            )
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), backward)


# --- contractions -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)
    add_macs("matmul", out.size * a.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("matmul", (a, b), out, backward)


def _einsum_macs(inputs: Sequence[str], operands: Sequence[np.ndarray]) -> int:
    extents = {}
    for subs, op in zip(inputs, operands):
        extents.update(zip(subs, op.shape))
    return int(np.prod(list(extents.values()), dtype=np.int64))


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Explicit-output einsum (``"ab,bc->ac"``) with reverse-mode support."""
    lhs, output = subscripts.replace(" ", "").split("->")
    inputs = lhs.split(",")
    if len(inputs) != len(operands):
        raise DimensionError(f"einsum {subscripts!r} expects {len(inputs)} operands, got {len(operands)}")
    for subs, op in zip(inputs, operands):
        if len(subs) != op.ndim or len(set(subs)) != len(subs):
            raise DimensionError(f"einsum {subscripts!r}: operand {op.shape} does not fit {subs!r}")
    extents = {}
    for subs, op in zip(inputs, operands):
        for letter, extent in zip(subs, op.shape):
            if extents.setdefault(letter, extent) != extent:
                raise DimensionError(
                    f"einsum {subscripts!r}: index {letter!r} has extents {extents[letter]} and {extent}"
                )
    data = [op.data for op in operands]
    out = np.einsum(subscripts, *data, optimize=EINSUM_OPTIMIZE)
    add_macs("einsum", _einsum_macs(inputs, data))

    def backward(g):
        grads = []
        for i, (subs, op) in enumerate(zip(inputs, operands)):
            if not op.requires_grad:
                grads.append(None)
                continue
            others = [(s, d) for j, (s, d) in enumerate(zip(inputs, data)) if j != i]
            available = set(output).union(*(s for s, _ in others))
            kept = "".join(c for c in subs if c in available)
            spec = ",".join([output] + [s for s, _ in others]) + "->" + kept
            partial = np.einsum(spec, g, *(d for _, d in others), optimize=EINSUM_OPTIMIZE)
            if kept != subs:
                partial = partial.reshape([op.shape[k] if c in kept else 1 for k, c in enumerate(subs)])
                partial = np.broadcast_to(partial, op.shape).copy()
            grads.append(partial)
        return grads

    return record("einsum", operands, out, backward)


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over N x C x H x W input with C_out x C_in x kh x kw weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c_in, height, width = x.shape
    c_out, w_in, kh, kw = w.shape
    if c_in != w_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, weight {w.shape} expects {w_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernels must have odd extents, got {kh}x{kw}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias {bias.shape} does not match {c_out} output channels")
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} does not fit input {x.shape} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, c_out, out_h, out_w), dtype=np.result_type(x.dtype, w.dtype))
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + stride * (out_h - 1) + 1, stride)
            cols = slice(j, j + stride * (out_w - 1) + 1, stride)
            out += np.einsum("nchw,oc->nohw", xp[:, :, rows, cols], w.data[:, :, i, j], optimize=EINSUM_OPTIMIZE)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1)
    add_macs("conv2d", n * c_out * out_h * out_w * c_in * kh * kw)

    def backward(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + stride * (out_h - 1) + 1, stride)
                cols = slice(j, j + stride * (out_w - 1) + 1, stride)
                gx[:, :, rows, cols] += np.einsum("nohw,oc->nchw", g, w.data[:, :, i, j], optimize=EINSUM_OPTIMIZE)
                gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xp[:, :, rows, cols], optimize=EINSUM_OPTIMIZE)
        gx = gx[:, :, padding:padding + height, padding:padding + width]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if bias is None else (x, w, bias)
    return record("conv2d", inputs, out, backward)


# --- normalization ----------------------------------------------------------

def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization; train mode updates ``running_*`` in place."""
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects N x C x H x W input, got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            f"batchnorm2d: gamma {gamma.shape} / beta {beta.shape} do not match {channels} channels"
        )
    axes = (0, 2, 3)
    count = x.size // channels
    shape = (1, channels, 1, 1)

    if training:
        if count == 1:
            raise DegenerateVarianceError(
                f"batch statistics over a single value per channel are degenerate for input {x.shape}"
            )
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * x_hat + beta.data.reshape(shape)

    def backward(g):
        g_gamma = (g * x_hat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        g_hat = g * gamma.data.reshape(shape)
        if training:
            gx = (inv_std.reshape(shape) / count) * (
                count * g_hat
                - g_hat.sum(axis=axes, keepdims=True)
                - x_hat * (g_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = g_hat * inv_std.reshape(shape)
        return gx, g_gamma, g_beta

    return record("batchnorm2d", (x, gamma, beta), out, backward)


# --- resampling -------------------------------------------------------------

def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects N x C x H x W input, got {x.shape}")
    if k != stride:
        raise DimensionError(f"maxpool2d supports non-overlapping windows only (k={k}, stride={stride})")
    n, c, height, width = x.shape
    if height % k or width % k:
        raise DimensionError(f"maxpool2d: extents {height}x{width} are not divisible by {k}")
    oh, ow = height // k, width // k
    windows = x.data.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    winner = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]

    def backward(g):
        grad = np.zeros_like(windows)
        np.put_along_axis(grad, winner[..., None], g[..., None], axis=-1)
        grad = grad.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        return (grad,)

    return record("maxpool2d", (x,), out, backward)


def _bilinear_matrix(n_in: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped; rows sum to 1
    n_out = 2 * n_in
    matrix = np.zeros((n_out, n_in), dtype=dtype)
    for o in range(n_out):
        src = min(max((o + 0.5) / 2.0 - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        matrix[o, lo] += 1.0 - frac
        matrix[o, hi] += frac
    return matrix


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"upsample2x expects N x C x H x W input, got {x.shape}")
    n, c, height, width = x.shape
    if mode == "nearest":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3)
        return record("upsample_nearest", (x,), out,
                      lambda g: (g.reshape(n, c, height, 2, width, 2).sum(axis=(3, 5)),))
    if mode == "bilinear":
        rows = _bilinear_matrix(height, x.dtype)
        cols = _bilinear_matrix(width, x.dtype)
        out = np.einsum("ih,nchw,jw->ncij", rows, x.data, cols, optimize=EINSUM_OPTIMIZE)
        return record("upsample_bilinear", (x,), out,
                      lambda g: (np.einsum("ih,ncij,jw->nchw", rows, g, cols, optimize=EINSUM_OPTIMIZE),))
    raise DimensionError(f"unknown upsample mode {mode!r}")
