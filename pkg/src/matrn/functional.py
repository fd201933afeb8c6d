"""Differentiable primitives.

Each function computes its forward value with numpy and registers a backward
closure on the tape via :func:`matrn.tensor.record`. Broadcasting follows
numpy rules for the elementwise ops; the gradient is summed back to the
operand's shape.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, LabelError, NumericError
from .tensor import Tensor, as_tensor, record

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    # python scalars adopt the dtype of the tensor operand
    if a.data.ndim == 0 and not a.requires_grad and a.dtype != b.dtype:
        a = Tensor(a.data.astype(b.dtype))
    elif b.data.ndim == 0 and not b.requires_grad and b.dtype != a.dtype:
        b = Tensor(b.data.astype(a.dtype))
    return a, b


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("div", out, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


# -- linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # fold batch axes into one big product instead of a batched one
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return record("matmul", out, (a, b), bw)


# -- activations -------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _SQRT_2_OVER_PI * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return record("gelu", out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax. ``-inf`` entries are allowed (masked logits)."""
    if np.isnan(x.data).any():
        raise NumericError("softmax: NaN in input")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("log_softmax: NaN in input")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (x,), bw)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    inputs = [x] + [t for t in (weight, bias) if t is not None]

    def bw(g):
        gw = gb = None
        if weight is not None:
            gw = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
            gx_hat = g * weight.data
        else:
            gx_hat = g
        if bias is not None:
            gb = g.reshape(-1, xd.shape[-1]).sum(axis=0)
        n = xd.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append(gw)
        if bias is not None:
            grads.append(gb)
        return grads

    return record("layer_norm", out, inputs, bw)


# -- convolution -------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with OIHW kernels.

    Patches are gathered into one ``(B*Ho*Wo) x (kh*kw*C)`` matrix so the
    forward pass is a single matrix product; the input gradient is scattered
    back with one strided add per kernel offset.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if Ci != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Ci} ({x.shape} vs {weight.shape})")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    x_last = x.data.transpose(0, 2, 3, 1)
    if padding:
        x_last = np.pad(x_last, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(x_last, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :Ho, :Wo]          # B, Ho, Wo, C, kh, kw
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * C)
    w_mat = weight.data.transpose(0, 2, 3, 1).reshape(O, kh * kw * C)
    out = cols @ w_mat.T
    if bias is not None:
        out += bias.data
    result = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    inputs = [x, weight] + ([bias] if bias is not None else [])
    he, we = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1

    def bw(g):
        g_flat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        gw = gx = None
        if weight.requires_grad:
            gw = (g_flat.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
        if x.requires_grad:
            dcols = (g_flat @ w_mat).reshape(B, Ho, Wo, kh, kw, C)
            gxp = np.zeros((B, Hp, Wp, C), dtype=dcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + he:stride, j:j + we:stride, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + H, padding:padding + W, :].transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g_flat.sum(axis=0))
        return grads

    return record("conv2d", result, inputs, bw)


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    B, C, H, W = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return record("upsample_nearest2d", out, (x,), bw)


# -- structural --------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record("getitem", np.array(out, copy=True), (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return np.split(g, bounds, axis=ax)

    return record("concat", out, tensors, bw)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return record("mean", np.asarray(out), (x,), bw)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"embedding_lookup: index out of range for table of {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return record("embedding_lookup", table.data[idx], (table,), bw)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Constant ``value`` wherever the boolean ``mask`` (broadcastable) is set."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return record("masked_fill", out, (x,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype),))


def replace_rows(x: Tensor, row_mask: np.ndarray, token: Tensor) -> Tensor:
    """Swap every feature row flagged in ``row_mask`` (shape ``x.shape[:-1]``) for ``token``."""
    row_mask = np.asarray(row_mask, dtype=bool)
    if row_mask.shape != x.shape[:-1] or token.shape != (x.shape[-1],):
        raise DimensionError(f"replace_rows: mask {row_mask.shape}, token {token.shape} vs features {x.shape}")
    m = row_mask[..., None]
    out = np.where(m, token.data, x.data)

    def bw(g):
        return np.where(m, 0.0, g).astype(g.dtype), g[row_mask].sum(axis=0)

    return record("replace_rows", out, (x, token), bw)


# -- losses ------------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood over every (non-ignored) position.

    ``logits`` has classes on the last axis; ``targets`` holds integer class
    indices with the remaining shape.
    """
    tgt = np.asarray(targets)
    C = logits.shape[-1]
    if tgt.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {tgt.shape}")
    valid = np.ones(tgt.shape, dtype=bool) if ignore_index is None else tgt != ignore_index
    if np.any((tgt[valid] < 0) | (tgt[valid] >= C)):
        raise LabelError(f"cross_entropy: target index outside [0, {C})")
    flat = logits.data.reshape(-1, C)
    t = np.where(valid, tgt, 0).reshape(-1)
    v = valid.reshape(-1)
    n = max(int(v.sum()), 1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(len(t)), t]
    loss = np.asarray((nll * v).sum() / n, dtype=logits.dtype)

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(len(t)), t] -= 1.0
        p *= (v / n)[:, None]
        return ((g * p).reshape(logits.shape).astype(logits.dtype),)

    return record("cross_entropy", loss, (logits,), bw)
