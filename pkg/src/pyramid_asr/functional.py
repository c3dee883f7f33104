"""Differentiable primitives used by the acoustic model.

All sequence ops take ``[..., T, C]`` arrays: time on axis -2, channels last.
"""

import logging

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, _sigmoid, as_tensor, concat, make_node, matmul, relu, sigmoid, swish

log = logging.getLogger(__name__)

NORM_EPS = 1e-5
BN_MOMENTUM = 0.9


def _shifted_windows(xp, k, dilation, T):
    # xp is time-padded; window i is the input seen by kernel tap i
    return [xp[..., i * dilation:i * dilation + T, :] for i in range(k)]


def conv1d(x, kernel, bias=None, dilation=1, mode="full"):
    """Dilated 1-D convolution with zero "same" padding.

    ``mode`` selects the kernel layout:

    * ``"full"``: kernel ``[k, C_in, C_out]``
    * ``"pointwise"``: kernel ``[1, C_in, C_out]``
    * ``"depthwise"``: kernel ``[k, C]``, one filter per channel

    ``out[t, o] = sum_n sum_c x[t + n*dilation, c] * kernel[n + r, c, o]`` for
    ``n`` in ``-r..r`` with ``k = 2r + 1``; out-of-range inputs read as zero.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if dilation < 1 or int(dilation) != dilation:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd (2r+1), got {k}")
    if mode == "pointwise" and k != 1:
        raise ValueError(f"pointwise convolution needs kernel size 1, got {k}")
    if mode == "depthwise":
        if kernel.ndim != 2 or kernel.shape[1] != x.shape[-1]:
            raise DimensionError(f"depthwise kernel {kernel.shape} does not fit input {x.shape}")
        out = _depthwise(x, kernel, dilation)
    elif mode in ("full", "pointwise"):
        if kernel.ndim != 3 or kernel.shape[1] != x.shape[-1]:
            raise DimensionError(f"conv kernel {kernel.shape} does not fit input {x.shape}")
        out = _conv_full(x, kernel, dilation)
    else:
        raise ValueError(f"unknown conv mode {mode!r}")
    if bias is not None:
        out = out + bias
    return out


def _conv_full(x, w, dilation):
    k, cin, cout = w.shape
    T = x.shape[-2]
    pad = (k // 2) * dilation
    lead = x.shape[:-2]
    if k == 1:
        cols = x.data
    else:
        widths = [(0, 0)] * x.ndim
        widths[-2] = (pad, pad)
        xp = np.pad(x.data, widths)
        cols = np.concatenate(_shifted_windows(xp, k, dilation, T), axis=-1)
    w2 = w.data.reshape(k * cin, cout)
    out = cols @ w2

    def backward(g):
        gw = np.tensordot(cols, g, axes=(list(range(cols.ndim - 1)), list(range(g.ndim - 1))))
        gcols = g @ w2.T
        if k == 1:
            return gcols, gw.reshape(w.shape)
        gxp = np.zeros(lead + (T + 2 * pad, cin), dtype=g.dtype)
        for i in range(k):
            gxp[..., i * dilation:i * dilation + T, :] += gcols[..., i * cin:(i + 1) * cin]
        return gxp[..., pad:pad + T, :], gw.reshape(w.shape)

    return make_node(out, (x, w), backward)


def _depthwise(x, w, dilation):
    k, C = w.shape
    T = x.shape[-2]
    pad = (k // 2) * dilation
    widths = [(0, 0)] * x.ndim
    widths[-2] = (pad, pad)
    xp = np.pad(x.data, widths)
    wins = _shifted_windows(xp, k, dilation, T)
    out = np.zeros_like(x.data)
    for i in range(k):
        out += wins[i] * w.data[i]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        red = tuple(range(g.ndim - 1))
        for i in range(k):
            gxp[..., i * dilation:i * dilation + T, :] += g * w.data[i]
            gw[i] = (g * wins[i]).sum(axis=red)
        return gxp[..., pad:pad + T, :], gw

    return make_node(out, (x, w), backward)


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else out + bias


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return make_node(y, (x,), lambda g: (g - np.exp(y) * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps=NORM_EPS):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layer_norm params {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_node(out, (x, gamma, beta), backward)


class BatchNormState:
    """Affine params plus running statistics of one batch-norm site."""

    def __init__(self, dim, dtype=np.float64):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.tracked = 0


def batch_norm(x, bn, train, mask=None, eps=NORM_EPS):
    """Batch norm over every (batch, time) position of the last-axis features.

    In train mode statistics come from the valid positions selected by
    ``mask`` (``[..., T]`` of 0/1) and the running averages are updated with
    momentum 0.9. Masked positions are written as zeros.
    """
    D = x.shape[-1]
    flat = x.data.reshape(-1, D)
    m = np.ones((flat.shape[0], 1), dtype=x.dtype) if mask is None else \
        np.asarray(mask, dtype=x.dtype).reshape(-1, 1)
    gamma, beta = bn.gamma, bn.beta
    if train:
        n = m.sum()
        if n < 2:
            raise ValueError("batch_norm in train mode needs at least 2 valid positions")
        mu = (flat * m).sum(axis=0) / n
        xc = flat - mu
        var = (xc * xc * m).sum(axis=0) / n
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        bn.running_mean = BN_MOMENTUM * bn.running_mean + (1 - BN_MOMENTUM) * mu
        bn.running_var = BN_MOMENTUM * bn.running_var + (1 - BN_MOMENTUM) * var * n / (n - 1)
        bn.tracked += 1
        out = (xhat * gamma.data + beta.data) * m

        def backward(g):
            g = g.reshape(-1, D) * m
            dxhat = g * gamma.data
            dx = m * rstd * (dxhat - (dxhat * m).sum(axis=0) / n
                             - xhat * (dxhat * xhat * m).sum(axis=0) / n)
            return dx.reshape(x.shape), (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        if bn.tracked == 0:
            log.debug("batch_norm in infer mode before any train step; using initial running stats")
        rstd = 1.0 / np.sqrt(bn.running_var + eps)
        xhat = (flat - bn.running_mean) * rstd
        out = (xhat * gamma.data + beta.data) * m

        def backward(g):
            g = g.reshape(-1, D) * m
            return (g * gamma.data * rstd).reshape(x.shape), (g * xhat).sum(axis=0), g.sum(axis=0)

    return make_node(out.reshape(x.shape).astype(x.dtype, copy=False), (x, gamma, beta), backward)


def glu(x):
    C = x.shape[-1]
    if C % 2:
        raise DimensionError(f"glu needs an even last dimension, got {C}")
    h = C // 2
    a, b = x.data[..., :h], x.data[..., h:]
    s = _sigmoid(b)

    def backward(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return make_node(a * s, (x,), backward)


def activation(x, kind):
    if kind == "swish":
        return swish(x)
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "glu":
        return glu(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x, p, train, rng=None):
    """Inverted dropout; identity in infer mode or when ``p == 0``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,))


def mean_over_time(x, lengths=None):
    """Average over axis -2; with ``lengths`` only the first ``lengths[b]`` frames count."""
    if lengths is None:
        return x.mean(axis=-2)
    mask = time_mask(lengths, x.shape[-2], x.dtype)[..., None]
    inv = (1.0 / np.asarray(lengths, dtype=x.dtype)).reshape(mask.shape[:-2] + (1,))
    return (x * mask).sum(axis=-2) * inv


def time_mask(lengths, T, dtype=np.float64):
    lengths = np.asarray(lengths)
    return (np.arange(T) < lengths[..., None]).astype(dtype)


def apply_mask(x, mask):
    """Zero padded frames; ``mask`` is ``[..., T]`` of 0/1 or None."""
    if mask is None:
        return x
    return x * np.asarray(mask, dtype=x.dtype)[..., None]


__all__ = [
    "conv1d", "linear", "softmax", "log_softmax", "layer_norm", "batch_norm", "BatchNormState",
    "glu", "activation", "dropout", "mean_over_time", "time_mask", "apply_mask", "concat",
]
