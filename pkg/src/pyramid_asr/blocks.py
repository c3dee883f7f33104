"""Architecture blocks: ConvBlock, MHSA, DCNN-Attention, DualFusionNet, SENet, FFM.

Each block takes ``x`` shaped ``[..., T, C]``, an optional 0/1 ``mask`` of
shape ``[..., T]`` marking real (non-padded) frames, and a :class:`Context`.
Every block preserves ``T``.
"""

import numpy as np

from . import functional as F
from .errors import DimensionError
from .module import Context, Module, glorot, ones, zeros
from .tensor import Tensor, concat

MASK_SCORE = -1e30
DEPTHWISE_KERNEL = 15
DROPOUT = 0.1


def _mask_lengths(mask, x):
    if mask is None:
        return None
    return np.asarray(mask).sum(axis=-1)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float64):
        self.gamma = ones(dim, dtype)
        self.beta = zeros(dim, dtype)

    def __call__(self, x):
        return F.layer_norm(x, self.gamma, self.beta)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, dtype=np.float64):
        self.weight = glorot(rng, (d_in, d_out), d_in, d_out, dtype)
        if bias:
            self.bias = zeros(d_out, dtype)

    def __call__(self, x):
        return F.linear(x, self.weight, getattr(self, "bias", None))


class Conv1d(Module):
    """Dense dilated convolution with bias; kernel ``[k, d_in, d_out]``."""

    def __init__(self, rng, d_in, d_out, kernel_size=1, dilation=1, dtype=np.float64):
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        self.dilation = dilation
        self.weight = glorot(rng, (kernel_size, d_in, d_out), kernel_size * d_in, kernel_size * d_out, dtype)
        self.bias = zeros(d_out, dtype)

    def __call__(self, x):
        mode = "pointwise" if self.weight.shape[0] == 1 else "full"
        return F.conv1d(x, self.weight, self.bias, self.dilation, mode)


class ConvBlock(Module):
    """LayerNorm, pointwise conv (x expansion), GLU, depthwise conv, BN, swish, dropout, residual.

    With expansion ``e`` the GLU leaves ``e*d/2`` channels; unless that is
    ``d`` again a final pointwise projection maps back to ``d``.
    """

    def __init__(self, rng, d_model, expansion=2, kernel_size=DEPTHWISE_KERNEL, dropout=DROPOUT,
                 dtype=np.float64):
        if (expansion * d_model) % 2:
            raise DimensionError(f"expansion {expansion} x d_model {d_model} is odd; GLU cannot halve it")
        hidden = expansion * d_model // 2
        self.d_model = d_model
        self.p = dropout
        self.norm = LayerNorm(d_model, dtype)
        self.pointwise = Conv1d(rng, d_model, expansion * d_model, 1, dtype=dtype)
        self.depthwise = glorot(rng, (kernel_size, hidden), kernel_size, kernel_size, dtype)
        self.depthwise_bias = zeros(hidden, dtype)
        self.bn = F.BatchNormState(hidden, dtype)
        if hidden != d_model:
            self.project = Conv1d(rng, hidden, d_model, 1, dtype=dtype)

    def __call__(self, x, mask=None, ctx=Context()):
        if x.shape[-1] != self.d_model:
            raise DimensionError(f"ConvBlock expects {self.d_model} channels, got {x.shape}")
        h = F.glu(self.pointwise(self.norm(x)))
        h = F.apply_mask(h, mask)
        h = F.conv1d(h, self.depthwise, self.depthwise_bias, 1, "depthwise")
        h = F.swish(F.batch_norm(h, self.bn, ctx.train, mask))
        if hasattr(self, "project"):
            h = self.project(h)
        h = F.dropout(h, self.p, ctx.train, ctx.rng)
        return F.apply_mask(x + h, mask)


class MultiHeadSelfAttention(Module):
    """Pre-norm residual MHSA: ``x + Dropout(Concat(heads) W_O)`` over ``LayerNorm(x)``.

    Projections carry no bias. The attention weights of the last call are
    kept in ``self.attention`` as ``[..., heads, T, T]``.
    """

    def __init__(self, rng, d_model, heads, dropout=DROPOUT, dtype=np.float64):
        if d_model % heads:
            raise DimensionError(f"heads={heads} must divide d_model={d_model}")
        self.d_model = d_model
        self.heads = heads
        self.p = dropout
        self.norm = LayerNorm(d_model, dtype)
        self.w_q = glorot(rng, (d_model, d_model), d_model, d_model, dtype)
        self.w_k = glorot(rng, (d_model, d_model), d_model, d_model, dtype)
        self.w_v = glorot(rng, (d_model, d_model), d_model, d_model, dtype)
        self.w_o = glorot(rng, (d_model, d_model), d_model, d_model, dtype)
        self._attention = None

    @property
    def attention(self):
        return self._attention

    def _split(self, t):
        *lead, T, _ = t.shape
        dk = self.d_model // self.heads
        t = t.reshape(tuple(lead) + (T, self.heads, dk))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return t.transpose(*axes)

    def __call__(self, x, mask=None, ctx=Context()):
        T = x.shape[-2]
        if mask is not None and np.asarray(mask).shape[-1] > T:
            raise DimensionError(f"mask length {np.asarray(mask).shape[-1]} exceeds sequence length {T}")
        h = self.norm(x)
        q, k, v = (self._split(h @ w) for w in (self.w_q, self.w_k, self.w_v))
        dk = self.d_model // self.heads
        scores = (q @ k.transpose(*_swap_last(k.ndim))) * (1.0 / np.sqrt(dk))
        if mask is not None:
            m = np.asarray(mask, dtype=x.dtype)
            if m.shape[-1] < T:
                m = np.concatenate([m, np.zeros(m.shape[:-1] + (T - m.shape[-1],), x.dtype)], axis=-1)
            bias = ((1.0 - m) * MASK_SCORE)[..., None, None, :]
            scores = scores + bias
        weights = F.softmax(scores, axis=-1)
        self._attention = weights.data
        ctxv = weights @ v
        nd = ctxv.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        ctxv = ctxv.transpose(*axes)
        ctxv = ctxv.reshape(tuple(x.shape[:-1]) + (self.d_model,))
        out = F.dropout(ctxv @ self.w_o, self.p, ctx.train, ctx.rng)
        return x + out


def _swap_last(nd):
    return tuple(range(nd - 2)) + (nd - 1, nd - 2)


class DcnnAttention(Module):
    """Dilated conv (kernel 3, rate ``dilation``, ``d_in -> d_out``) followed by MHSA at ``d_out``."""

    def __init__(self, rng, d_in, d_out, dilation, heads, kernel_size=3, dropout=DROPOUT,
                 dtype=np.float64):
        self.d_in = d_in
        self.d_out = d_out
        self.dilation = dilation
        self.conv = Conv1d(rng, d_in, d_out, kernel_size, dilation, dtype)
        self.mhsa = MultiHeadSelfAttention(rng, d_out, heads, dropout, dtype)

    def __call__(self, x, mask=None, ctx=Context()):
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"DCNN-Attention expects {self.d_in} channels, got {x.shape}")
        h = self.conv(F.apply_mask(x, mask))
        if ctx.bypass_attention:
            return F.apply_mask(h, mask)
        return F.apply_mask(self.mhsa(h, mask, ctx), mask)


class DualFusion(Module):
    """Concat two branches, LayerNorm(2d), Linear(2d -> d), BatchNorm, Dropout."""

    def __init__(self, rng, d, dropout=DROPOUT, dtype=np.float64):
        self.d = d
        self.p = dropout
        self.norm = LayerNorm(2 * d, dtype)
        self.linear = Linear(rng, 2 * d, d, dtype=dtype)
        self.bn = F.BatchNormState(d, dtype)

    def __call__(self, a, b, mask=None, ctx=Context()):
        if a.shape != b.shape:
            raise DimensionError(f"DualFusion inputs differ: {a.shape} vs {b.shape}")
        h = self.linear(self.norm(concat([a, b], axis=-1)))
        h = F.batch_norm(h, self.bn, ctx.train, mask)
        return F.dropout(h, self.p, ctx.train, ctx.rng)


class SENet(Module):
    """Squeeze (time mean) and excitation gates ``sigmoid(W2 swish(W1 s + b1) + b2)``.

    The gates of the last call are kept in ``self.gates`` as ``[..., C]``.
    """

    def __init__(self, rng, channels, reduction=8, dtype=np.float64):
        if channels % reduction:
            raise DimensionError(f"reduction {reduction} must divide channel count {channels}")
        self.channels = channels
        self.fc1 = Linear(rng, channels, channels // reduction, dtype=dtype)
        self.fc2 = Linear(rng, channels // reduction, channels, dtype=dtype)
        self._gates = None

    @property
    def gates(self):
        return self._gates

    def __call__(self, x, mask=None, ctx=Context()):
        if x.shape[-1] != self.channels:
            raise DimensionError(f"SENet expects {self.channels} channels, got {x.shape}")
        squeeze = F.mean_over_time(x, _mask_lengths(mask, x))
        # keep a unit time axis so [T, C] and [B, T, C] share one path
        squeeze = squeeze.reshape(tuple(squeeze.shape[:-1]) + (1, self.channels))
        gates = F.activation(self.fc2(F.swish(self.fc1(squeeze))), "sigmoid")
        self._gates = gates.data[..., 0, :]
        return x * gates


class FeedForward(Module):
    """``LayerNorm(x + Linear2(Dropout(Relu(Linear1(x)))))`` with a 4x hidden layer."""

    def __init__(self, rng, d, expansion=4, dropout=DROPOUT, dtype=np.float64):
        self.d = d
        self.p = dropout
        self.linear1 = Linear(rng, d, expansion * d, dtype=dtype)
        self.linear2 = Linear(rng, expansion * d, d, dtype=dtype)
        self.norm = LayerNorm(d, dtype)

    @property
    def hidden(self):
        return self.linear1.weight.shape[1]

    def __call__(self, x, mask=None, ctx=Context()):
        h = F.dropout(F.activation(self.linear1(x), "relu"), self.p, ctx.train, ctx.rng)
        return F.apply_mask(self.norm(x + self.linear2(h)), mask)


__all__ = [
    "LayerNorm", "Linear", "Conv1d", "ConvBlock", "MultiHeadSelfAttention", "DcnnAttention",
    "DualFusion", "SENet", "FeedForward", "Tensor",
]
