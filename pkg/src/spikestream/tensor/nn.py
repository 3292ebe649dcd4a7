"""Layer primitives with hand-written backward passes.

conv1d, layer_norm and batch_norm are single tape nodes rather than
compositions of elementwise ops; the finite-difference suite checks each.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import DimensionError, Tensor, as_tensor, make, matmul, unbroadcast

LN_EPS = 1e-5
BN_EPS = 1e-5


class ConfigurationError(ValueError):
    pass


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` over the last axis; leading axes are flattened for speed."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    out = matmul(x.reshape(-1, x.shape[-1]), w)
    if b is not None:
        out = out + b
    return out.reshape(lead + (w.shape[-1],))


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded cross-correlation.

    x: [B, C_in, L], w: [C_out, C_in, K] with K odd, b: [C_out].
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise DimensionError(f"conv1d expects x[B,C,L] and w[O,C,K], got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d channel mismatch: x {x.shape} vs w {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d kernel size must be odd for same padding, got {k}")
    pad = k // 2
    length = x.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(xp, k, axis=2)  # [B, C_in, L, K]
    out = np.einsum("bclk,ock->bol", win, w.data, optimize=True)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None]
        parents.append(b)

    def bw(g):
        gw = np.einsum("bol,bclk->ock", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j : j + length] += np.einsum("bol,oc->bcl", g, w.data[:, :, j], optimize=True)
        grads = [gxp[:, :, pad : pad + length], gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return make(out, parents, bw, "conv1d")


def conv1d_channels_last(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """conv1d over axis -2 of ``x[..., L, C]``; returns ``[..., L, C_out]``."""
    lead = x.shape[:-2]
    length, c = x.shape[-2:]
    x3 = x.reshape(-1, length, c).transpose(0, 2, 1)
    y = conv1d(x3, w, b)
    return y.transpose(0, 2, 1).reshape(lead + (length, w.shape[0]))


def layer_norm(x: Tensor, gain: Tensor | None = None, offset: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    parents = [x]
    if gain is not None:
        gain = as_tensor(gain)
        out = out * gain.data
        parents.append(gain)
    if offset is not None:
        offset = as_tensor(offset)
        out = out + offset.data
        parents.append(offset)

    def bw(g):
        gx_hat = g * gain.data if gain is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append(unbroadcast(g * xhat, gain.shape))
        if offset is not None:
            grads.append(unbroadcast(g, offset.shape))
        return grads

    return make(out, parents, bw, "layer_norm")


@dataclass
class BatchNormState:
    """Affine parameters plus running statistics for one channel axis."""

    gain: Tensor
    offset: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = BN_EPS
    steps: int = field(default=0)

    @classmethod
    def create(cls, channels: int, **kw) -> "BatchNormState":
        return cls(
            gain=Tensor(np.ones(channels), requires_grad=True),
            offset=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            **kw,
        )


def batch_norm(x: Tensor, state: BatchNormState, training: bool, mask: np.ndarray | None = None) -> Tensor:
    """Normalise over every axis except the last (channel) one.

    The spike time axis is just another leading axis here, so statistics are
    pooled over time steps and batch items alike.  ``mask`` (broadcastable to
    ``x.shape[:-1] + (1,)``) restricts the statistics to valid positions.
    """
    x = as_tensor(x)
    c = x.shape[-1]
    if state.gain.shape != (c,):
        raise DimensionError(f"batch_norm channel mismatch: x {x.shape} vs gain {state.gain.shape}")
    axes = tuple(range(x.ndim - 1))
    gain, offset = state.gain, state.offset
    if not training:
        scale = gain.data / np.sqrt(state.running_var + state.eps)
        out = (x.data - state.running_mean) * scale + offset.data
        xhat = (x.data - state.running_mean) / np.sqrt(state.running_var + state.eps)

        def bw_eval(g):
            return g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make(out, (x, gain, offset), bw_eval, "batch_norm")

    if mask is None:
        m = np.ones(x.shape[:-1] + (1,))
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=x.data.dtype), x.shape[:-1] + (1,))
    count = m.sum()
    if count == 0:
        count = 1.0
    mu = (x.data * m).sum(axis=axes) / count
    xc = x.data - mu
    var = (m * xc * xc).sum(axis=axes) / count
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    out = xhat * gain.data + offset.data

    state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
    unbiased = var * count / max(count - 1.0, 1.0)
    state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    state.steps += 1

    def bw(g):
        gxh = g * gain.data
        # every output depends on the masked statistics, so sum over all positions
        sum_g = gxh.sum(axis=axes) / count
        sum_gx = (gxh * xhat).sum(axis=axes) / count
        gx = inv * (gxh - m * (sum_g + xhat * sum_gx))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make(out, (x, gain, offset), bw, "batch_norm")


def sinusoid_table(n: int, d: int) -> np.ndarray:
    """Standard transformer sine/cosine position table, shape [n, d]."""
    if d % 2:
        raise ConfigurationError(f"sinusoidal embedding needs an even width, got {d}")
    pos = np.arange(n)[:, None]
    div = np.power(10000.0, np.arange(0, d, 2) / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos / div)
    table[:, 1::2] = np.cos(pos / div)
    return table
