"""Spike-driven attention: SDSA gating along the time or the sequence axis.

Tensors are laid out ``[T, B, L, D]``.  The temporal stage sums ``q AND k``
over T, so every time step sees the whole spike train of its position; the
sequential stage sums over L within each time step.  All operands of the
weight layers are spikes, so every product has at least one binary factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import instrument
from .module import Module, kaiming_uniform, ones, zeros
from .neurons import IntegrityError, LIFParams, LIFState, firing_rate, is_binary, lif_step, smooth_mode, sn_forward
from .tensor import BatchNormState, DimensionError, Tensor, as_tensor, batch_norm, layer_norm, linear

TEMPORAL = "temporal"
SEQUENTIAL = "sequential"
_AXES = {TEMPORAL: 0, SEQUENTIAL: 2, "T": 0, "L": 2, 0: 0, 2: 2}

VARIANTS = ("stsa", "sdsa-only", "temporal-only")


@dataclass
class RunContext:
    """Per-forward settings shared by every layer."""

    training: bool = True
    mask: np.ndarray | None = None  # [1, B, L, 1], 1 at valid positions
    lengths: np.ndarray | None = None  # [B]

    @classmethod
    def for_lengths(cls, lengths, max_len: int, training: bool = True) -> "RunContext":
        lengths = np.asarray(lengths, dtype=np.int64)
        mask = (np.arange(max_len)[None, :] < lengths[:, None]).astype(np.float64)
        return cls(training, mask[None, :, :, None], lengths)


@dataclass
class AttentionTrace:
    rates: dict = field(default_factory=dict)
    ac_ops: dict = field(default_factory=dict)


class AttentionParams(Module):
    def __init__(self, d: int, rng: np.random.Generator, lif: LIFParams | None = None):
        self.w_q = kaiming_uniform(rng, (d, d), d)
        self.w_k = kaiming_uniform(rng, (d, d), d)
        self.w_v = kaiming_uniform(rng, (d, d), d)
        self.bn_q = BatchNormState.create(d)
        self.bn_k = BatchNormState.create(d)
        self.bn_v = BatchNormState.create(d)
        self.w_out = zeros((d, d))
        self.b_out = zeros((d,))
        self.ln_gain = ones((d,))
        self.ln_offset = zeros((d,))
        self.lif = lif or LIFParams()

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]


def _mix_axis(mix_axis) -> int:
    try:
        return _AXES[mix_axis]
    except KeyError:
        raise ValueError(f"mix_axis must be temporal (T) or sequential (L), got {mix_axis!r}") from None


def gate_params(lif: LIFParams) -> LIFParams:
    return replace(lif, v_th=lif.v_re + (lif.v_th - lif.v_re) / lif.tau)


def sdsa_gate(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mix_axis,
    lif: LIFParams | None = None,
    mask: np.ndarray | None = None,
    trace: AttentionTrace | None = None,
    name: str | None = None,
) -> Tensor:
    """``SN(sum_{mix_axis}(q * k)) * v`` for binary ``[T, B, L, D]`` operands.

    Collapsing T leaves no time axis, so the temporal gate is a single LIF
    update from rest.  The sequential gate keeps T and runs the usual
    serial LIF dynamics over it.  The gate neuron's threshold is lowered to
    ``v_re + (v_th - v_re) / tau`` so that, from rest, it fires exactly when
    the coincidence count reaches ``v_th - v_re``.
    """
    lif = gate_params(lif or LIFParams())
    axis = _mix_axis(mix_axis)
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise DimensionError(f"sdsa_gate needs equal [T,B,L,D] shapes, got {q.shape}, {k.shape}, {v.shape}")
    if not smooth_mode():
        for label, t in (("q", q), ("k", k), ("v", v)):
            if not is_binary(t.data):
                raise IntegrityError(f"sdsa_gate operand {label} is not binary")
    qk = q * k
    if mask is not None:
        qk = qk * mask
    summed = qk.sum(axis=axis, keepdims=True)
    if axis == 0:
        gate, _, _ = lif_step(summed, LIFState.initial(summed.shape, lif), lif)
    else:
        gate = sn_forward(summed, lif)
    out = gate * v
    ops = int(np.count_nonzero(qk.data))
    if name:
        instrument.record_attention_core(f"{name}.core", qk.data, axis, mask=mask)
    if trace is not None and not smooth_mode():
        trace.rates["gate"] = firing_rate(gate)
        trace.rates["out"] = firing_rate(out)
        trace.ac_ops["core"] = trace.ac_ops.get("core", 0) + ops
    return out


def _site(name: str | None, suffix: str, s: Tensor, ctx: RunContext, trace: AttentionTrace | None) -> None:
    if name:
        instrument.record_site(f"{name}.{suffix}", s.data, ctx.mask)
    if trace is not None and not smooth_mode():
        trace.rates[suffix] = firing_rate(s)


def attention_stage(
    x: Tensor,
    p: AttentionParams,
    mix_axis,
    ctx: RunContext | None = None,
    name: str | None = None,
    trace: AttentionTrace | None = None,
) -> Tensor:
    """Spike, project to q/k/v, gate along ``mix_axis``, then ``LN(x + Linear(gated))``."""
    ctx = ctx or RunContext()
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[-1] != p.dim:
        raise DimensionError(f"attention expects [T,B,L,{p.dim}], got {x.shape}")
    if x.shape[0] < 1:
        raise DimensionError("attention needs T >= 1")
    s = sn_forward(x, p.lif, ctx.mask)
    _site(name, "input", s, ctx, trace)

    proj = [linear(s, w) for w in (p.w_q, p.w_k, p.w_v)]
    if name:
        instrument.record_weight_layer(
            f"{name}.qkv",
            "qkv",
            s.data,
            np.stack([p.w_q.data, p.w_k.data, p.w_v.data]),
            dense_out=np.stack([t.data for t in proj]),
            mask=ctx.mask,
            seq_lengths=ctx.lengths if ctx.lengths is not None else [x.shape[2]] * x.shape[1],
        )
    qkv = []
    for label, pr, bn in zip("qkv", proj, (p.bn_q, p.bn_k, p.bn_v)):
        spikes = sn_forward(batch_norm(pr, bn, ctx.training, ctx.mask), p.lif, ctx.mask)
        _site(name, label, spikes, ctx, trace)
        qkv.append(spikes)
    q, k, v = qkv
    gated = sdsa_gate(q, k, v, mix_axis, p.lif, mask=ctx.mask, trace=trace, name=name)
    _site(name, "linear", gated, ctx, trace)
    out = linear(gated, p.w_out)
    if name:
        instrument.record_weight_layer(f"{name}.linear", "linear", gated.data, p.w_out.data, dense_out=out.data, mask=ctx.mask)
    if trace is not None:
        trace.ac_ops["qkv"] = trace.ac_ops.get("qkv", 0) + 3 * int(np.count_nonzero(s.data)) * p.dim
        trace.ac_ops["linear"] = trace.ac_ops.get("linear", 0) + int(np.count_nonzero(gated.data)) * p.dim
    return layer_norm(x + out + p.b_out, p.ln_gain, p.ln_offset)


def spiking_temporal_attention(x_prev, params: AttentionParams, ctx=None, name=None, trace=None) -> Tensor:
    return attention_stage(x_prev, params, TEMPORAL, ctx, name, trace)


def spiking_sequential_attention(sigma, params: AttentionParams, ctx=None, name=None, trace=None) -> Tensor:
    return attention_stage(sigma, params, SEQUENTIAL, ctx, name, trace)


class STSAParams(Module):
    """Attention block parameters for one of the three variants."""

    def __init__(self, d: int, rng: np.random.Generator, lif: LIFParams | None = None, variant: str = "stsa"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {variant!r}; choose from {VARIANTS}")
        self.variant = variant
        if variant in ("stsa", "temporal-only"):
            self.temporal = AttentionParams(d, rng, lif)
        if variant in ("stsa", "sdsa-only"):
            self.sequential = AttentionParams(d, rng, lif)


def stsa(x_prev, temporal: AttentionParams, sequential: AttentionParams, ctx=None, name=None, trace=None) -> Tensor:
    """Temporal mixing first, then sequential mixing."""
    tn = f"{name}.temporal" if name else None
    sn = f"{name}.sequential" if name else None
    sigma = spiking_temporal_attention(x_prev, temporal, ctx, tn, trace)
    return spiking_sequential_attention(sigma, sequential, ctx, sn, trace)


def sdsa_only_block(x_prev, sequential: AttentionParams, ctx=None, name=None, trace=None) -> Tensor:
    return spiking_sequential_attention(x_prev, sequential, ctx, f"{name}.sequential" if name else None, trace)


def temporal_only_block(x_prev, temporal: AttentionParams, ctx=None, name=None, trace=None) -> Tensor:
    return spiking_temporal_attention(x_prev, temporal, ctx, f"{name}.temporal" if name else None, trace)


def attention_block(x_prev, p: STSAParams, ctx=None, name=None, trace=None) -> Tensor:
    if p.variant == "stsa":
        return stsa(x_prev, p.temporal, p.sequential, ctx, name, trace)
    if p.variant == "sdsa-only":
        return sdsa_only_block(x_prev, p.sequential, ctx, name, trace)
    return temporal_only_block(x_prev, p.temporal, ctx, name, trace)


def time_dependency(p: STSAParams, x, ctx: RunContext | None = None, delta: float = 2.0, seed: int = 0) -> np.ndarray:
    """``dep[t, t2]``: max |change| of the block output at time t after bumping the input at t2.

    The bump is a random direction (a uniform shift would vanish under the
    layer norm).  Uses eval-mode normalisation; batch statistics pooled over
    T would couple every time step regardless of the attention layout.
    """
    ctx = ctx or RunContext(training=False)
    if ctx.training:
        raise ValueError("time_dependency needs an eval-mode context")
    x = np.asarray(as_tensor(x).data, dtype=np.float64)
    base = attention_block(Tensor(x), p, ctx).data
    T = x.shape[0]
    direction = np.random.default_rng(seed).standard_normal(x.shape[1:])
    dep = np.zeros((T, T))
    for t2 in range(T):
        bumped = x.copy()
        bumped[t2] += delta * direction
        out = attention_block(Tensor(bumped), p, ctx).data
        dep[:, t2] = np.abs(out - base).reshape(T, -1).max(axis=1)
    return dep
