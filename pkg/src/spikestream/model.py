"""The spiking text-to-speech network.

Data flow, with every activation laid out ``[T, B, L, D]``::

    tokens -> embed -> N encoder layers -> variance adaptor -> length regulator
           -> M decoder layers -> spiking mel head (coarse) -> spiking postnet (fine)

Each encoder/decoder layer is ``x = LN(u + ff(u))`` with ``u`` the attention
block output.  Mel outputs are averaged over the spike time axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import instrument
from .attention import VARIANTS, RunContext, STSAParams, attention_block
from .module import Module, kaiming_uniform, ones, zeros
from .neurons import LIFParams, sn_forward
from .tensor import (
    ConfigurationError,
    ContractError,
    Tensor,
    abs_,
    as_tensor,
    conv1d_channels_last,
    layer_norm,
    linear,
    mean,
    sinusoid_table,
    take,
)


class VocabularyError(ValueError):
    pass


class EmptyOutputError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    T: int = 4
    N: int = 4
    M: int = 6
    D: int = 256
    vocab_size: int = 64
    L_max: int = 256
    n_mel: int = 80
    ff_kernel: int = 3
    pred_convs: int = 3
    pred_kernel: int = 3
    postnet_convs: int = 6
    postnet_kernel: int = 5
    attention: str = "stsa"
    decoder_pos_embed: bool = False
    tau: float = 2.0
    v_th: float = 1.0
    v_re: float = 0.0
    alpha: float = 2.0
    detach_reset: bool = True
    w_mel_coarse: float = 1.0
    w_mel_fine: float = 1.0
    w_duration: float = 1.0
    w_pitch: float = 1.0
    w_energy: float = 1.0
    seed: int = 0
    lr: float = 1e-3
    clip: float = 1.0
    batch_size: int = 8
    steps: int = 500

    def __post_init__(self):
        if self.T < 1:
            raise ConfigurationError(f"T must be >= 1, got {self.T}")
        if self.N < 1 or self.M < 1:
            raise ConfigurationError(f"N and M must be >= 1, got N={self.N}, M={self.M}")
        if self.D % 2:
            raise ConfigurationError(f"D must be even for sinusoidal embeddings, got {self.D}")
        for k in ("ff_kernel", "pred_kernel", "postnet_kernel"):
            if getattr(self, k) % 2 == 0:
                raise ConfigurationError(f"{k} must be odd, got {getattr(self, k)}")
        if self.pred_convs < 1 or self.postnet_convs < 1:
            raise ConfigurationError("predictor and postnet need at least one conv")
        if self.attention not in VARIANTS:
            raise ConfigurationError(f"attention must be one of {VARIANTS}, got {self.attention!r}")
        self.lif  # validates the neuron parameters

    @property
    def lif(self) -> LIFParams:
        return LIFParams(self.tau, self.v_th, self.v_re, self.alpha, self.detach_reset)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(T=2, N=1, M=1, D=8, vocab_size=6, L_max=16, n_mel=4, postnet_kernel=3)
        base.update(kw)
        return cls(**base)

    @classmethod
    def reference(cls, **kw) -> "ModelConfig":
        base = dict(T=2, N=2, M=2, D=32, vocab_size=16, L_max=8, n_mel=20, seed=42, steps=500, batch_size=8)
        base.update(kw)
        return cls(**base)


@dataclass
class PhonemeBatch:
    tokens: np.ndarray  # [B, L] int
    lengths: np.ndarray  # [B]
    durations: np.ndarray | None = None  # [B, L] int
    pitch: np.ndarray | None = None  # [B, L]
    energy: np.ndarray | None = None  # [B, L]
    mel: np.ndarray | None = None  # [B, L', n_mel]
    mel_lengths: np.ndarray | None = None  # [B]

    @property
    def has_targets(self) -> bool:
        return self.durations is not None and self.mel is not None

    @classmethod
    def from_tokens(cls, tokens) -> "PhonemeBatch":
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        return cls(tokens, np.full(tokens.shape[0], tokens.shape[1], dtype=np.int64))


@dataclass
class ModelOutput:
    o_coarse: Tensor  # [B, L', n_mel]
    o_fine: Tensor
    d_hat: Tensor  # [B, L], log(d + 1) domain
    p_hat: Tensor
    e_hat: Tensor
    durations: np.ndarray  # durations used for length regulation
    mel_lengths: np.ndarray
    mel_mask: np.ndarray  # [B, L']


# building blocks


class Embedding(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.table = Tensor(rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.D)), requires_grad=True)


def embed(tokens, table: Tensor, T: int) -> Tensor:
    """``z + e_tem[t] + e_seq[l]`` broadcast to ``[T, B, L, D]``."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    vocab, d = table.shape
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise VocabularyError(f"token ids must lie in [0, {vocab}), got range [{tokens.min()}, {tokens.max()}]")
    z = take(table, tokens, axis=0)  # [B, L, D]
    e_tem = sinusoid_table(T, d)[:, None, None, :]
    e_seq = sinusoid_table(tokens.shape[1], d)[None, None, :, :]
    return z.reshape((1,) + z.shape) + (e_tem + e_seq)


class FeedForward(Module):
    def __init__(self, d: int, k: int, rng: np.random.Generator):
        self.w1 = kaiming_uniform(rng, (d, d, k), d * k)
        self.b1 = zeros((d,))
        self.w2 = kaiming_uniform(rng, (d, d, k), d * k)
        self.b2 = zeros((d,))


def _spiking_conv(x: Tensor, w: Tensor, b: Tensor, lif: LIFParams, ctx: RunContext, name: str | None) -> Tensor:
    s = sn_forward(x, lif, ctx.mask)
    y = conv1d_channels_last(s, w, b)
    if name:
        instrument.record_site(name, s.data, ctx.mask)
        instrument.record_weight_layer(name, "conv", s.data, w.data, mask=ctx.mask)
    return y


def spiking_feedforward(u: Tensor, p: FeedForward, lif: LIFParams, ctx: RunContext | None = None, name: str | None = None) -> Tensor:
    """Two rounds of SN -> conv1d over L; returns a membrane-valued tensor."""
    ctx = ctx or RunContext()
    h = _spiking_conv(u, p.w1, p.b1, lif, ctx, f"{name}.conv1" if name else None)
    return _spiking_conv(h, p.w2, p.b2, lif, ctx, f"{name}.conv2" if name else None)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.attn = STSAParams(cfg.D, rng, cfg.lif, cfg.attention)
        self.ff = FeedForward(cfg.D, cfg.ff_kernel, rng)
        self.ln_gain = ones((cfg.D,))
        self.ln_offset = zeros((cfg.D,))


def encoder_layer(x_prev: Tensor, p: EncoderLayer, lif: LIFParams, ctx: RunContext | None = None, name: str | None = None) -> Tensor:
    ctx = ctx or RunContext()
    u = attention_block(x_prev, p.attn, ctx, name)
    f = spiking_feedforward(u, p.ff, lif, ctx, f"{name}.ff" if name else None)
    return layer_norm(u + f, p.ln_gain, p.ln_offset)


class Predictor(Module):
    def __init__(self, d: int, n_convs: int, k: int, rng: np.random.Generator):
        self.convs = [_PredictorConv(d, k, rng) for _ in range(n_convs)]
        self.w_head = kaiming_uniform(rng, (d, 1), d)
        self.b_head = zeros((1,))


class _PredictorConv(Module):
    def __init__(self, d: int, k: int, rng: np.random.Generator):
        self.w = kaiming_uniform(rng, (d, d, k), d * k)
        self.b = zeros((d,))
        self.ln_gain = ones((d,))
        self.ln_offset = zeros((d,))


def predictor(x: Tensor, p: Predictor, lif: LIFParams, ctx: RunContext | None = None, name: str | None = None) -> tuple[Tensor, Tensor]:
    """Stacked (SN -> conv -> LN) stages, then SN -> linear to one channel.

    Returns (feature ``[T,B,L,D]``, scalar head ``[B,L]`` averaged over T).
    """
    ctx = ctx or RunContext()
    h = x
    for i, c in enumerate(p.convs):
        h = layer_norm(_spiking_conv(h, c.w, c.b, lif, ctx, f"{name}.conv{i + 1}" if name else None), c.ln_gain, c.ln_offset)
    s = sn_forward(h, lif, ctx.mask)
    head = linear(s, p.w_head, p.b_head)
    if name:
        instrument.record_site(f"{name}.linear", s.data, ctx.mask)
        instrument.record_weight_layer(f"{name}.linear", "linear", s.data, p.w_head.data, mask=ctx.mask)
    scalar = mean(head, axis=0).reshape(head.shape[1:3])
    return h, scalar


class VarianceAdaptor(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.duration = Predictor(cfg.D, cfg.pred_convs, cfg.pred_kernel, rng)
        self.pitch = Predictor(cfg.D, cfg.pred_convs, cfg.pred_kernel, rng)
        self.energy = Predictor(cfg.D, cfg.pred_convs, cfg.pred_kernel, rng)
        self.ln1_gain = ones((cfg.D,))
        self.ln1_offset = zeros((cfg.D,))
        self.ln2_gain = ones((cfg.D,))
        self.ln2_offset = zeros((cfg.D,))


def durations_from_log(d_hat: np.ndarray) -> np.ndarray:
    """Invert the ``log(d + 1)`` target: ``max(round(exp(d_hat) - 1), 0)``."""
    return np.maximum(np.round(np.exp(np.asarray(d_hat)) - 1.0), 0).astype(np.int64)


def length_regulator(u: Tensor, durations) -> tuple[Tensor, np.ndarray]:
    """Repeat position ``l`` of ``u[T,B,L,D]`` ``durations[b, l]`` times along L.

    Items are right-padded with zeros to the longest expansion; returns the
    expanded tensor and the per-item lengths.
    """
    u = as_tensor(u)
    d = np.atleast_2d(np.asarray(durations))
    t, b, length, ch = u.shape
    if d.shape != (b, length):
        raise ContractError(f"durations shape {d.shape} does not match [B, L] = {(b, length)}")
    if np.any(d < 0):
        raise ContractError("durations must be non-negative")
    d = d.astype(np.int64)
    out_lengths = d.sum(axis=1)
    l_out = int(out_lengths.max()) if b else 0
    index = np.zeros((b, l_out), dtype=np.int64)
    valid = np.zeros((b, l_out))
    for i in range(b):
        rep = np.repeat(np.arange(length), d[i])
        index[i, : len(rep)] = i * length + rep
        valid[i, : len(rep)] = 1.0
    flat = u.reshape(t, b * length, ch)
    y = take(flat, index.reshape(-1), axis=1).reshape(t, b, l_out, ch)
    return y * valid[None, :, :, None], out_lengths


def variance_adaptor(
    x_n: Tensor,
    p: VarianceAdaptor,
    lif: LIFParams,
    ctx: RunContext,
    durations=None,
    name: str | None = "variance",
):
    """Predict duration / pitch / energy and expand to frame rate.

    With ``durations`` given (training) they drive the length regulator;
    otherwise rounded predictions do.  Returns (y0, d_hat, p_hat, e_hat,
    durations used, frame lengths).
    """
    nm = (lambda s: f"{name}.{s}") if name else (lambda s: None)
    _, d_hat = predictor(x_n, p.duration, lif, ctx, nm("duration"))
    p_feat, p_hat = predictor(x_n, p.pitch, lif, ctx, nm("pitch"))
    h1 = layer_norm(x_n + p_feat, p.ln1_gain, p.ln1_offset)
    e_feat, e_hat = predictor(h1, p.energy, lif, ctx, nm("energy"))
    h2 = layer_norm(h1 + e_feat, p.ln2_gain, p.ln2_offset)
    phon_mask = ctx.mask[0, :, :, 0] if ctx.mask is not None else np.ones(d_hat.shape)
    if durations is None:
        durations = durations_from_log(d_hat.data) * phon_mask.astype(np.int64)
        totals = durations.sum(axis=1)
        if np.any(totals == 0):
            bad = np.flatnonzero(totals == 0).tolist()
            raise EmptyOutputError(
                f"predicted total duration is 0 for batch items {bad}; "
                f"max predicted log-duration {float(d_hat.data.max()):.3f}"
            )
    else:
        durations = np.asarray(durations, dtype=np.int64) * phon_mask.astype(np.int64)
    y0, lengths = length_regulator(h2, durations)
    return y0, d_hat, p_hat, e_hat, durations, lengths


class PostNet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, m, k = cfg.D, cfg.n_mel, cfg.postnet_kernel
        self.w_mel = kaiming_uniform(rng, (d, m), d)
        self.b_mel = zeros((m,))
        chans = [m] + [d] * (cfg.postnet_convs - 1) + [m]
        self.convs = []
        for i in range(cfg.postnet_convs):
            c = Module()
            c.w = kaiming_uniform(rng, (chans[i + 1], chans[i], k), chans[i] * k)
            c.b = zeros((chans[i + 1],))
            self.convs.append(c)
        # the refinement starts as a no-op residual
        self.convs[-1].w = zeros(self.convs[-1].w.shape)


def decoder_stack_and_postnet(y0: Tensor, layers, post: PostNet, lif: LIFParams, ctx: RunContext, name: str | None = "decoder"):
    """Decoder layers, spiking mel head and spiking postnet; returns (coarse, fine) ``[B, L', n_mel]``."""
    y = y0
    for i, layer in enumerate(layers):
        y = encoder_layer(y, layer, lif, ctx, f"{name}.{i}" if name else None)
    pn = "postnet" if name else None
    s = sn_forward(y, lif, ctx.mask)
    o = linear(s, post.w_mel, post.b_mel)
    if pn:
        instrument.record_site(f"{pn}.linear", s.data, ctx.mask)
        instrument.record_weight_layer(f"{pn}.linear", "linear", s.data, post.w_mel.data, mask=ctx.mask)
    frame_mask = ctx.mask[0] if ctx.mask is not None else 1.0  # [B, L', 1]
    coarse = mean(o, axis=0) * frame_mask
    r = o
    for i, c in enumerate(post.convs):
        r = _spiking_conv(r, c.w, c.b, lif, ctx, f"{pn}.conv{i + 1}" if pn else None)
    fine = coarse + mean(r, axis=0) * frame_mask
    return coarse, fine


class SpikingTTS(Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.embedding = Embedding(cfg, rng)
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.N)]
        self.variance = VarianceAdaptor(cfg, rng)
        self.decoder = [EncoderLayer(cfg, rng) for _ in range(cfg.M)]
        self.postnet = PostNet(cfg, rng)

    def encode(self, batch: PhonemeBatch, ctx: RunContext) -> Tensor:
        x = embed(batch.tokens, self.embedding.table, self.cfg.T)
        for i, layer in enumerate(self.encoder):
            x = encoder_layer(x, layer, self.cfg.lif, ctx, f"encoder.{i}")
        return x

    def forward(self, batch: PhonemeBatch, training: bool = True, teacher_forcing: bool = True) -> ModelOutput:
        cfg = self.cfg
        if batch.tokens.shape[1] > cfg.L_max:
            raise ContractError(f"phoneme sequence of length {batch.tokens.shape[1]} exceeds L_max={cfg.L_max}")
        ctx = RunContext.for_lengths(batch.lengths, batch.tokens.shape[1], training)
        x_n = self.encode(batch, ctx)
        if teacher_forcing and batch.durations is None:
            raise ContractError("teacher-forced forward needs target durations")
        durations = batch.durations if teacher_forcing else None
        y0, d_hat, p_hat, e_hat, used, mel_lengths = variance_adaptor(x_n, self.variance, cfg.lif, ctx, durations)
        if cfg.decoder_pos_embed:
            y0 = y0 + sinusoid_table(y0.shape[2], cfg.D)[None, None]
        mctx = RunContext.for_lengths(mel_lengths, y0.shape[2], training)
        coarse, fine = decoder_stack_and_postnet(y0, self.decoder, self.postnet, cfg.lif, mctx)
        return ModelOutput(coarse, fine, d_hat, p_hat, e_hat, used, mel_lengths, mctx.mask[0, :, :, 0])


# loss


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict = field(default_factory=dict)


def _masked_mean(values: Tensor, mask: np.ndarray, width: int = 1) -> Tensor:
    denom = float(mask.sum()) * width
    return (values * mask).sum() / max(denom, 1.0)


def loss(out: ModelOutput, batch: PhonemeBatch, cfg: ModelConfig | None = None) -> LossBreakdown:
    """Masked MAE on both mel outputs plus MSE on log-duration, pitch and energy."""
    cfg = cfg or ModelConfig.tiny()
    if not batch.has_targets or batch.pitch is None or batch.energy is None:
        raise ContractError("loss needs complete targets")
    mel = np.asarray(batch.mel, dtype=np.float64)
    if out.o_coarse.shape != mel.shape:
        raise ContractError(f"mel output {out.o_coarse.shape} does not match target {mel.shape}")
    b, length = batch.tokens.shape
    phon_mask = (np.arange(length)[None, :] < np.asarray(batch.lengths)[:, None]).astype(np.float64)
    frame_mask = (np.arange(mel.shape[1])[None, :] < np.asarray(batch.mel_lengths)[:, None]).astype(np.float64)
    if frame_mask.shape != out.mel_mask.shape:
        raise ContractError(f"frame mask {frame_mask.shape} does not match output mask {out.mel_mask.shape}")
    fm = frame_mask[:, :, None]
    n_mel = mel.shape[2]
    comps = {
        "mel_coarse": _masked_mean(abs_(out.o_coarse - mel), fm, n_mel),
        "mel_fine": _masked_mean(abs_(out.o_fine - mel), fm, n_mel),
        "duration": _masked_mean((out.d_hat - np.log(np.asarray(batch.durations, dtype=np.float64) + 1.0)) ** 2, phon_mask),
        "pitch": _masked_mean((out.p_hat - np.asarray(batch.pitch, dtype=np.float64)) ** 2, phon_mask),
        "energy": _masked_mean((out.e_hat - np.asarray(batch.energy, dtype=np.float64)) ** 2, phon_mask),
    }
    weights = {
        "mel_coarse": cfg.w_mel_coarse,
        "mel_fine": cfg.w_mel_fine,
        "duration": cfg.w_duration,
        "pitch": cfg.w_pitch,
        "energy": cfg.w_energy,
    }
    total = None
    for k, v in comps.items():
        term = v * weights[k]
        total = term if total is None else total + term
    return LossBreakdown(total, {k: v.item() for k, v in comps.items()})
