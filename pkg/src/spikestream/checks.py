"""Finite-difference suites: one per primitive plus an end-to-end model check.

The end-to-end check runs the network with the smooth surrogate in the
forward pass and gradient flowing through the reset, so the tape gradient is
the true derivative of the function being differenced.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tn
from .model import ModelConfig, SpikingTTS, loss
from .neurons import LIFParams, sn_forward, spike, surrogate_forward
from .tensor import BatchNormState, GradCheckReport, finite_difference_check


def _param(rng, *shape, low=-1.0, high=1.0):
    return tn.Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def primitive_cases(rng: np.random.Generator) -> dict:
    """name -> (f, params); each f is a random linear functional of the op's output."""
    cases = {}

    def case(name, fn, *params):
        probe = np.random.default_rng(rng.integers(1 << 31))
        w = {}

        def f():
            out = fn(*params)
            if "w" not in w:
                w["w"] = probe.standard_normal(out.shape)
            return (out * w["w"]).sum()

        cases[name] = (f, list(params))

    case("add", lambda x, y: x + y, _param(rng, 3, 4), _param(rng, 3, 4))
    case("sub", lambda x, y: x - y, _param(rng, 3, 4), _param(rng, 4))
    case("mul", lambda x, y: x * y, _param(rng, 3, 4), _param(rng, 3, 1))
    case("div", lambda x, y: x / y, _param(rng, 3, 4), _param(rng, 3, 4, low=0.5, high=2.0))
    case("neg", lambda x: -x, _param(rng, 5))
    case("power", lambda x: x**3, _param(rng, 5))
    case("exp", tn.exp, _param(rng, 2, 3))
    case("log", tn.log, _param(rng, 2, 3, low=0.5, high=3.0))
    case("sqrt", tn.sqrt, _param(rng, 2, 3, low=0.5, high=3.0))
    case("abs", tn.abs_, tn.Tensor(rng.choice([-1, 1], size=(6,)) * rng.uniform(0.2, 1.0, size=6), requires_grad=True))
    case("tanh", tn.tanh, _param(rng, 2, 3))
    case("sum", lambda x: x.sum(axis=1, keepdims=True), _param(rng, 3, 4))
    case("mean", lambda x: x.mean(axis=0), _param(rng, 3, 4))
    case("reshape", lambda x: x.reshape((4, 3)), _param(rng, 3, 4))
    case("transpose", lambda x: x.transpose((1, 0, 2)), _param(rng, 2, 3, 4))
    case("broadcast", lambda x: tn.broadcast_to(x, (3, 4)), _param(rng, 1, 4))
    case("getitem", lambda x: x[1:, ::2], _param(rng, 3, 4))
    case("take", lambda x: tn.take(x, np.array([0, 0, 2, 1, 2]), axis=1), _param(rng, 2, 3))
    case("concat", lambda x, y: tn.concat([x, y], axis=1), _param(rng, 2, 3), _param(rng, 2, 2))
    case("stack", lambda x, y: tn.stack([x, y], axis=0), _param(rng, 2, 3), _param(rng, 2, 3))
    case("matmul", lambda x, y: x @ y, _param(rng, 2, 3, 4), _param(rng, 4, 5))
    case("linear", tn.linear, _param(rng, 2, 3, 4), _param(rng, 4, 3), _param(rng, 3))
    case("conv1d", tn.conv1d, _param(rng, 2, 3, 6), _param(rng, 4, 3, 3), _param(rng, 4))
    case("conv1d_channels_last", tn.conv1d_channels_last, _param(rng, 2, 5, 3), _param(rng, 2, 3, 5), _param(rng, 2))
    case("layer_norm", tn.layer_norm, _param(rng, 3, 6), _param(rng, 6, low=0.5, high=1.5), _param(rng, 6))

    bn = BatchNormState.create(4)
    bn.gain.data = rng.uniform(0.5, 1.5, size=4)
    bn.offset.data = rng.uniform(-0.5, 0.5, size=4)
    mask = np.ones((1, 2, 3, 1))
    mask[:, 1, 2:] = 0.0
    xb = _param(rng, 2, 2, 3, 4)
    case("batch_norm", lambda x, g, o: tn.batch_norm(x, bn, True, mask), xb, bn.gain, bn.offset)

    lif = LIFParams(detach_reset=False)

    def smooth_spike(u):
        with surrogate_forward():
            return spike(u, lif.alpha)

    def smooth_lif(x):
        with surrogate_forward():
            return sn_forward(x, lif)

    case("spike", smooth_spike, _param(rng, 8))
    case("lif", smooth_lif, _param(rng, 4, 2, 3, low=-0.5, high=2.5))
    return cases


def primitive_suite(tol: float = 1e-4, seed: int = 0) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    return {name: finite_difference_check(f, params, tol=tol) for name, (f, params) in primitive_cases(rng).items()}


@dataclass
class EndToEndResult:
    report: GradCheckReport
    n_params: int
    missing: list  # parameter names whose gradient never arrived


def gradcheck_config(cfg: ModelConfig | None = None) -> ModelConfig:
    cfg = cfg or ModelConfig.tiny()
    return replace(cfg, detach_reset=False)


def end_to_end(cfg: ModelConfig | None = None, samples: int = 200, tol: float = 1e-3, seed: int = 0, h: float = 1e-5) -> EndToEndResult:
    """Sampled finite-difference check of the total loss w.r.t. model parameters."""
    from .harness import collate, gen_synthetic

    cfg = gradcheck_config(cfg)
    ds = gen_synthetic(seed, 2, cfg.vocab_size, (3, 3), cfg.n_mel)
    batch = collate(ds.items)
    model = SpikingTTS(cfg, seed=seed)
    rng = np.random.default_rng(seed + 7)
    # lift the zero-initialised output projections so their inputs matter
    for p in model.parameters():
        if not p.data.any():
            p.data = rng.normal(0.0, 0.1, size=p.shape)
    named = list(model.named_parameters())
    params = [p for _, p in named]

    def f():
        with surrogate_forward():
            out = model.forward(batch, training=True)
            return loss(out, batch, cfg).total

    report = finite_difference_check(f, params, h=h, tol=tol, samples=samples, rng=rng)
    # one more pass to see which tensors received a gradient at all
    model.zero_grad()
    f().backward()
    missing = [n for n, p in named if p.grad is None]
    return EndToEndResult(report, sum(p.size for p in params), missing)
