import numpy as np
import pytest

from spikestream import instrument
from spikestream.attention import (
    AttentionParams,
    RunContext,
    STSAParams,
    attention_block,
    attention_stage,
    gate_params,
    sdsa_gate,
    sdsa_only_block,
    spiking_sequential_attention,
    stsa,
    time_dependency,
)
from spikestream.neurons import IntegrityError, LIFParams
from spikestream.tensor import DimensionError, Tensor


def binary(rng, shape, rate=0.5):
    return (rng.random(shape) < rate).astype(float)


def loop_gate(q, k, v, axis, lif=LIFParams()):
    """AND, count along the mixing axis, threshold from rest (serially over T when T is kept)."""
    g = gate_params(lif)
    T, B, L, D = q.shape
    out = np.zeros_like(v)
    for b in range(B):
        for d in range(D):
            if axis == "temporal":
                for l in range(L):
                    n = sum(q[t, b, l, d] * k[t, b, l, d] for t in range(T))
                    fire = g.v_re + n / g.tau >= g.v_th
                    out[:, b, l, d] = v[:, b, l, d] * fire
            else:
                vm = g.v_re
                for t in range(T):
                    n = sum(q[t, b, l, d] * k[t, b, l, d] for l in range(L))
                    h = vm + (n - (vm - g.v_re)) / g.tau
                    fire = h >= g.v_th
                    vm = g.v_re if fire else h
                    out[t, b, :, d] = v[t, b, :, d] * fire
    return out


def with_output(p: AttentionParams, rng, scale=1.0, drive=0.0):
    """Give a fresh stage a nonzero output projection and, optionally, livelier q/k/v neurons."""
    p.w_out.data = rng.standard_normal(p.w_out.shape) * scale
    for bn in (p.bn_q, p.bn_k, p.bn_v):
        bn.offset.data = bn.offset.data + drive
    return p


class TestGate:
    @pytest.mark.parametrize("axis", ["temporal", "sequential"])
    @pytest.mark.parametrize("n", [1, 2, 3, 5])
    def test_saturated(self, axis, n):
        shape = (n, 2, 3, 4) if axis == "temporal" else (3, 2, n, 4)
        ones = np.ones(shape)
        out = sdsa_gate(Tensor(ones), Tensor(ones), Tensor(ones), axis).data
        np.testing.assert_array_equal(out, ones)

    @pytest.mark.parametrize("axis", ["temporal", "sequential"])
    def test_annihilation(self, axis, rng):
        q, v = binary(rng, (3, 2, 4, 5)), binary(rng, (3, 2, 4, 5))
        out = sdsa_gate(Tensor(q), Tensor(np.zeros_like(q)), Tensor(v), axis).data
        assert not out.any()

    @pytest.mark.parametrize("axis", ["temporal", "sequential"])
    def test_loop_oracle_2x3x1x4(self, axis):
        rng = np.random.default_rng(7)
        for _ in range(20):
            q, k, v = (binary(rng, (2, 3, 1, 4)) for _ in range(3))
            np.testing.assert_array_equal(sdsa_gate(Tensor(q), Tensor(k), Tensor(v), axis).data, loop_gate(q, k, v, axis))

    def test_gate_threshold_counts_coincidences(self):
        lif = LIFParams(tau=2.0, v_th=2.0)
        q = np.zeros((3, 1, 1, 1))
        q[:2] = 1
        out = sdsa_gate(Tensor(q), Tensor(q), Tensor(np.ones_like(q)), "temporal", lif).data
        assert out.all()  # two coincidences meet v_th - v_re = 2
        q[1] = 0
        assert not sdsa_gate(Tensor(q), Tensor(q), Tensor(np.ones_like(q)), "temporal", lif).data.any()

    def test_per_position_in_v(self, rng):
        q, k, v = (binary(rng, (3, 2, 5, 4)) for _ in range(3))
        base = sdsa_gate(Tensor(q), Tensor(k), Tensor(v), "sequential").data
        for l in range(5):
            masked = v.copy()
            masked[:, :, [i for i in range(5) if i != l]] = 0
            out = sdsa_gate(Tensor(q), Tensor(k), Tensor(masked), "sequential").data
            np.testing.assert_array_equal(out[:, :, l], base[:, :, l])
            np.testing.assert_array_equal(out, loop_gate(q, k, masked, "sequential"))

    def test_temporal_single_step_is_and(self, rng):
        q, k, v = (binary(rng, (1, 2, 4, 6)) for _ in range(3))
        out = sdsa_gate(Tensor(q), Tensor(k), Tensor(v), "temporal").data
        np.testing.assert_array_equal(out, q * k * v)

    def test_mask_removes_padded_counts(self):
        ones = np.ones((2, 1, 3, 1))
        mask = RunContext.for_lengths([1], 3).mask
        lif = LIFParams(v_th=2.0)
        out = sdsa_gate(Tensor(ones), Tensor(ones), Tensor(ones), "sequential", lif, mask=mask).data
        assert not out.any()  # one valid coincidence per step, threshold 2
        assert sdsa_gate(Tensor(ones), Tensor(ones), Tensor(ones), "sequential", lif).data.all()

    def test_contracts(self, rng):
        with pytest.raises(IntegrityError):
            sdsa_gate(Tensor(np.full((1, 1, 1, 1), 0.5)), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 1, 1))), "T")
        with pytest.raises(DimensionError):
            sdsa_gate(Tensor(np.ones((1, 1, 2))), Tensor(np.ones((1, 1, 2))), Tensor(np.ones((1, 1, 2))), "T")
        with pytest.raises(ValueError):
            sdsa_gate(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 1, 1))), "diagonal")


class TestStages:
    def test_zero_input_zero_output(self, rng):
        for axis in ("temporal", "sequential"):
            out = attention_stage(Tensor(np.zeros((2, 1, 3, 8))), AttentionParams(8, rng), axis).data
            np.testing.assert_array_equal(out, 0.0)
        p = STSAParams(8, rng)
        np.testing.assert_array_equal(stsa(Tensor(np.zeros((2, 1, 3, 8))), p.temporal, p.sequential).data, 0.0)

    @pytest.mark.parametrize("shape", [(1, 2, 4, 8), (3, 2, 1, 8)])
    def test_degenerate_axes_well_defined(self, shape, rng):
        x = rng.standard_normal(shape) * 2
        for axis in ("temporal", "sequential"):
            out = attention_stage(Tensor(x), with_output(AttentionParams(8, rng), rng), axis, RunContext(training=False)).data
            assert out.shape == shape and np.isfinite(out).all()

    def test_stsa_with_identity_temporal_equals_sequential_only(self, rng, monkeypatch):
        import spikestream.attention as att

        p = STSAParams(8, rng)
        with_output(p.sequential, rng)
        x = Tensor(rng.standard_normal((3, 2, 4, 8)) * 2)
        ctx = RunContext(training=False)
        monkeypatch.setattr(att, "spiking_temporal_attention", lambda x, *a, **k: x)
        np.testing.assert_array_equal(stsa(x, p.temporal, p.sequential, ctx).data, sdsa_only_block(x, p.sequential, ctx).data)

    def test_sequential_only_never_sees_the_future(self, rng):
        p = STSAParams(8, rng, variant="sdsa-only")
        with_output(p.sequential, rng, 2.0, drive=1.5)
        x = rng.standard_normal((4, 2, 3, 8)) * 2
        dep = time_dependency(p, x, RunContext(training=False))
        assert np.triu(dep, 1).max() == 0.0
        assert np.diag(dep).min() > 0

    def test_temporal_mixing_reaches_back_in_time(self, rng):
        p = STSAParams(8, np.random.default_rng(3), variant="temporal-only")
        with_output(p.temporal, rng, 2.0, drive=1.5)
        x = rng.standard_normal((4, 4, 5, 8)) * 3 + 1
        dep = time_dependency(p, x, RunContext(training=False))
        assert dep[0, -1] > 0

    def test_probe_needs_eval_mode(self, rng):
        with pytest.raises(ValueError):
            time_dependency(STSAParams(8, rng), np.zeros((2, 1, 1, 8)), RunContext(training=True))

    def test_stage_batch_invariance(self, rng):
        p = with_output(AttentionParams(8, rng), rng)
        x = rng.standard_normal((2, 3, 4, 8)) * 2
        ctx = RunContext(training=False)
        full = spiking_sequential_attention(Tensor(x), p, ctx).data
        one = spiking_sequential_attention(Tensor(x[:, 1:2]), p, ctx).data
        np.testing.assert_array_equal(full[:, 1:2], one)


class TestOpCounts:
    def test_core_ops_equal_and_count(self, rng):
        q, k, v = (binary(rng, (2, 2, 6, 4)) for _ in range(3))
        with instrument.Session() as sess:
            sdsa_gate(Tensor(q), Tensor(k), Tensor(v), "sequential", name="g")
        assert sess.layers["g.core"].ac_ops == int((q * k).sum())

    def test_block_names_every_site(self, rng):
        p = STSAParams(8, rng)
        with instrument.Session(capture=True) as sess:
            attention_block(Tensor(rng.standard_normal((2, 1, 3, 8))), p, RunContext(training=False), name="blk")
        for stage in ("temporal", "sequential"):
            for site in ("input", "q", "k", "v", "linear"):
                assert f"blk.{stage}.{site}" in sess.sites
            assert {f"blk.{stage}.qkv", f"blk.{stage}.core", f"blk.{stage}.linear"} <= set(sess.layers)
