import math

import numpy as np
import pytest

from spikestream import instrument
from spikestream.attention import RunContext
from spikestream.model import (
    EmptyOutputError,
    EncoderLayer,
    FeedForward,
    ModelConfig,
    ModelOutput,
    PhonemeBatch,
    PostNet,
    Predictor,
    SpikingTTS,
    VarianceAdaptor,
    VocabularyError,
    decoder_stack_and_postnet,
    durations_from_log,
    embed,
    encoder_layer,
    length_regulator,
    loss,
    predictor,
    spiking_feedforward,
    variance_adaptor,
)
from spikestream.neurons import LIFParams, sn_forward
from spikestream.tensor import ConfigurationError, ContractError, Tensor, layer_norm, sinusoid_table
from spikestream.tensor.nn import ConfigurationError as NNConfigurationError

LIF = LIFParams()


def zero_out(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


def batch_of(tokens, durations=None, n_mel=4, rng=None):
    tokens = np.atleast_2d(tokens)
    b = PhonemeBatch.from_tokens(tokens)
    if durations is not None:
        b.durations = np.atleast_2d(durations)
        b.mel_lengths = b.durations.sum(axis=1)
        frames = int(b.mel_lengths.max())
        rng = rng or np.random.default_rng(0)
        b.mel = rng.random((tokens.shape[0], frames, n_mel))
        b.pitch = rng.uniform(-1, 1, tokens.shape)
        b.energy = rng.uniform(-1, 1, tokens.shape)
    return b


class TestEmbed:
    def test_single_time_step(self, rng):
        table = Tensor(rng.standard_normal((5, 6)))
        tokens = np.array([[1, 3, 2]])
        x = embed(tokens, table, 1).data
        want = table.data[tokens] + sinusoid_table(1, 6)[0] + sinusoid_table(3, 6)
        np.testing.assert_allclose(x[0], want)

    def test_repeated_token_differs_by_position(self, rng):
        table = Tensor(rng.standard_normal((5, 6)))
        x = embed(np.array([[4, 4]]), table, 3).data
        seq = sinusoid_table(2, 6)
        np.testing.assert_allclose(x[:, 0, 0] - x[:, 0, 1], np.broadcast_to(seq[0] - seq[1], (3, 6)), atol=1e-12)

    def test_time_offsets_constant(self, rng):
        table = Tensor(rng.standard_normal((7, 4)))
        x = embed(rng.integers(0, 7, (2, 5)), table, 4).data
        tem = sinusoid_table(4, 4)
        diff = x[3] - x[1]
        np.testing.assert_allclose(diff, np.broadcast_to(tem[3] - tem[1], diff.shape), atol=1e-12)

    def test_out_of_vocabulary(self, rng):
        with pytest.raises(VocabularyError):
            embed(np.array([[0, 9]]), Tensor(np.zeros((5, 4))), 2)


class TestFeedForward:
    def test_zero_in_zero_out(self, rng):
        out = spiking_feedforward(Tensor(np.zeros((2, 1, 4, 6))), FeedForward(6, 3, rng), LIF).data
        assert not out.any()

    def test_kernel_one_is_positionwise_linear(self, rng):
        p = FeedForward(6, 1, rng)
        p.b1.data = rng.standard_normal(6)
        u = rng.standard_normal((3, 2, 5, 6)) * 3
        got = spiking_feedforward(Tensor(u), p, LIF).data
        s1 = sn_forward(Tensor(u), LIF).data
        y1 = s1 @ p.w1.data[:, :, 0].T + p.b1.data
        s2 = sn_forward(Tensor(y1), LIF).data
        np.testing.assert_allclose(got, s2 @ p.w2.data[:, :, 0].T + p.b2.data, atol=1e-12)

    def test_conv_inputs_binary(self, rng):
        with instrument.Session(capture=True) as sess:
            spiking_feedforward(Tensor(rng.standard_normal((2, 1, 4, 6)) * 3), FeedForward(6, 3, rng), LIF, name="ff")
        for site in ("ff.conv1", "ff.conv2"):
            assert set(np.unique(sess.spikes[site])) <= {0.0, 1.0}


class TestEncoder:
    def test_zero_branches_zero_output(self, rng):
        cfg = ModelConfig.tiny()
        layer = EncoderLayer(cfg, rng)
        layer.ff.w2.data[:] = 0
        out = encoder_layer(Tensor(np.zeros((2, 1, 3, 8))), layer, LIF).data
        assert not out.any()

    def test_shape_preserved(self, rng):
        layer = EncoderLayer(ModelConfig.tiny(D=12), rng)
        x = rng.standard_normal((3, 2, 5, 12))
        assert encoder_layer(Tensor(x), layer, LIF, RunContext(training=False)).shape == x.shape

    def test_stack_equals_layer_by_layer(self):
        cfg = ModelConfig.tiny(N=3)
        m = SpikingTTS(cfg, seed=4)
        b = batch_of([[1, 2, 3, 4]])
        ctx = RunContext.for_lengths(b.lengths, 4, training=False)
        whole = m.encode(b, ctx).data
        x = embed(b.tokens, m.embedding.table, cfg.T)
        for layer in m.encoder:
            x = encoder_layer(x, layer, cfg.lif, ctx)
        np.testing.assert_array_equal(whole, x.data)


class TestPredictor:
    def test_zero_head(self, rng):
        p = Predictor(6, 2, 3, rng)
        _, scalar = predictor(Tensor(rng.standard_normal((2, 3, 4, 6))), p, LIF)
        assert scalar.shape == (3, 4) and not scalar.data.any()

    @pytest.mark.parametrize("T", [1, 2, 5])
    def test_head_shape(self, T, rng):
        p = Predictor(6, 3, 3, rng)
        p.w_head.data = rng.standard_normal((6, 1))
        _, scalar = predictor(Tensor(rng.standard_normal((T, 2, 7, 6))), p, LIF)
        assert scalar.shape == (2, 7)

    def test_saturated_neurons_match_dense_stack(self, rng):
        # a large layer-norm offset keeps every membrane above threshold, so
        # each SN passes all ones and the stack reduces to plain convolutions
        p = Predictor(4, 2, 3, rng)
        for c in p.convs:
            c.b.data = rng.standard_normal(4)
            c.ln_offset.data[:] = 100.0
        p.w_head.data = rng.standard_normal((4, 1))
        x = np.full((1, 1, 5, 4), 5.0)
        feat, scalar = predictor(Tensor(x), p, LIF)
        spikes = np.ones((1, 5, 4))
        for c in p.convs:
            pad = np.pad(spikes, ((0, 0), (1, 1), (0, 0)))
            conv = np.stack([sum(pad[:, l + j] @ c.w.data[:, :, j].T for j in range(3)) for l in range(5)], axis=1) + c.b.data
            pre = layer_norm(Tensor(conv), c.ln_gain, c.ln_offset).data
            assert (pre >= 2).all()  # the next neuron fires on its first step
            spikes = np.ones_like(pre)
        np.testing.assert_allclose(feat.data[0], pre, atol=1e-10)
        np.testing.assert_allclose(scalar.data, (np.ones((1, 5, 4)) @ p.w_head.data)[..., 0] + p.b_head.data, atol=1e-12)


class TestVarianceAdaptor:
    def setup_method(self):
        self.cfg = ModelConfig.tiny(D=6)
        self.va = VarianceAdaptor(self.cfg, np.random.default_rng(0))

    def test_teacher_forced_length(self, rng):
        x = Tensor(rng.standard_normal((2, 1, 3, 6)))
        ctx = RunContext.for_lengths([3], 3)
        y0, *_, used, lengths = variance_adaptor(x, self.va, LIF, ctx, np.array([[2, 1, 3]]))
        assert y0.shape == (2, 1, 6, 6) and lengths.tolist() == [6]

    def test_zero_predictors(self, rng):
        for pred in (self.va.duration, self.va.pitch, self.va.energy):
            zero_out(pred)
        x = Tensor(rng.standard_normal((2, 1, 3, 6)))
        ctx = RunContext.for_lengths([3], 3)
        y0, d_hat, *_ = variance_adaptor(x, self.va, LIF, ctx, np.array([[1, 1, 1]]))
        assert not d_hat.data.any()
        np.testing.assert_allclose(y0.data, layer_norm(layer_norm(x)).data, atol=1e-12)

    def test_inference_rounding(self, rng):
        zero_out(self.va.duration)
        self.va.duration.b_head.data[:] = math.log(3 + 1)
        ctx = RunContext.for_lengths([2], 2, training=False)
        y0, d_hat, _, _, used, lengths = variance_adaptor(Tensor(rng.standard_normal((2, 1, 2, 6))), self.va, LIF, ctx)
        assert used.tolist() == [[3, 3]] and lengths.tolist() == [6]

    def test_zero_predicted_duration_is_explicit(self, rng):
        zero_out(self.va.duration)
        ctx = RunContext.for_lengths([2], 2, training=False)
        with pytest.raises(EmptyOutputError):
            variance_adaptor(Tensor(rng.standard_normal((2, 1, 2, 6))), self.va, LIF, ctx)

    def test_rounding_rule(self):
        assert durations_from_log(np.log(np.array([1.0, 2.4, 2.6, 0.2]))).tolist() == [0, 1, 2, 0]


class TestLengthRegulator:
    def u(self):
        return Tensor(np.arange(3.0).reshape(1, 1, 3, 1) + 1)  # positions a=1, b=2, c=3

    def test_identity(self):
        y, n = length_regulator(self.u(), [[1, 1, 1]])
        np.testing.assert_array_equal(y.data, self.u().data)
        assert n.tolist() == [3]

    def test_skip_and_repeat(self):
        y, n = length_regulator(self.u(), [[2, 0, 1]])
        assert y.data[0, 0, :, 0].tolist() == [1, 1, 3]

    def test_copy_oracle_batched(self, rng):
        u = rng.standard_normal((2, 3, 4, 5))
        d = rng.integers(0, 4, (3, 4))
        y, n = length_regulator(Tensor(u), d)
        for b in range(3):
            rows = [u[:, b, l] for l in range(4) for _ in range(d[b, l])]
            assert n[b] == len(rows)
            for j, r in enumerate(rows):
                np.testing.assert_array_equal(y.data[:, b, j], r)
            assert not y.data[:, b, len(rows) :].any()

    def test_gradient_sums_copies(self):
        u = Tensor(np.ones((1, 1, 3, 2)), requires_grad=True)
        y, _ = length_regulator(u, [[2, 0, 3]])
        y.sum().backward()
        np.testing.assert_array_equal(u.grad[0, 0, :, 0], [2, 0, 3])

    def test_bad_durations(self):
        with pytest.raises(ContractError):
            length_regulator(self.u(), [[1, -1, 1]])
        with pytest.raises(ContractError):
            length_regulator(self.u(), [[1, 1]])


class TestDecoder:
    def test_zero_heads(self, rng):
        cfg = ModelConfig.tiny()
        post = PostNet(cfg, rng)
        post.w_mel.data[:] = 0
        layers = [EncoderLayer(cfg, rng)]
        ctx = RunContext.for_lengths([5, 3], 5)
        coarse, fine = decoder_stack_and_postnet(Tensor(rng.standard_normal((2, 2, 5, 8))), layers, post, LIF, ctx)
        assert coarse.shape == fine.shape == (2, 5, cfg.n_mel)
        assert not coarse.data.any() and not fine.data.any()

    def test_time_average_invariant_to_duplication(self, rng):
        post = PostNet(ModelConfig.tiny(), rng)
        s = (rng.random((2, 1, 4, 8)) < 0.4).astype(float)
        once = (s @ post.w_mel.data + post.b_mel.data).mean(axis=0)
        twice = (np.concatenate([s, s]) @ post.w_mel.data + post.b_mel.data).mean(axis=0)
        np.testing.assert_allclose(once, twice, atol=1e-12)

    def test_padding_frames_are_zero(self):
        cfg = ModelConfig.tiny()
        m = SpikingTTS(cfg, seed=1)
        b = batch_of([[1, 2, 0], [3, 4, 5]], [[2, 1, 0], [1, 2, 3]], cfg.n_mel)
        b.lengths = np.array([2, 3])
        out = m.forward(b, training=False)
        assert out.o_coarse.shape == (2, 6, cfg.n_mel)
        assert not out.o_fine.data[0, 3:].any()


class TestLoss:
    def output(self, b, coarse, fine):
        d_hat = np.log(b.durations + 1.0)
        mask = (np.arange(b.mel.shape[1])[None] < b.mel_lengths[:, None]).astype(float)
        return ModelOutput(Tensor(coarse), Tensor(fine), Tensor(d_hat), Tensor(b.pitch), Tensor(b.energy), b.durations, b.mel_lengths, mask)

    def test_perfect_prediction(self):
        b = batch_of([[1, 2]], [[2, 3]])
        assert loss(self.output(b, b.mel, b.mel), b).total.item() == 0.0

    def test_constant_offset_on_valid_frames(self):
        b = batch_of([[1, 2], [3, 0]], [[2, 3], [2, 0]])
        b.lengths = np.array([2, 1])
        b.mel[1, 2:] = 0
        fine = b.mel.copy()
        fine[0, :5] += 1
        fine[1, :2] += 1
        fine[1, 2:] += 50  # padding, ignored
        lb = loss(self.output(b, b.mel, fine), b)
        assert lb.total.item() == pytest.approx(1.0, abs=1e-12)
        assert lb.components["mel_fine"] == pytest.approx(1.0, abs=1e-12)

    def test_masked_mean_oracle(self, rng):
        b = batch_of([[1, 2, 3], [4, 5, 0]], [[1, 2, 1], [3, 1, 0]], rng=rng)
        b.lengths = np.array([3, 2])
        coarse, fine = rng.random(b.mel.shape), rng.random(b.mel.shape)
        out = self.output(b, coarse, fine)
        out.d_hat = Tensor(rng.standard_normal((2, 3)))
        lb = loss(out, b)
        frames = [(i, f) for i in range(2) for f in range(b.mel_lengths[i])]
        mae = lambda o: sum(abs(o[i, f, c] - b.mel[i, f, c]) for i, f in frames for c in range(4)) / (len(frames) * 4)
        phon = [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1)]
        dur = sum((out.d_hat.data[i, l] - math.log(b.durations[i, l] + 1)) ** 2 for i, l in phon) / 5
        assert lb.components["mel_coarse"] == pytest.approx(mae(coarse), abs=1e-12)
        assert lb.components["mel_fine"] == pytest.approx(mae(fine), abs=1e-12)
        assert lb.components["duration"] == pytest.approx(dur, abs=1e-12)
        assert lb.components["pitch"] == 0.0


class TestModel:
    def test_forward_deterministic(self):
        cfg = ModelConfig.tiny()
        b = batch_of([[1, 2, 3]], [[1, 2, 2]], cfg.n_mel)
        a = SpikingTTS(cfg, seed=3).forward(b, training=False).o_fine.data
        c = SpikingTTS(cfg, seed=3).forward(b, training=False).o_fine.data
        np.testing.assert_array_equal(a, c)

    def test_teacher_forced_lengths(self):
        cfg = ModelConfig.tiny()
        b = batch_of([[1, 2, 3]], [[1, 2, 2]], cfg.n_mel)
        out = SpikingTTS(cfg).forward(b)
        assert out.mel_lengths.tolist() == [5] and out.o_coarse.shape == (1, 5, cfg.n_mel)

    def test_every_parameter_gets_a_gradient(self):
        cfg = ModelConfig.tiny()
        m = SpikingTTS(cfg, seed=0)
        for p in m.parameters():
            if not p.data.any():
                p.data = np.full(p.shape, 0.1)
        b = batch_of([[1, 2, 3]], [[1, 2, 2]], cfg.n_mel)
        loss(m.forward(b), b, cfg).total.backward()
        assert all(p.grad is not None for p in m.parameters())

    def test_state_dict_roundtrip(self):
        m = SpikingTTS(ModelConfig.tiny(), seed=1)
        n = SpikingTTS(ModelConfig.tiny(), seed=2)
        n.load_state_dict(m.state_dict())
        for k, v in m.state_dict().items():
            np.testing.assert_array_equal(v, n.state_dict()[k])

    def test_too_long_rejected(self):
        cfg = ModelConfig.tiny(L_max=2)
        with pytest.raises(ContractError):
            SpikingTTS(cfg).forward(batch_of([[1, 2, 3]], [[1, 1, 1]], cfg.n_mel))

    @pytest.mark.parametrize(
        "kw",
        [{"T": 0}, {"N": 0}, {"D": 7}, {"ff_kernel": 4}, {"attention": "full"}, {"pred_convs": 0}],
    )
    def test_config_validation(self, kw):
        with pytest.raises(ConfigurationError):
            ModelConfig.tiny(**kw)

    def test_config_dict_roundtrip(self):
        cfg = ModelConfig.reference()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(NNConfigurationError):
            ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})
