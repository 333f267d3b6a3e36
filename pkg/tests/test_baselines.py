import math

import numpy as np
import pytest

from surginstruct import autodiff as ad
from surginstruct.autodiff import Tensor, gradcheck
from surginstruct.baselines import LstmConfig, baseline_forward, lstm_cell, pooled_feature, soft_attention

from helpers import model_gradcheck, tiny_lstm, toy_batch


@pytest.fixture
def rng():
    return np.random.default_rng(5)


class TestLstmCell:
    def test_zero_weights(self, rng):
        x, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
        h2, c2 = lstm_cell(Tensor(x), Tensor(np.zeros((2, 4))), Tensor(c),
                           Tensor(np.zeros((7, 16))), Tensor(np.zeros(16)))
        np.testing.assert_allclose(c2.data, 0.5 * c, rtol=1e-15)
        np.testing.assert_allclose(h2.data, 0.5 * np.tanh(0.5 * c), rtol=1e-15)

    def test_zero_state_zero_input(self, rng):
        h2, _ = lstm_cell(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))),
                          Tensor(rng.normal(size=(7, 16))), Tensor(np.zeros(16)))
        np.testing.assert_array_equal(h2.data, 0.0)

    def test_gate_order(self):
        # only the candidate block gets a bias; input gate sigma(0) = 0.5
        b = np.zeros(4)
        b[3] = 100.0
        h2, c2 = lstm_cell(Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1))),
                           Tensor(np.zeros((2, 4))), Tensor(b))
        assert c2.item() == pytest.approx(0.5, abs=1e-12)
        assert h2.item() == pytest.approx(0.5 * math.tanh(0.5), abs=1e-12)

    def test_gradient(self, rng):
        c0 = rng.normal(size=(2, 4))
        w = rng.normal(size=(2, 4))

        def f(x, h, c, W, b):
            h2, c2 = lstm_cell(x, h, c, W, b)
            return ad.tsum(h2 * w) + ad.tsum(c2 * c0)

        assert gradcheck(f, [rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), c0,
                             rng.normal(size=(7, 16)) * 0.5, rng.normal(size=16)]) <= 1e-4


class TestPooling:
    def test_constant_grid(self):
        np.testing.assert_array_equal(pooled_feature(np.full((5, 3), 2.5)), [2.5] * 3)

    def test_two_rows(self):
        np.testing.assert_array_equal(pooled_feature([[1.0, 3.0], [3.0, 5.0]]), [2.0, 4.0])

    def test_full_scale(self, rng):
        assert pooled_feature(rng.normal(size=(196, 2048))).shape == (2048,)

    def test_empty(self):
        with pytest.raises(ValueError):
            pooled_feature(np.zeros((0, 3)))


class TestSoftAttention:
    def test_identical_rows_uniform(self, rng):
        v = np.tile(rng.normal(size=4), (1, 5, 1))
        ctx, w = soft_attention(Tensor(rng.normal(size=(1, 4))), Tensor(v), Tensor(v @ rng.normal(size=(4, 4))),
                                Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=4)))
        np.testing.assert_allclose(w.data, 0.2, atol=1e-15)
        np.testing.assert_allclose(ctx.data[0], v[0, 0], rtol=1e-14)

    def test_row_stochastic(self, rng):
        v = rng.normal(size=(3, 6, 4))
        _, w = soft_attention(Tensor(rng.normal(size=(3, 4))), Tensor(v), Tensor(rng.normal(size=(3, 6, 4))),
                              Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=4)))
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)

    def test_gradient(self, rng):
        c = rng.normal(size=(2, 4))

        def f(h, v, vp, Wh, w):
            return ad.tsum(soft_attention(h, v, vp, Wh, w)[0] * c)

        assert gradcheck(f, [rng.normal(size=(2, 4)), rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4)),
                             rng.normal(size=(4, 4)), rng.normal(size=4)]) <= 1e-4


class TestBaselineForward:
    @pytest.mark.parametrize("mode", ["plain", "soft_attn"])
    def test_shape(self, mode, rng):
        feats, toks = toy_batch(rng)
        assert baseline_forward(tiny_lstm(mode), feats, toks, mode).shape == (3, 5, 11)

    def test_unknown_mode(self, rng):
        feats, toks = toy_batch(rng)
        with pytest.raises(ValueError, match="unknown"):
            baseline_forward(tiny_lstm("plain"), feats, toks, "bilstm")
        with pytest.raises(ValueError):
            LstmConfig(mode="bilstm")
        with pytest.raises(ValueError, match="built for"):
            baseline_forward(tiny_lstm("plain"), feats, toks, "soft_attn")

    def _equal_mean_grids(self, rng):
        a = rng.normal(size=(4, 6))
        b = a[[1, 0, 3, 2]] + 0.0
        b[0] += 1.0
        b[1] -= 1.0
        return a, b

    def test_plain_ignores_region_variation(self, rng):
        a, b = self._equal_mean_grids(rng)
        m = tiny_lstm("plain")
        toks = [[1, 5, 6, 7]]
        np.testing.assert_allclose(m.forward(a, toks).data, m.forward(b, toks).data, rtol=1e-12, atol=1e-14)

    def test_soft_attention_distinguishes(self, rng):
        m = tiny_lstm("soft_attn")
        toks = [[1, 5, 6, 7]]
        for _ in range(5):
            a, b = self._equal_mean_grids(rng)
            assert not np.allclose(m.forward(a, toks).data, m.forward(b, toks).data)

    def test_attention_weights_row_stochastic_every_step(self, rng):
        m = tiny_lstm("soft_attn")
        trace = []
        feats, toks = toy_batch(rng)
        m.logits(m.prepare(feats), toks, trace=trace)
        assert len(trace) == 5
        for w in trace:
            np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("mode", ["plain", "soft_attn"])
    def test_end_to_end_gradcheck(self, mode, rng):
        m = tiny_lstm(mode)
        feats, toks = toy_batch(rng, B=2, T=5)
        tgt = rng.integers(2, 11, size=(2, 4))
        assert model_gradcheck(m, lambda mm: ad.cross_entropy(mm.forward(feats, toks[:, :-1]), tgt)) <= 1e-3

    def test_initial_loss_near_log_vocab(self, rng):
        V = 300
        m = tiny_lstm("soft_attn", vocab_size=V, hidden=32)
        feats = rng.normal(size=(4, 4, 6))
        toks = rng.integers(4, V, size=(4, 6))
        loss = ad.cross_entropy(m.forward(feats, toks[:, :-1]), toks[:, 1:]).item()
        assert abs(loss - math.log(V)) <= 0.05 * math.log(V)
