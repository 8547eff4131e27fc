import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from discovqa import tensor as T
from discovqa.tct import (TsfSelection, channel_reduce, decoder_forward, encoder_forward, encoder_phi,
                          init_linear, init_tct, segment_bounds, self_attention, tct_forward, tct_on_selection,
                          tsf_sample)
from discovqa.tensor import Tensor, grad_check


def rng_(seed):
    return np.random.default_rng(seed)


def small_params(seed, c_in=6, c=8, hidden=5):
    return init_tct(rng_(seed), c_in, c=c, hidden=hidden)


def softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def loop_attention(t, wq, wk, wv, wo, heads):
    """Eqs. of scaled dot-product attention written out element by element."""
    k, c = t.shape
    dh = c // heads
    proj = lambda w: [[sum(t[i, a] * w[a, b] for a in range(c)) for b in range(c)] for i in range(k)]
    Q, K, V = proj(wq), proj(wk), proj(wv)
    maps, joined = [], [[0.0] * c for _ in range(k)]
    for h in range(heads):
        cols = range(h * dh, (h + 1) * dh)
        m = []
        for i in range(k):
            logits = [sum(Q[i][a] * K[j][a] for a in cols) / math.sqrt(dh) for j in range(k)]
            m.append(softmax(logits))
        maps.append(np.array(m))
        for i in range(k):
            for b in cols:
                joined[i][b] = sum(m[i][j] * V[j][b] for j in range(k))
    out = [[sum(joined[i][a] * wo[a, b] for a in range(c)) for b in range(c)] for i in range(k)]
    return maps, np.array(out)


class TestTsf:
    def test_unit_segments(self):
        assert tsf_sample(6, 6, rng_(0)).indices == tuple(range(6))

    def test_segment_bounds(self):
        for seed in range(50):
            idx = tsf_sample(8, 4, rng_(seed)).indices
            assert idx[0] in (0, 1) and idx[1] in (2, 3) and idx[2] in (4, 5) and idx[3] in (6, 7)

    def test_clamp(self):
        sel = tsf_sample(5, 32, rng_(0))
        assert sel.s0_effective == 5 and sel.indices == (0, 1, 2, 3, 4)

    def test_seed_determinism(self):
        assert tsf_sample(64, 16, rng_(3)) == tsf_sample(64, 16, rng_(3))
        assert tsf_sample(64, 16, rng_(3)) != tsf_sample(64, 16, rng_(4))

    def test_every_offset_reachable(self):
        seen = {tsf_sample(12, 3, rng_(s)).indices[1] for s in range(200)}
        assert seen == {4, 5, 6, 7}

    @settings(max_examples=300, deadline=None)
    @given(n=st.integers(1, 500), s0=st.integers(1, 64), seed=st.integers(0, 2**32 - 1))
    def test_indices_in_segments(self, n, s0, seed):
        sel = tsf_sample(n, s0, rng_(seed))
        bounds = segment_bounds(n, s0)
        assert sel.s0_effective == min(n, s0) == len(sel.indices)
        assert all(lo <= i < hi for i, (lo, hi) in zip(sel.indices, bounds))
        assert all(a < b for a, b in zip(sel.indices, sel.indices[1:]))


class TestChannelReduce:
    def test_identity(self):
        p = init_linear(rng_(0), 4, 4)
        p.weight.data = np.eye(4)
        x = rng_(1).standard_normal((3, 4))
        np.testing.assert_array_equal(channel_reduce(Tensor(x), p).data, x)

    def test_zero_weight_broadcasts_bias(self):
        p = init_linear(rng_(0), 4, 3)
        p.weight.data[:] = 0
        p.bias.data = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(channel_reduce(Tensor(np.ones((2, 4))), p).data, [[1, 2, 3], [1, 2, 3]])

    def test_against_re_evaluation(self):
        p = init_linear(rng_(0), 4, 3)
        p.bias.data = rng_(2).standard_normal(3)
        x = rng_(1).standard_normal((2, 4))
        expected = [[sum(x[i, a] * p.weight.data[a, b] for a in range(4)) + p.bias.data[b] for b in range(3)]
                    for i in range(2)]
        np.testing.assert_allclose(channel_reduce(Tensor(x), p).data, expected, atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            channel_reduce(Tensor(np.ones((2, 5))), init_linear(rng_(0), 4, 3))


class TestSelfAttention:
    def test_single_token(self):
        p = small_params(0).encoder[0]
        maps, _ = self_attention(Tensor(rng_(1).standard_normal((1, 8))), p, heads=2)
        for m in maps:
            assert m.data.tolist() == [[1.0]]

    def test_zero_query_is_uniform(self):
        p = small_params(0).encoder[0]
        p.wq.data[:] = 0
        maps, _ = self_attention(Tensor(rng_(1).standard_normal((5, 8))), p, heads=2)
        for m in maps:
            np.testing.assert_allclose(m.data, 0.2, atol=1e-15)

    @pytest.mark.parametrize("heads", [1, 2, 4])
    def test_against_loop_oracle(self, heads):
        p = small_params(3).encoder[1]
        t = rng_(4).standard_normal((4, 8))
        maps, out = self_attention(Tensor(t), p, heads)
        exp_maps, exp_out = loop_attention(t, p.wq.data, p.wk.data, p.wv.data, p.wo.data, heads)
        for m, e in zip(maps, exp_maps):
            np.testing.assert_allclose(m.data, e, atol=1e-10)
        np.testing.assert_allclose(out.data, exp_out, atol=1e-10)

    def test_indivisible_width(self):
        with pytest.raises(ValueError):
            self_attention(Tensor(np.ones((2, 8))), small_params(0).encoder[0], heads=3)


class TestEncoder:
    def test_long_residual(self):
        p = small_params(1)
        x = Tensor(rng_(2).standard_normal((5, 8)))
        phi, _ = encoder_phi(x, p.encoder, 2)
        out = encoder_forward(x, p.encoder, 2)
        np.testing.assert_array_equal(out.data, phi.data + x.data)
        np.testing.assert_allclose(out.data - phi.data, x.data, rtol=0, atol=1e-14)

    def test_permutation_equivariance(self):
        p = small_params(1)
        x = rng_(2).standard_normal((6, 8))
        perm = rng_(3).permutation(6)
        a = encoder_forward(Tensor(x), p.encoder, 2).data
        b = encoder_forward(Tensor(x[perm]), p.encoder, 2).data
        np.testing.assert_array_equal(b, a[perm])

    def test_single_token(self):
        out = encoder_forward(Tensor(rng_(2).standard_normal((1, 8))), small_params(1).encoder, 2)
        assert out.shape == (1, 8) and np.all(np.isfinite(out.data))

    def test_depth_is_four(self):
        assert len(small_params(0).encoder) == 4
        with pytest.raises(ValueError):
            encoder_forward(Tensor(np.ones((2, 8))), small_params(0).encoder[:3], 2)

    def test_attention_rows_sum_to_one(self):
        x = Tensor(rng_(5).standard_normal((7, 8)) * 3)
        _, maps = encoder_phi(x, small_params(5).encoder, 4)
        for layer in maps:
            for m in layer:
                np.testing.assert_allclose(m.data.sum(axis=1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("seed", range(3))
    def test_grad_check(self, seed):
        p = small_params(seed, c=8)
        x = Tensor(rng_(seed + 10).standard_normal((4, 8)))
        weights = Tensor(rng_(seed + 20).standard_normal((4, 8)))
        layer = p.encoder[0]
        inputs = [x, layer.wq, layer.wk, layer.ff1_w, layer.ln1_g, p.encoder[3].ln2_b]
        assert grad_check(lambda *a: T.sum_(T.mul(encoder_forward(x, p.encoder, 2), weights)), inputs) < 1e-4


def loop_decoder(t_en, t_pe, p):
    """Eqs. for the average-token decoder and weight head, evaluated with plain numpy."""
    def ln(x, g, b):
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    def gelu(x):
        return x * 0.5 * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))

    c = t_en.shape[1]
    d = p.decoder
    query = t_pe.mean(axis=0, keepdims=True)
    logits = (query @ d.wq.data) @ (t_en @ d.wk.data).T / math.sqrt(c)
    m1 = np.array([softmax(logits[0])])
    query = ln(query + m1 @ (t_en @ d.wv.data) @ d.wo.data, d.ln1_g.data, d.ln1_b.data)
    ff = gelu(query @ d.ff1_w.data + d.ff1_b.data) @ d.ff2_w.data + d.ff2_b.data
    query = ln(query + ff, d.ln2_g.data, d.ln2_b.data)
    last = p.decoder_out
    logits = (query @ last.wq.data) @ (t_en @ last.wk.data).T / math.sqrt(c)
    m_qk = np.array([softmax(logits[0])])
    t_out = t_en + m_qk @ (t_en @ last.wv.data)
    w = gelu(t_out @ p.l3.weight.data + p.l3.bias.data) @ p.l4.weight.data + p.l4.bias.data
    return w, m_qk


class TestDecoder:
    def test_single_token(self):
        p = small_params(0)
        x = Tensor(rng_(1).standard_normal((1, 8)))
        res = decoder_forward(x, x, p)
        assert res.m_qk.data.tolist() == [[1.0]]
        assert res.weights.shape == (1, 1)

    def test_zero_projections_uniform(self):
        p = small_params(0)
        for w in (p.decoder.wq, p.decoder.wk, p.decoder_out.wq, p.decoder_out.wk):
            w.data[:] = 0
        x = Tensor(rng_(1).standard_normal((4, 8)))
        np.testing.assert_allclose(decoder_forward(x, x, p).m_qk.data, 0.25, atol=1e-15)

    @pytest.mark.parametrize("seed", range(3))
    def test_against_straight_line_oracle(self, seed):
        p = small_params(seed)
        for lin in (p.l3, p.l4):
            lin.bias.data = rng_(seed + 7).standard_normal(lin.bias.shape)
        t_pe = rng_(seed + 1).standard_normal((5, 8))
        t_en = rng_(seed + 2).standard_normal((5, 8))
        res = decoder_forward(Tensor(t_en), Tensor(t_pe), p)
        w, m_qk = loop_decoder(t_en, t_pe, p)
        np.testing.assert_allclose(res.weights.data, w, atol=1e-10)
        np.testing.assert_allclose(res.m_qk.data, m_qk, atol=1e-10)

    def test_zero_token_target_changes_output(self):
        p = small_params(4)
        t_pe = Tensor(rng_(5).standard_normal((5, 8)) + 1.0)
        t_en = Tensor(rng_(6).standard_normal((5, 8)))
        a = decoder_forward(t_en, t_pe, p).weights.data
        b = decoder_forward(t_en, t_pe, p, zero_token_target=True).weights.data
        assert not np.allclose(a, b)


class TestTctForward:
    def test_deterministic_without_sampling(self):
        p = small_params(0)
        x = Tensor(rng_(1).standard_normal((6, 6)))
        a = tct_forward(x, p, 6, rng_(2), heads=2)
        b = tct_forward(x, p, 6, rng_(99), heads=2)
        assert a.selection.indices == tuple(range(6))
        np.testing.assert_array_equal(a.weights.data, b.weights.data)

    def test_seeds_change_selection(self):
        p = small_params(0)
        x = Tensor(rng_(1).standard_normal((40, 6)))
        sels = {tct_forward(x, p, 8, rng_(s), heads=2).selection.indices for s in range(5)}
        assert len(sels) > 1

    def test_m_qk_rows(self):
        out = tct_forward(Tensor(rng_(1).standard_normal((30, 6))), small_params(0), 8, rng_(3), heads=2)
        assert out.m_qk.shape == (1, 8)
        assert abs(out.m_qk.data.sum() - 1) < 1e-9 and np.all(out.m_qk.data > 0)

    def test_variants(self):
        p = small_params(2)
        x = Tensor(rng_(1).standard_normal((10, 6)))
        sel = TsfSelection(5, (0, 2, 4, 6, 8))
        full = tct_on_selection(x, p, sel, 2)
        pure = tct_on_selection(x, p, sel, 2, pure_encoder=True)
        assert pure.m_qk is None
        assert not np.allclose(full.weights.data, pure.weights.data)

    @pytest.mark.parametrize("seed", range(2))
    def test_grad_check_full_composition(self, seed):
        p = small_params(seed, c_in=6, c=8, hidden=4)
        stde = Tensor(rng_(seed + 1).standard_normal((9, 6)))
        sel = TsfSelection(3, (1, 4, 7))
        coef = Tensor(rng_(seed + 2).standard_normal((3, 1)))
        inputs = [stde, p.reduce.weight, p.encoder[2].wv, p.decoder.wq, p.decoder.ff2_w,
                  p.decoder_out.wk, p.l3.weight, p.l4.bias]

        def f(*_):
            return T.sum_(T.mul(tct_on_selection(stde, p, sel, 2).weights, coef))

        assert grad_check(f, inputs) < 1e-4
