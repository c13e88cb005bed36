"""Neural block tests: hand cases, oracles, and structural invariants."""

import math

import numpy as np
import pytest

from vltseg.nn import (
    GruParams,
    LinearParams,
    decoder_layer,
    encoder_layer,
    gru,
    init_decoder_layer,
    init_encoder_layer,
    init_gru,
    init_linear,
    init_mha,
    linear,
    map_tensors,
    mha,
    named_tensors,
    parameter_count,
    scaled_dot_attention,
    sine_pos_embed_2d,
)
from vltseg.prng import Prng
from vltseg.tensor import ShapeError, Tensor, backward, mul, tensor_sum


def _identity_linear(n: int) -> LinearParams:
    return LinearParams(weight=Tensor(np.eye(n)), bias=Tensor(np.zeros(n)))


def _sq_loss(t: Tensor) -> Tensor:
    return tensor_sum(mul(t, t))


class TestLinear:
    def test_identity(self):
        x = Prng(0).uniform(-1, 1, (3, 4))
        out = linear(_identity_linear(4), Tensor(x))
        assert np.array_equal(out.data, x)

    def test_zero_weight_gives_bias(self):
        p = LinearParams(weight=Tensor(np.zeros((3, 2))), bias=Tensor([5.0, -1.0]))
        out = linear(p, Tensor(np.ones((4, 3))))
        assert np.array_equal(out.data, np.tile([5.0, -1.0], (4, 1)))

    def test_random_case_vs_loop(self):
        rng = Prng(9)
        x = rng.uniform(-1, 1, (2, 3))
        w = rng.uniform(-1, 1, (3, 5))
        b = rng.uniform(-1, 1, (5,))
        got = linear(LinearParams(Tensor(w), Tensor(b)), Tensor(x)).data
        want = np.zeros((2, 5))
        for i in range(2):
            for j in range(5):
                want[i, j] = b[j]
                for l in range(3):
                    want[i, j] += x[i, l] * w[l, j]
        np.testing.assert_allclose(got, want, atol=1e-13)

    def test_vector_input(self):
        p = LinearParams(weight=Tensor(np.eye(3)), bias=Tensor([1.0, 1.0, 1.0]))
        out = linear(p, Tensor([1.0, 2.0, 3.0]))
        assert np.array_equal(out.data, [2.0, 3.0, 4.0])


class TestScaledDotAttention:
    def test_single_key(self):
        q = Tensor(Prng(1).uniform(-1, 1, (3, 4)))
        k = Tensor(Prng(2).uniform(-1, 1, (1, 4)))
        v = Tensor([[1.0, 2.0, 3.0, 4.0]])
        out, w = scaled_dot_attention(q, k, v)
        assert np.array_equal(out.data, np.tile(v.data, (3, 1)))
        assert np.array_equal(w, np.ones((3, 1)))

    def test_identical_keys_average_values(self):
        q = Tensor(Prng(3).uniform(-1, 1, (2, 4)))
        key = Prng(4).uniform(-1, 1, (1, 4))
        k = Tensor(np.vstack([key, key]))
        v = Tensor([[2.0, 0.0, 0.0, 0.0], [0.0, 4.0, 0.0, 0.0]])
        out, _ = scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(out.data, np.tile([1.0, 2.0, 0.0, 0.0], (2, 1)), atol=1e-12)

    def test_hand_weights(self):
        d = 4
        # keys chosen so logits after the 1/sqrt(d) scale are 0 and ln 2
        q = Tensor(np.ones((1, d)))
        k0 = np.zeros(d)
        k1 = np.full(d, math.log(2.0) * math.sqrt(d) / d)
        v = Tensor([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
        _, w = scaled_dot_attention(q, Tensor(np.vstack([k0, k1])), v)
        np.testing.assert_allclose(w, [[1 / 3, 2 / 3]], atol=1e-12)

    def test_rows_stochastic(self):
        rng = Prng(6)
        q, k, v = (Tensor(rng.uniform(-2, 2, (5, 8))) for _ in range(3))
        _, w = scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


class TestMha:
    def test_single_head_identity_projections_reduce(self):
        rng = Prng(7)
        p = init_mha(rng, heads=1, model_dim=4)
        ident = _identity_linear(4)
        p.query = p.key = p.value = p.out = ident
        q = Tensor(rng.uniform(-1, 1, (3, 4)))
        k = Tensor(rng.uniform(-1, 1, (5, 4)))
        v = Tensor(rng.uniform(-1, 1, (5, 4)))
        got, got_w = mha(p, q, k, v)
        want, want_w = scaled_dot_attention(q, k, v)
        np.testing.assert_array_equal(got.data, want.data)
        np.testing.assert_array_equal(got_w[0], want_w)

    def test_key_value_permutation_invariance(self):
        rng = Prng(8)
        p = init_mha(rng, heads=2, model_dim=8)
        q = Tensor(rng.uniform(-1, 1, (3, 8)))
        kv = rng.uniform(-1, 1, (6, 8))
        perm = [4, 0, 5, 2, 1, 3]
        out1, _ = mha(p, q, Tensor(kv), Tensor(kv))
        out2, _ = mha(p, q, Tensor(kv[perm]), Tensor(kv[perm]))
        np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)

    @pytest.mark.parametrize("heads", [1, 2, 4, 8])
    def test_output_shape(self, heads):
        rng = Prng(heads)
        p = init_mha(rng, heads=heads, model_dim=8)
        q = Tensor(rng.uniform(-1, 1, (5, 8)))
        k = Tensor(rng.uniform(-1, 1, (7, 8)))
        out, w = mha(p, q, k, k)
        assert out.shape == (5, 8)
        assert w.shape == (heads, 5, 7)

    def test_indivisible_heads_rejected(self):
        p = init_mha(Prng(0), heads=2, model_dim=8)
        p.heads = 3
        q = Tensor(np.ones((2, 8)))
        with pytest.raises(ShapeError):
            mha(p, q, q, q)


class TestEncoderDecoderLayers:
    def test_zero_projections_act_as_layer_norm(self):
        rng = Prng(10)
        p = init_encoder_layer(rng, heads=2, model_dim=8, ffn_dim=16)
        p.self_attn.out = LinearParams(Tensor(np.zeros((8, 8))), Tensor(np.zeros(8)))
        p.ffn_out = LinearParams(Tensor(np.zeros((16, 8))), Tensor(np.zeros(8)))
        x = rng.uniform(-1, 1, (4, 8))
        got, _ = encoder_layer(p, Tensor(x))
        # both residual branches contribute zero: two successive layer norms
        mu = x.mean(-1, keepdims=True)
        xh = (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + 1e-5)
        mu2 = xh.mean(-1, keepdims=True)
        want = (xh - mu2) / np.sqrt(((xh - mu2) ** 2).mean(-1, keepdims=True) + 1e-5)
        np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_decoder_shape_independent_of_memory_length(self):
        rng = Prng(11)
        p = init_decoder_layer(rng, heads=2, model_dim=8, ffn_dim=16)
        q = Tensor(rng.uniform(-1, 1, (3, 8)))
        for n_v in (1, 5, 17):
            mem = Tensor(rng.uniform(-1, 1, (n_v, 8)))
            out, _, _ = decoder_layer(p, q, mem)
            assert out.shape == (3, 8)

    def test_gradient_reaches_memory_through_cross_attention(self):
        rng = Prng(12)
        p = init_decoder_layer(rng, heads=2, model_dim=8, ffn_dim=16)
        q = Tensor(rng.uniform(-1, 1, (3, 8)))
        mem = Tensor(rng.uniform(-1, 1, (5, 8)), requires_grad=True)
        out, _, _ = decoder_layer(p, q, mem)
        grads = backward(_sq_loss(out))
        g = grads[mem.graph_id].data
        assert g.shape == (5, 8)
        assert np.abs(g).max() > 1e-8

    def test_encoder_permutation_equivariance(self):
        rng = Prng(13)
        p = init_encoder_layer(rng, heads=2, model_dim=8, ffn_dim=16)
        x = rng.uniform(-1, 1, (6, 8))
        perm = [3, 1, 5, 0, 4, 2]
        out, _ = encoder_layer(p, Tensor(x))
        out_p, _ = encoder_layer(p, Tensor(x[perm]))
        np.testing.assert_allclose(out_p.data, out.data[perm], atol=1e-12)

    def test_all_parameters_receive_gradient(self):
        rng = Prng(14)
        enc = init_encoder_layer(rng, heads=2, model_dim=8, ffn_dim=16)
        x = Tensor(rng.uniform(-1, 1, (4, 8)))
        out, _ = encoder_layer(enc, x)
        grads = backward(_sq_loss(out))
        for name, t in named_tensors(enc):
            assert t.graph_id in grads, name
            assert np.abs(grads[t.graph_id].data).max() > 0, name


class TestGru:
    def test_zero_parameters_fixed_point(self):
        zeros = map_tensors(init_gru(Prng(0), 3, 4), lambda t: Tensor(np.zeros(t.shape), requires_grad=True))
        per_step, final = gru(zeros, Tensor(np.ones((5, 3))))
        assert np.array_equal(per_step.data, np.zeros((5, 4)))
        assert np.array_equal(final.data, np.zeros(4))

    def test_single_step(self):
        rng = Prng(15)
        p = init_gru(rng, 3, 4)
        x = rng.uniform(-1, 1, (1, 3))
        per_step, final = gru(p, Tensor(x))
        assert per_step.shape == (1, 4)
        np.testing.assert_array_equal(per_step.data[0], final.data)

    def test_three_steps_vs_unrolled_oracle(self):
        rng = Prng(16)
        p = init_gru(rng, 3, 4)
        x = rng.uniform(-1, 1, (3, 3))
        per_step, final = gru(p, Tensor(x))

        def sig(a):
            return 1.0 / (1.0 + np.exp(-a))

        h = np.zeros(4)
        states = []
        for i in range(3):
            z = sig(x[i] @ p.w_update.data + h @ p.u_update.data + p.b_update.data)
            r = sig(x[i] @ p.w_reset.data + h @ p.u_reset.data + p.b_reset.data)
            cand = np.tanh(x[i] @ p.w_cand.data + (r * h) @ p.u_cand.data + p.b_cand.data)
            h = (1.0 - z) * h + z * cand
            states.append(h)
        np.testing.assert_allclose(per_step.data, np.array(states), atol=1e-12)
        np.testing.assert_allclose(final.data, states[-1], atol=1e-12)


class TestSinePosEmbed:
    def test_origin_values(self):
        pe = sine_pos_embed_2d(4, 4, 16)
        v = pe[0, 0]
        assert np.array_equal(v[0:8:2], np.zeros(4))   # row sin channels
        assert np.array_equal(v[1:8:2], np.ones(4))    # row cos channels
        assert np.array_equal(v[8::2], np.zeros(4))    # col sin channels
        assert np.array_equal(v[9::2], np.ones(4))     # col cos channels

    def test_range(self):
        pe = sine_pos_embed_2d(9, 7, 12)
        assert pe.min() >= -1.0 and pe.max() <= 1.0

    @pytest.mark.parametrize("h,w", [(8, 8), (16, 12), (64, 64)])
    def test_positions_pairwise_distinct(self, h, w):
        pe = sine_pos_embed_2d(h, w, 8).reshape(h * w, 8)
        assert np.unique(pe, axis=0).shape[0] == h * w

    def test_channels_not_multiple_of_four_rejected(self):
        with pytest.raises(ShapeError):
            sine_pos_embed_2d(4, 4, 6)


class TestInit:
    def test_biases_zero(self):
        p = init_encoder_layer(Prng(1), heads=2, model_dim=8, ffn_dim=16)
        for name, t in named_tensors(p):
            if name.endswith(".bias"):
                assert np.array_equal(t.data, np.zeros(t.shape)), name

    def test_deterministic(self):
        a = init_decoder_layer(Prng(5), heads=2, model_dim=8, ffn_dim=16)
        b = init_decoder_layer(Prng(5), heads=2, model_dim=8, ffn_dim=16)
        for (na, ta), (nb, tb) in zip(named_tensors(a), named_tensors(b)):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)

    def test_linear_weight_bound(self):
        p = init_linear(Prng(2), 4, 4)
        bound = math.sqrt(6.0 / 8.0)
        assert (np.abs(p.weight.data) <= bound).all()
        assert np.abs(p.weight.data).max() > 0

    def test_parameter_count(self):
        p = init_linear(Prng(3), 3, 5)
        assert parameter_count(p) == 3 * 5 + 5
