import itertools

import numpy as np
import pytest

from tint.attention import (
    AttentionParams,
    TransformerBlockParams,
    attention_bias_lookup,
    attention_weights,
    relative_position_index,
    scaled_dot_attention,
    transformer_block,
    window_attention,
    window_partition,
    window_reverse,
)
from tint.errors import ShapeError
from tint.gradcheck import randomize
from tint.tensor import Tensor, grad_check

F64 = np.float64


def attn_params(rng, c, m, window=2, bias=False, dtype=F64):
    p = AttentionParams.init(rng, c, m, window, bias, dtype)
    for t in (p.w_q, p.w_k, p.w_v, p.w_o):
        t.data = rng.normal(0.0, 0.5, size=t.shape).astype(dtype)
    return p


def reference_mha(z, p, bias=None):
    """Per-window, per-head loop transcription of multi-head attention."""
    n, length, c = z.shape
    m, d = p.num_heads, c // p.num_heads
    out = np.zeros((n, length, c))
    for b in range(n):
        heads = []
        for h in range(m):
            sl = slice(h * d, (h + 1) * d)
            q = z[b] @ p.w_q.data[:, sl]
            k = z[b] @ p.w_k.data[:, sl]
            v = z[b] @ p.w_v.data[:, sl]
            logits = q @ k.T / np.sqrt(d)
            if bias is not None:
                logits = logits + bias[h]
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            heads.append((e / e.sum(axis=1, keepdims=True)) @ v)
        out[b] = np.concatenate(heads, axis=1) @ p.w_o.data
    return out


class TestScaledDotAttention:
    def test_uniform_attention_example(self):
        z = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        eye = np.eye(2)
        p = AttentionParams(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), Tensor(eye.copy()),
                            Tensor(eye.copy()), None, 1, 1, relative_position_index(1))
        np.testing.assert_array_equal(scaled_dot_attention(z, p).data, [[[0.5, 0.5], [0.5, 0.5]]])

    def test_single_token(self, rng):
        p = attn_params(rng, 4, 2)
        z = rng.normal(size=(3, 1, 4))
        expect = z @ p.w_v.data @ p.w_o.data
        np.testing.assert_allclose(scaled_dot_attention(Tensor(z), p).data, expect, atol=1e-13)

    @pytest.mark.parametrize("m", [1, 2, 4])
    def test_matches_loop_reference(self, m, rng):
        p = attn_params(rng, 8, m)
        z = rng.normal(size=(2, 5, 8))
        bias = rng.normal(size=(m, 5, 5))
        np.testing.assert_allclose(scaled_dot_attention(Tensor(z), p).data, reference_mha(z, p), atol=1e-12)
        np.testing.assert_allclose(scaled_dot_attention(Tensor(z), p, Tensor(bias)).data,
                                   reference_mha(z, p, bias), atol=1e-12)

    def test_token_permutation_equivariance(self, rng):
        p = attn_params(rng, 4, 2)
        z = rng.normal(size=(1, 3, 4))
        base = scaled_dot_attention(Tensor(z), p).data
        for perm in itertools.permutations(range(3)):
            perm = list(perm)
            np.testing.assert_allclose(scaled_dot_attention(Tensor(z[:, perm]), p).data, base[:, perm], atol=1e-12)

    def test_qk_scale_invariance(self, rng):
        p = attn_params(rng, 8, 2)
        z = Tensor(rng.normal(size=(2, 4, 8)))
        base = scaled_dot_attention(z, p).data
        p.w_q.data = p.w_q.data * 3.7
        p.w_k.data = p.w_k.data / 3.7
        np.testing.assert_allclose(scaled_dot_attention(z, p).data, base, atol=1e-5)

    def test_rows_sum_to_one(self, rng):
        for b, length, c in [(1, 3, 4), (2, 5, 8), (3, 9, 6)]:
            p = attn_params(rng, c, 2)
            z = Tensor(rng.normal(size=(b, length, c)))
            a = attention_weights(z, p).data
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
            biased = attention_weights(z, p, Tensor(rng.normal(size=(2, length, length)))).data
            np.testing.assert_allclose(biased.sum(axis=-1), 1.0, atol=1e-12)
            assert np.all((a >= 0) & (a <= 1))

    def test_head_divisibility(self, rng):
        with pytest.raises(ShapeError):
            AttentionParams.init(rng, 6, 4, 2)

    def test_bias_shape_error(self, rng):
        p = attn_params(rng, 4, 2)
        with pytest.raises(ShapeError):
            scaled_dot_attention(Tensor(rng.normal(size=(1, 3, 4))), p, Tensor(np.zeros((2, 4, 4))))

    def test_width_mismatch(self, rng):
        p = attn_params(rng, 4, 2)
        with pytest.raises(ShapeError):
            scaled_dot_attention(Tensor(rng.normal(size=(1, 3, 5))), p)

    def test_gradient(self, rng):
        p = attn_params(rng, 4, 2)
        z = Tensor(rng.normal(size=(2, 3, 4)))
        w = Tensor(rng.normal(size=(2, 3, 4)))
        assert grad_check(lambda *_: (scaled_dot_attention(z, p) * w).sum(), [z] + p.parameters()) < 1e-4


class TestWindows:
    def test_counts(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 4, 3)))
        assert window_partition(x, 2).shape == (4, 4, 3)
        assert window_partition(x, 4).shape == (1, 16, 3)

    def test_partition_layout(self):
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        w = window_partition(Tensor(x), 2).data[..., 0]
        np.testing.assert_array_equal(w[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(w[1], [2, 3, 6, 7])
        np.testing.assert_array_equal(w[3], [10, 11, 14, 15])

    @pytest.mark.parametrize("shape,window", [((2, 4, 6, 3), 2), ((1, 6, 6, 2), 3), ((1, 4, 4, 1), 4), ((3, 2, 2, 5), 1)])
    def test_round_trip(self, shape, window, rng):
        x = rng.normal(size=shape)
        back = window_reverse(window_partition(Tensor(x), window), window, shape[1], shape[2]).data
        assert back.tobytes() == x.tobytes()

    def test_zero_round_trip(self):
        x = np.zeros((1, 4, 4, 2))
        np.testing.assert_array_equal(window_reverse(window_partition(Tensor(x), 2), 2, 4, 4).data, x)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            window_partition(Tensor(np.zeros((1, 5, 4, 1))), 2)

    def test_reverse_inconsistent_count(self):
        with pytest.raises(ShapeError):
            window_reverse(Tensor(np.zeros((3, 4, 1))), 2, 4, 4)


class TestBias:
    def test_window_one(self, rng):
        p = AttentionParams.init(rng, 4, 2, 1, True, F64)
        assert p.bias_table.shape == (2, 1)
        p.bias_table.data = np.array([[0.5], [-1.5]])
        np.testing.assert_array_equal(attention_bias_lookup(p, 1).data, [[[0.5]], [[-1.5]]])

    def test_diagonal_shares_one_entry(self, rng):
        p = AttentionParams.init(rng, 4, 2, 3, True, F64)
        p.bias_table.data = rng.normal(size=p.bias_table.shape)
        b = attention_bias_lookup(p, 3).data
        for h in range(2):
            assert len(set(np.diag(b[h]))) == 1

    def test_window_two_uses_nine_rows(self):
        idx = relative_position_index(2)
        assert idx.shape == (4, 4)
        assert len(np.unique(idx)) == 9

    def test_index_formula(self):
        w = 3
        idx = relative_position_index(w)
        for i, j in itertools.product(range(w * w), repeat=2):
            dy = i // w - j // w
            dx = i % w - j % w
            assert idx[i, j] == (dy + w - 1) * (2 * w - 1) + (dx + w - 1)

    def test_zero_initialized(self, rng):
        assert np.all(AttentionParams.init(rng, 4, 2, 2).bias_table.data == 0)

    def test_window_mismatch(self, rng):
        p = AttentionParams.init(rng, 4, 2, 2)
        with pytest.raises(ShapeError):
            attention_bias_lookup(p, 3)

    def test_bias_table_gradient(self, rng):
        p = attn_params(rng, 4, 2, window=2, bias=True)
        p.bias_table.data = rng.normal(size=p.bias_table.shape)
        x = Tensor(rng.normal(size=(1, 4, 4, 4)))
        w = Tensor(rng.normal(size=(1, 4, 4, 4)))
        assert grad_check(lambda *_: (window_attention(x, p, 2) * w).sum(), [x] + p.parameters()) < 1e-4


class TestTransformerBlock:
    def test_zero_weights_identity(self, rng):
        p = TransformerBlockParams.init(rng, 8, 2, 2, 4, True, F64)
        for name, t in p.named_parameters():
            t.data = np.ones_like(t.data) if name.endswith("weight") else np.zeros_like(t.data)
        x = rng.normal(size=(2, 4, 4, 8))
        np.testing.assert_array_equal(transformer_block(Tensor(x), p, 2, "eval").data, x)

    @pytest.mark.parametrize("res,dim,heads,window", [(28, 128, 4, 7), (14, 160, 5, 14), (7, 320, 10, 7)])
    def test_default_stage_shapes(self, res, dim, heads, window, rng):
        p = TransformerBlockParams.init(rng, dim, heads, window)
        x = Tensor(rng.normal(size=(1, res, res, dim)).astype(np.float32))
        assert transformer_block(x, p, window).shape == x.shape

    def test_divisibility_error(self, rng):
        p = TransformerBlockParams.init(rng, 8, 2, 3)
        with pytest.raises(ShapeError):
            transformer_block(Tensor(np.zeros((1, 4, 4, 8))), p, 3)

    def test_gradient(self, rng):
        p = TransformerBlockParams.init(rng, 8, 2, 2, 4, True, F64)
        randomize(p, rng)
        x = Tensor(rng.normal(size=(1, 4, 4, 8)))
        w = Tensor(rng.normal(size=(1, 4, 4, 8)))
        fn = lambda *_: (transformer_block(x, p, 2, "eval") * w).sum()  # noqa: E731
        assert grad_check(fn, [x] + p.parameters(), max_coords=40) < 1e-4
