import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from deshadow.layers import (
    AttentionBlockConfig,
    CrossAttentionBlock,
    conv2d,
    group_norm,
    init_parameters,
    sinusoidal_time_embedding,
    softmax_rows,
)


def seeded(shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g)


class TestConv2d:
    def test_one_by_one_identity(self):
        x = seeded((1, 3, 5, 5))
        weight = torch.eye(3).reshape(3, 3, 1, 1)
        out = conv2d(x, weight)
        assert torch.equal(out, x)

    def test_ones_kernel_on_constant(self):
        x = torch.full((1, 1, 6, 6), 0.5)
        weight = torch.ones(1, 1, 3, 3)
        out = conv2d(x, weight, padding=1)
        assert torch.allclose(out[0, 0, 1:-1, 1:-1], torch.tensor(9 * 0.5))

    def test_matches_naive_loop_oracle(self):
        x = seeded((1, 2, 5, 5), seed=1)
        w = seeded((3, 2, 3, 3), seed=2) - 0.5
        out = conv2d(x, w, padding=1)
        xp = torch.nn.functional.pad(x, (1, 1, 1, 1)).numpy().astype(np.float64)
        wn = w.numpy().astype(np.float64)
        expect = np.zeros((1, 3, 5, 5))
        for co in range(3):
            for ci in range(2):
                for oy in range(5):
                    for ox in range(5):
                        for ky in range(3):
                            for kx in range(3):
                                expect[0, co, oy, ox] += (
                                    xp[0, ci, oy + ky, ox + kx] * wn[co, ci, ky, kx]
                                )
        assert np.abs(out.numpy() - expect).max() < 1e-5

    def test_linearity(self):
        x = seeded((1, 2, 4, 4), seed=3)
        y = seeded((1, 2, 4, 4), seed=4)
        w = seeded((2, 2, 3, 3), seed=5) - 0.5
        lhs = conv2d(2.0 * x + 3.0 * y, w, padding=1)
        rhs = 2.0 * conv2d(x, w, padding=1) + 3.0 * conv2d(y, w, padding=1)
        assert torch.allclose(lhs, rhs, atol=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel"):
            conv2d(seeded((1, 3, 4, 4)), seeded((2, 2, 3, 3)))


class TestSoftmaxRows:
    def test_uniform_for_constant_row(self):
        out = softmax_rows(torch.zeros(1, 3))
        assert torch.allclose(out, torch.full((1, 3), 1.0 / 3.0))

    def test_large_logits_do_not_overflow(self):
        out = softmax_rows(torch.tensor([[1000.0, 0.0]]))
        assert torch.isfinite(out).all()
        assert out[0, 0] > 0.999 and out[0, 1] < 1e-3

    def test_matches_float64_oracle(self):
        m = (seeded((6, 7), seed=8) - 0.5) * 10
        out = softmax_rows(m).numpy()
        m64 = m.numpy().astype(np.float64)
        expect = np.exp(m64) / np.exp(m64).sum(axis=1, keepdims=True)
        assert np.abs(out - expect).max() < 1e-6

    @given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 6))
    def test_rows_sum_to_one(self, seed, rows, cols):
        m = (seeded((rows, cols), seed=seed) - 0.5) * 50
        sums = softmax_rows(m).sum(dim=-1)
        assert torch.allclose(sums, torch.ones(rows), atol=1e-6)


class TestGroupNorm:
    def test_affine_passthrough_when_standardized(self):
        g = torch.Generator().manual_seed(11)
        x = torch.randn(1, 4, 32, 32, generator=g)
        x = (x - x.mean()) / x.std(unbiased=False)
        out = group_norm(x, 1, torch.ones(4), torch.zeros(4))
        assert torch.allclose(out, x, atol=1e-3)

    def test_constant_input_gives_beta(self):
        x = torch.full((1, 4, 5, 5), 3.0)
        beta = torch.tensor([1.0, 2.0, 3.0, 4.0])
        out = group_norm(x, 2, torch.ones(4), beta)
        assert torch.allclose(out, beta[None, :, None, None].expand_as(x), atol=1e-4)

    def test_matches_naive_loop_oracle(self):
        x = seeded((2, 4, 3, 3), seed=12)
        gamma = seeded((4,), seed=13) + 0.5
        beta = seeded((4,), seed=14)
        out = group_norm(x, 2, gamma, beta)
        xn = x.numpy().astype(np.float64)
        expect = np.zeros_like(xn)
        for b in range(2):
            for g in range(2):
                sl = xn[b, 2 * g : 2 * g + 2]
                mu, var = sl.mean(), sl.var()
                norm = (sl - mu) / np.sqrt(var + 1e-5)
                for c in range(2):
                    expect[b, 2 * g + c] = norm[c] * float(gamma[2 * g + c]) + float(beta[2 * g + c])
        assert np.abs(out.numpy() - expect).max() < 1e-5

    def test_indivisible_channels(self):
        with pytest.raises(ValueError, match="divisible"):
            group_norm(seeded((1, 3, 2, 2)), 2, torch.ones(3), torch.zeros(3))


def make_block(query_channels=4, context_dim=3, inner_dim=5, seed=20):
    block = CrossAttentionBlock(
        AttentionBlockConfig(query_channels=query_channels, context_dim=context_dim,
                             inner_dim=inner_dim)
    )
    init_parameters(block, seed=seed)
    return block


class TestCrossAttention:
    def test_zero_init_output_projection_is_identity(self):
        block = make_block()
        z = seeded((1, 4, 2, 2), seed=21)
        tokens = seeded((1, 6, 3), seed=22)
        assert torch.equal(block(z, tokens), z)

    def test_attention_weight_rows_sum_to_one(self):
        block = make_block()
        block.capture_weights = True
        block(seeded((1, 4, 2, 2), seed=23), seeded((1, 6, 3), seed=24))
        sums = block.last_weights.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_identical_tokens_average_to_that_token_value(self):
        # softmax over identical key/value rows returns W_V . token for any query
        block = make_block()
        with torch.no_grad():
            block.to_out.weight.copy_(torch.eye(4, 5))
            block.to_out.bias.zero_()
        one = seeded((1, 1, 3), seed=25)
        tokens = one.expand(1, 6, 3)
        z = torch.zeros(1, 4, 2, 2)
        out = block(z, tokens) - z
        v_row = block.to_v(one)[0, 0]
        expect = (block.to_out.weight @ v_row + block.to_out.bias).detach()
        flat = out.reshape(1, 4, -1).permute(0, 2, 1)
        assert torch.allclose(flat, expect.expand(1, 4, 4), atol=1e-5)

    def test_single_token_weight_is_one(self):
        block = make_block()
        block.capture_weights = True
        block(seeded((1, 4, 2, 2), seed=26), seeded((1, 1, 3), seed=27))
        assert torch.allclose(block.last_weights, torch.ones_like(block.last_weights))

    def test_matches_scalar_softmax_oracle(self):
        # 4 query positions x 3 context tokens, evaluated scalar by scalar
        block = make_block()
        with torch.no_grad():
            g = torch.Generator().manual_seed(28)
            block.to_out.weight.copy_(torch.rand(4, 5, generator=g) - 0.5)
            block.to_out.bias.copy_(torch.rand(4, generator=g) - 0.5)
        z = seeded((1, 4, 2, 2), seed=29)
        tokens = seeded((1, 3, 3), seed=30)
        out = block(z, tokens).detach().numpy().astype(np.float64)

        wq = block.to_q.weight.detach().numpy().astype(np.float64).reshape(5, 4)
        bq = block.to_q.bias.detach().numpy().astype(np.float64)
        wk = block.to_k.weight.detach().numpy().astype(np.float64)
        wv = block.to_v.weight.detach().numpy().astype(np.float64)
        wo = block.to_out.weight.detach().numpy().astype(np.float64)
        bo = block.to_out.bias.detach().numpy().astype(np.float64)
        zn = z.numpy().astype(np.float64)
        tk = tokens.numpy().astype(np.float64)

        q = np.zeros((4, 5))
        for pos, (y, x) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
            for d in range(5):
                q[pos, d] = sum(wq[d, c] * zn[0, c, y, x] for c in range(4)) + bq[d]
        k = tk[0] @ wk.T
        v = tk[0] @ wv.T
        scores = q @ k.T / math.sqrt(5)
        weights = np.exp(scores - scores.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        attended = weights @ v
        projected = attended @ wo.T + bo
        expect = zn.copy()
        for pos, (y, x) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
            expect[0, :, y, x] += projected[pos]
        assert np.abs(out - expect).max() < 1e-5

    def test_context_dim_mismatch(self):
        block = make_block()
        with pytest.raises(ValueError, match="tokens"):
            block(seeded((1, 4, 2, 2)), seeded((1, 6, 7)))


class TestTimeEmbedding:
    def test_shape_and_finiteness(self):
        emb = sinusoidal_time_embedding(torch.tensor([1, 5, 50]), 64)
        assert emb.shape == (3, 64)
        assert torch.isfinite(emb).all()

    def test_distinct_steps_distinct_embeddings(self):
        emb = sinusoidal_time_embedding(torch.tensor([1, 2]), 32)
        assert not torch.allclose(emb[0], emb[1])

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            sinusoidal_time_embedding(torch.tensor([1]), 63)
