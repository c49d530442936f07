import math

import numpy as np
import pytest

from brainmt.attention import MultiHeadAttention, TransformerBlock
from brainmt.errors import ConfigurationError
from brainmt.tensor import Tensor, backward

from gradcheck import numeric_grad, rel_err


def loop_attention(mha, x):
    """Nested-loop oracle over batch, head, query and key."""
    B, L, Z = x.shape
    h = mha.heads
    dh = Z // h
    q = x @ mha.q.weight.data + mha.q.bias.data
    k = x @ mha.k.weight.data + mha.k.bias.data
    v = x @ mha.v.weight.data + mha.v.bias.data
    o = np.zeros((B, L, Z))
    for b in range(B):
        for hd in range(h):
            sl = slice(hd * dh, (hd + 1) * dh)
            for i in range(L):
                s = [sum(q[b, i, sl][c] * k[b, j, sl][c] for c in range(dh)) / math.sqrt(dh) for j in range(L)]
                m = max(s)
                e = [math.exp(v_ - m) for v_ in s]
                tot = sum(e)
                for j in range(L):
                    o[b, i, sl] += e[j] / tot * v[b, j, sl]
    return o @ mha.out.weight.data + mha.out.bias.data


def test_matches_loop_oracle():
    rng = np.random.default_rng(0)
    mha = MultiHeadAttention(rng, 8, heads=2)
    x = rng.normal(size=(1, 5, 8))
    ref = loop_attention(mha, x)
    np.testing.assert_allclose(mha(Tensor(x)).data, ref, atol=1e-12, rtol=0)
    np.testing.assert_allclose(mha(Tensor(x), fused=False).data, ref, atol=1e-12, rtol=0)


def test_single_token():
    rng = np.random.default_rng(1)
    mha = MultiHeadAttention(rng, 8, heads=4)
    x = rng.normal(size=(2, 1, 8))
    v = x @ mha.v.weight.data + mha.v.bias.data
    np.testing.assert_allclose(mha(Tensor(x)).data, v @ mha.out.weight.data + mha.out.bias.data, atol=1e-14)
    np.testing.assert_array_equal(mha.attention_weights(Tensor(x)), 1.0)


def test_identical_tokens_uniform_weights():
    rng = np.random.default_rng(2)
    mha = MultiHeadAttention(rng, 8, heads=2)
    x = np.tile(rng.normal(size=8), (1, 6, 1))
    np.testing.assert_allclose(mha.attention_weights(Tensor(x)), 1 / 6, atol=1e-15)


def test_rows_sum_to_one():
    rng = np.random.default_rng(3)
    mha = MultiHeadAttention(rng, 16, heads=8)
    w = mha.attention_weights(Tensor(rng.normal(scale=5, size=(2, 33, 16))))
    assert np.all(np.abs(w.sum(-1) - 1) < 1e-12)


def test_head_divisibility():
    with pytest.raises(ConfigurationError):
        MultiHeadAttention(np.random.default_rng(0), 10, heads=8)


def test_zero_weights_identity():
    rng = np.random.default_rng(4)
    blk = TransformerBlock(rng, 8, heads=2)
    for lin in (blk.attn.q, blk.attn.k, blk.attn.v, blk.attn.out, blk.fc1, blk.fc2):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0
    x = rng.normal(size=(2, 7, 8))
    assert np.array_equal(blk(Tensor(x)).data, x)


@pytest.mark.parametrize("L", [1, 4, 19])
def test_shape_preserved(L):
    blk = TransformerBlock(np.random.default_rng(5), 16, heads=8)
    assert blk(Tensor(np.ones((1, L, 16)))).shape == (1, L, 16)


def test_permutation_equivariance():
    rng = np.random.default_rng(6)
    blk = TransformerBlock(rng, 8, heads=2)
    x = rng.normal(size=(1, 9, 8))
    perm = np.concatenate([[0], 1 + rng.permutation(8)])
    y = blk(Tensor(x)).data
    np.testing.assert_allclose(blk(Tensor(x[:, perm])).data, y[:, perm], atol=1e-12)


def test_block_gradients():
    rng = np.random.default_rng(7)
    blk = TransformerBlock(rng, 8, heads=2)
    x = Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True)
    w = rng.normal(size=x.shape)

    def f():
        return float((blk(Tensor(x.data)).data * w).sum())

    backward((blk(x) * Tensor(w)).sum())
    assert rel_err(x.grad, numeric_grad(f, x.data)) < 1e-4
    for name, p in blk.named_parameters():
        if name == "attn.k.bias":
            # softmax is shift-invariant per row, so this gradient is exactly ~0
            assert np.abs(p.grad).max() < 1e-12
            continue
        idx = rng.choice(p.size, size=min(p.size, 10), replace=False)
        assert rel_err(p.grad, numeric_grad(f, p.data, indices=idx)) < 1e-4, name


def test_fused_and_explicit_gradients_agree():
    rng = np.random.default_rng(8)
    blk = TransformerBlock(rng, 8, heads=4)
    x = rng.normal(size=(1, 6, 8))
    grads = []
    for fused in (True, False):
        xt = Tensor(x, requires_grad=True)
        backward((blk(xt, fused=fused) ** 2).sum())
        grads.append(xt.grad)
    np.testing.assert_allclose(grads[0], grads[1], atol=1e-12)
