"""Global multi-head self-attention and pre-norm transformer blocks."""

from __future__ import annotations

import math

import numpy as np

from brainmt.errors import ConfigurationError
from brainmt.nn import LayerNorm, Linear, Module
from brainmt.tensor import Tensor, gelu, matmul, scaled_dot_attention, softmax, transpose


class MultiHeadAttention(Module):
    def __init__(self, rng, Z: int, heads: int = 8):
        if heads < 1 or Z % heads:
            raise ConfigurationError(f"token width {Z} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, Z, Z)
        self.k = Linear(rng, Z, Z)
        self.v = Linear(rng, Z, Z)
        self.out = Linear(rng, Z, Z)

    def _split(self, x: Tensor) -> Tensor:
        B, L, Z = x.shape
        return transpose(x.reshape(B, L, self.heads, Z // self.heads), (0, 2, 1, 3))

    def forward(self, x: Tensor, fused: bool = True) -> Tensor:
        """Non-causal attention over all L tokens. ``fused=False`` routes
        through explicit softmax/matmul nodes instead of the streaming op."""
        B, L, Z = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        if fused:
            o = scaled_dot_attention(q, k, v)
        else:
            scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(Z // self.heads))
            o = matmul(softmax(scores, axis=-1), v)
        o = transpose(o, (0, 2, 1, 3)).reshape(B, L, Z)
        return self.out(o)

    def attention_weights(self, x: Tensor) -> np.ndarray:
        """(B, heads, L, L) softmax weights, for inspection."""
        q = self._split(self.q(x)).data
        k = self._split(self.k(x)).data
        s = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
        s = np.exp(s - s.max(axis=-1, keepdims=True))
        return s / s.sum(axis=-1, keepdims=True)


class TransformerBlock(Module):
    """``x + MHA(LN(x))`` followed by ``x + MLP(LN(x))`` (GELU, width ratio 4)."""

    def __init__(self, rng, Z: int, heads: int = 8, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(Z)
        self.attn = MultiHeadAttention(rng, Z, heads)
        self.norm2 = LayerNorm(Z)
        self.fc1 = Linear(rng, Z, mlp_ratio * Z)
        self.fc2 = Linear(rng, mlp_ratio * Z, Z)

    def forward(self, x: Tensor, fused: bool = True) -> Tensor:
        x = x + self.attn(self.norm1(x), fused=fused)
        return x + self.fc2(gelu(self.fc1(self.norm2(x))))
