"""Learned spatial/temporal embeddings and the classification token."""

from __future__ import annotations

from dataclasses import dataclass

from brainmt.errors import DimensionError
from brainmt.nn import Module, param, trunc_normal
from brainmt.tensor import Tensor, broadcast_to, concat


@dataclass
class TokenSequence:
    """(B, L, Z) tokens, L = T*K + 1, cls at index 0, body in ``scan_order``."""

    tokens: Tensor
    T: int
    K: int
    scan_order: str = "spatial_first"

    @property
    def L(self) -> int:
        return self.tokens.shape[1]


class PositionalCls(Module):
    def __init__(self, rng, T: int, K: int, Z: int):
        self.P_s = param(trunc_normal(rng, (1, K, Z)))
        self.P_t = param(trunc_normal(rng, (T, 1, Z)))
        self.cls = param(trunc_normal(rng, (1, 1, Z)))

    def forward(self, f: Tensor) -> TokenSequence:
        return add_positional_and_cls(f, self.P_s, self.P_t, self.cls)


def add_positional_and_cls(f: Tensor, P_s: Tensor, P_t: Tensor, cls: Tensor) -> TokenSequence:
    """Body token (t, k) = f[t, k] + P_s[k] + P_t[t]; cls is prepended after
    the positional sums and gets no positional term.

    f: (B, T, K, Z) stage-2 features. The body is flattened t-outer, k-inner.
    """
    B, T, K, Z = f.shape
    if P_t.shape[0] != T:
        raise DimensionError(f"temporal embedding covers {P_t.shape[0]} frames, features have {T}")
    if P_s.shape[1] != K or P_s.shape[2] != Z:
        raise DimensionError(f"spatial embedding {P_s.shape} does not match K={K}, Z={Z}")
    body = (f + P_s + P_t).reshape(B, T * K, Z)
    head = broadcast_to(cls.reshape(1, 1, Z), (B, 1, Z))
    return TokenSequence(concat([head, body], axis=1), T, K)

