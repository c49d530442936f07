"""Bidirectional selective state-space (Mamba) block over spatiotemporal tokens."""

from __future__ import annotations

import enum
import math

import numpy as np

from brainmt.errors import ConfigurationError, DimensionError
from brainmt.kernels import SMALL_DA_THRESHOLD
from brainmt.nn import LayerNorm, Linear, Module, fan_in_uniform, param
from brainmt.tensor import (
    Tensor,
    concat,
    conv1d_causal,
    exp,
    flip,
    selective_scan,
    silu,
    softplus,
    take,
)


class ScanOrder(str, enum.Enum):
    TEMPORAL_FIRST = "temporal_first"  # time varies fastest: index k*T + t
    SPATIAL_FIRST = "spatial_first"  # space varies fastest: index t*K + k (canonical)


def zoh_discretize(a, b, delta):
    """Zero-order hold for a diagonal system.

    Returns ``(abar, bbar)`` with ``abar = exp(delta*a)`` and
    ``bbar = (exp(delta*a) - 1) / a * b``; when ``|delta*a| < 1e-8`` the
    limit ``delta * b`` is used instead.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    z = delta * a
    abar = np.exp(z)
    small = np.abs(z) < SMALL_DA_THRESHOLD
    factor = np.where(small, delta, np.expm1(z) / np.where(small, 1.0, a))
    return abar, factor * b


def reorder_indices(T: int, K: int, src, dst) -> np.ndarray:
    """Permutation ``p`` with ``out[i] = body[p[i]]`` taking layout src to dst."""
    src, dst = ScanOrder(src), ScanOrder(dst)
    j = np.arange(T * K)
    if src == dst:
        return j

    def pos(order, t, k):
        return k * T + t if order == ScanOrder.TEMPORAL_FIRST else t * K + k

    if dst == ScanOrder.TEMPORAL_FIRST:
        t, k = j % T, j // T
    else:
        t, k = j // K, j % K
    return pos(src, t, k)


def reorder(body, src, dst, T: int, K: int):
    """Permute a (..., T*K, Z) body (Tensor or array) between scan layouts."""
    n = body.shape[-2]
    if n != T * K:
        raise DimensionError(f"body has {n} tokens, expected T*K = {T}*{K} = {T * K}")
    perm = reorder_indices(T, K, src, dst)
    if isinstance(body, Tensor):
        return take(body, perm, axis=body.ndim - 2)
    return np.take(body, perm, axis=-2)


def _inverse_softplus(y):
    return y + np.log(-np.expm1(-y))


class SsmDirection(Module):
    """One scan direction: in-projection, causal conv, selective SSM, z-gate."""

    def __init__(self, rng, Z: int, state_dim: int = 16, expansion: int = 2, d_conv: int = 4):
        d = expansion * Z
        r = math.ceil(Z / 16)
        self.d_inner = d
        self.in_proj = Linear(rng, Z, 2 * d)
        self.conv_w = param(fan_in_uniform(rng, (d, d_conv), d_conv))
        self.conv_b = param(np.zeros(d))
        self.dt_down = Linear(rng, d, r, bias=False)
        self.dt_up = Linear(rng, r, d)
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=d))
        self.dt_up.bias.data = _inverse_softplus(dt)
        self.B_proj = Linear(rng, d, state_dim, bias=False)
        self.C_proj = Linear(rng, d, state_dim, bias=False)
        # A = -exp(A_log) keeps the diagonal strictly negative; A_n = -(n+1) at init
        self.A_log = param(np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (d, 1))))
        self.D = param(np.ones(d))  # per-channel skip around the scan
        self.out_proj = Linear(rng, d, Z, bias=False)

    @property
    def A(self) -> Tensor:
        return exp(self.A_log) * -1.0

    def forward(self, h: Tensor) -> Tensor:
        d = self.d_inner
        xz = self.in_proj(h)
        x, z = xz[..., :d], xz[..., d:]
        x = silu(conv1d_causal(x, self.conv_w, self.conv_b))
        delta = softplus(self.dt_up(self.dt_down(x)))
        y = selective_scan(x, delta, self.A, self.B_proj(x), self.C_proj(x)) + x * self.D
        return self.out_proj(y * silu(z))


def _reverse_body(x: Tensor) -> Tensor:
    """Reverse positions 1..L-1, keeping position 0 (cls) in place."""
    return concat([x[:, :1], flip(x[:, 1:], 1)], axis=1)


class MambaBlock(Module):
    """Pre-norm residual block with independent forward/backward directions.

    The body is permuted into ``scan_order`` for the scans and restored
    afterwards; cls sits at scan position 0 in both directions.
    """

    def __init__(self, rng, Z: int, state_dim: int = 16, expansion: int = 2, d_conv: int = 4,
                 scan_order: str = "temporal_first"):
        self.norm = LayerNorm(Z)
        self.fwd = SsmDirection(rng, Z, state_dim, expansion, d_conv)
        self.bwd = SsmDirection(rng, Z, state_dim, expansion, d_conv)
        try:
            self.scan_order = ScanOrder(scan_order)
        except ValueError:
            raise ConfigurationError(f"unknown scan order {scan_order!r}") from None

    def tie_directions(self) -> None:
        """Share forward parameters with the backward direction (test fixture)."""
        self.bwd = self.fwd

    def forward(self, tokens: Tensor, T: int, K: int) -> Tensor:
        order = self.scan_order
        body = reorder(tokens[:, 1:], ScanOrder.SPATIAL_FIRST, order, T, K)
        seq = concat([tokens[:, :1], body], axis=1)
        hn = self.norm(seq)
        y = self.fwd(hn) + _reverse_body(self.bwd(_reverse_body(hn)))
        out = seq + y
        body = reorder(out[:, 1:], order, ScanOrder.SPATIAL_FIRST, T, K)
        return concat([out[:, :1], body], axis=1)


def mamba_block(seq, block: MambaBlock):
    """Apply ``block`` to a TokenSequence, returning a new TokenSequence."""
    from brainmt.positional import TokenSequence

    return TokenSequence(block(seq.tokens, seq.T, seq.K), seq.T, seq.K, seq.scan_order)
