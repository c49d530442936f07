"""Differentiable ops. Every function takes and returns :class:`Tensor`.

Layouts: conv3d is channel-last ``(N, H, W, D, C)``; sequence ops take
``(B, L, d)``. Each op's adjoint is written out by hand next to its forward.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from brainmt import kernels
from brainmt.errors import ConfigurationError, DimensionError

from .core import Tensor, as_tensor, make_node

# im2col buffers are capped at this many float64 elements per chunk
_IM2COL_CAP = 1 << 22
_ATTN_CAP = 1 << 22


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):  # make_node reports non-finite
        out = a.data / b.data

    def bwd(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return make_node(out, (a, b), bwd, "div")


def power(a: Tensor, p: float) -> Tensor:
    return make_node(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bwd, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    count = math.prod(a.shape[i] for i in axes)
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def bwd(g):
        out = np.zeros(a.shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return make_node(np.array(a.data[index]), (a,), bwd, "getitem")


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; permutations get an inverse-gather adjoint."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    is_perm = indices.ndim == 1 and len(indices) == a.shape[axis] and np.array_equal(
        np.sort(indices), np.arange(len(indices))
    )
    inv = np.argsort(indices) if is_perm else None

    def bwd(g):
        if is_perm:
            return (np.take(g, inv, axis=axis),)
        out = np.zeros(a.shape)
        idx = [slice(None)] * a.ndim
        idx[axis] = indices
        np.add.at(out, tuple(idx), g)
        return (out,)

    return make_node(np.take(a.data, indices, axis=axis), (a,), bwd, "take")


def flip(a: Tensor, axis: int) -> Tensor:
    return make_node(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis),), "flip")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return make_node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    return make_node(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        lambda g: (_unbroadcast(g, src),),
        "broadcast_to",
    )


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from None

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(out, (a, b), bwd, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape (in, out), fused into one node."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    return make_node(out, parents, bwd, "linear")


# ---------------------------------------------------------------------------
# convolutions


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """3-D cross-correlation, channel-last.

    x: (N, H, W, D, C_in) or (H, W, D, C_in); w: (C_out, C_in, k, k, k).
    Output extent per axis is ``floor((n + 2*pad - k) / stride) + 1``.
    """
    squeeze = x.ndim == 4
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 5 or w.ndim != 5:
        raise DimensionError(f"conv3d expects x (N,H,W,D,C) and w (Co,Ci,k,k,k); got {x.shape}, {w.shape}")
    n, H, W, D, cin = xd.shape
    cout, wcin, k = w.shape[0], w.shape[1], w.shape[2]
    if wcin != cin or w.shape[2:] != (k, k, k):
        raise DimensionError(f"conv3d channel/kernel mismatch: x {x.shape}, w {w.shape}")
    ho, wo, do = (_conv_out(s, k, stride, pad) for s in (H, W, D))
    if min(ho, wo, do) < 1:
        raise DimensionError(f"conv3d output extent < 1 for input {x.shape}, k={k}, stride={stride}, pad={pad}")

    cols_per_item = ho * wo * do * cin * k**3
    step = max(1, _IM2COL_CAP // max(cols_per_item, 1))
    padw = ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0))
    s = stride

    def windows(lo, hi):
        xp = np.pad(xd[lo:hi], padw) if pad else xd[lo:hi]
        return sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::s, ::s, ::s][:, :ho, :wo, :do]

    out = np.empty((n, ho, wo, do, cout))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        out[lo:hi] = np.tensordot(windows(lo, hi), w.data, axes=([4, 5, 6, 7], [1, 2, 3, 4]))
    if bias is not None:
        out += bias.data
    parents = (x, w) if bias is None else (x, w, bias)

    def bwd(g):
        g5 = g[None] if squeeze else g
        gw = np.zeros(w.shape)
        gx = np.zeros(xd.shape)
        wmat = w.data.transpose(0, 2, 3, 4, 1).reshape(cout, -1)
        for lo in range(0, n, step):
            hi = min(n, lo + step)
            gc = g5[lo:hi]
            if w.requires_grad:
                gw += np.tensordot(gc, windows(lo, hi), axes=([0, 1, 2, 3], [0, 1, 2, 3]))
            if x.requires_grad:
                cols = (gc.reshape(-1, cout) @ wmat).reshape(hi - lo, ho, wo, do, k, k, k, cin)
                gxp = np.zeros((hi - lo, H + 2 * pad, W + 2 * pad, D + 2 * pad, cin))
                for i in range(k):
                    for j in range(k):
                        for m in range(k):
                            gxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, m : m + s * (do - 1) + 1 : s] += cols[
                                :, :, :, :, i, j, m
                            ]
                gx[lo:hi] = gxp[:, pad : pad + H, pad : pad + W, pad : pad + D]
        gx = gx[0] if squeeze else gx
        if bias is None:
            return gx, gw
        return gx, gw, g5.sum(axis=(0, 1, 2, 3))

    return make_node(out[0] if squeeze else out, parents, bwd, "conv3d")


def conv1d_causal(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution over the sequence axis.

    x: (B, L, d) or (L, d); w: (d, k) where ``w[:, j]`` weights lag ``j``, so
    ``y[t] = bias + sum_j w[:, j] * x[t - j]`` with zeros before the start.
    """
    if w.ndim != 2 or w.shape[1] <= 0:
        raise ConfigurationError(f"conv1d_causal needs a (d, k) kernel with k >= 1, got {w.shape}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    _, L, d = xd.shape
    k = w.shape[1]
    if w.shape[0] != d:
        raise DimensionError(f"conv1d_causal channel mismatch: x {x.shape}, w {w.shape}")
    xp = np.pad(xd, ((0, 0), (k - 1, 0), (0, 0)))
    out = np.zeros_like(xd)
    for j in range(k):
        out += w.data[:, j] * xp[:, k - 1 - j : k - 1 - j + L]
    if bias is not None:
        out += bias.data
    parents = (x, w) if bias is None else (x, w, bias)

    def bwd(g):
        g3 = g[None] if squeeze else g
        gxp = np.zeros_like(xp)
        gw = np.empty(w.shape)
        for j in range(k):
            sl = slice(k - 1 - j, k - 1 - j + L)
            gxp[:, sl] += g3 * w.data[:, j]
            gw[:, j] = np.einsum("bld,bld->d", g3, xp[:, sl])
        gx = gxp[:, k - 1 :]
        gx = gx[0] if squeeze else gx
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 1))

    return make_node(out[0] if squeeze else out, parents, bwd, "conv1d_causal")


# ---------------------------------------------------------------------------
# normalization and nonlinearities


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        gg = np.sum(g * xhat, axis=lead)
        gb = np.sum(g, axis=lead)
        gxh = g * gamma.data
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), bwd, "layer_norm")


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x):
    cdf = 0.5 * (1.0 + special.erf(x / _SQRT2))
    return x * cdf, cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _silu(x):
    s = special.expit(x)
    return x * s, s * (1.0 + x * (1.0 - s))


def _softplus(x):
    return np.logaddexp(0.0, x), special.expit(x)


def _exp(x):
    e = np.exp(x)
    return e, e


def _sigmoid(x):
    s = special.expit(x)
    return s, s * (1.0 - s)


ACTIVATIONS = {"gelu": _gelu, "silu": _silu, "softplus": _softplus, "exp": _exp, "sigmoid": _sigmoid}


def apply_activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    out, deriv = fn(x.data)
    return make_node(out, (x,), lambda g: (g * deriv,), kind)


def gelu(x: Tensor) -> Tensor:
    return apply_activation(x, "gelu")


def silu(x: Tensor) -> Tensor:
    return apply_activation(x, "silu")


def softplus(x: Tensor) -> Tensor:
    return apply_activation(x, "softplus")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return make_node(
        out,
        (x,),
        lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),),
        "softmax",
    )


# ---------------------------------------------------------------------------
# sequence kernels


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor) -> Tensor:
    """Input-dependent ZOH state-space scan; see :mod:`brainmt.kernels`.

    u, delta: (Bt, L, d); A: (d, N); B, C: (Bt, L, N). ``h_0 = 0``.
    """
    if u.shape != delta.shape or u.ndim != 3:
        raise DimensionError(f"selective_scan: u {u.shape} and delta {delta.shape} must match (Bt, L, d)")
    if A.shape[0] != u.shape[2] or B.shape != C.shape or B.shape[:2] != u.shape[:2] or B.shape[2] != A.shape[1]:
        raise DimensionError(
            f"selective_scan shape mismatch: u {u.shape}, A {A.shape}, B {B.shape}, C {C.shape}"
        )
    args = (u.data, delta.data, A.data, B.data, C.data)
    y = kernels.scan_forward(*args)
    return make_node(y, (u, delta, A, B, C), lambda g: kernels.scan_backward(*args, g), "selective_scan")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(dh)) v over the last two axes, memory-lean.

    Score rows are produced in blocks and never stored: the adjoint
    recomputes them from the saved per-row log-sum-exp.
    """
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"attention expects equal q/k/v shapes, got {q.shape}, {k.shape}, {v.shape}")
    lead = q.shape[:-2]
    L, dh = q.shape[-2:]
    qd, kd, vd = (t.data.reshape(-1, L, dh) for t in (q, k, v))
    G = qd.shape[0]
    scale = 1.0 / math.sqrt(dh)
    rows = max(1, min(L, _ATTN_CAP // max(G * L, 1)))
    out = np.empty_like(qd)
    lse = np.empty((G, L))
    kt = np.swapaxes(kd, 1, 2)
    for lo in range(0, L, rows):
        hi = min(L, lo + rows)
        s = (qd[:, lo:hi] @ kt) * scale
        m = s.max(axis=-1, keepdims=True)
        p = np.exp(s - m)
        den = p.sum(axis=-1, keepdims=True)
        out[:, lo:hi] = (p @ vd) / den
        lse[:, lo:hi] = (m + np.log(den))[..., 0]

    def bwd(g):
        g = g.reshape(G, L, dh)
        dsum = np.sum(g * out, axis=-1)
        dq = np.empty_like(qd)
        dk = np.zeros_like(kd)
        dv = np.zeros_like(vd)
        for lo in range(0, L, rows):
            hi = min(L, lo + rows)
            p = np.exp((qd[:, lo:hi] @ kt) * scale - lse[:, lo:hi, None])
            gc = g[:, lo:hi]
            dv += np.swapaxes(p, 1, 2) @ gc
            ds = p * (gc @ np.swapaxes(vd, 1, 2) - dsum[:, lo:hi, None])
            dq[:, lo:hi] = (ds @ kd) * scale
            dk += (np.swapaxes(ds, 1, 2) @ qd[:, lo:hi]) * scale
        shape = lead + (L, dh)
        return dq.reshape(shape), dk.reshape(shape), dv.reshape(shape)

    return make_node(out.reshape(q.shape), (q, k, v), bwd, "attention")


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred.data - target
    n = diff.size
    return make_node(np.asarray(np.mean(diff * diff)), (pred,), lambda g: (g * 2.0 * diff / n,), "mse")


def bce_with_logits(logit: Tensor, label) -> Tensor:
    """Mean binary cross-entropy on raw logits, log-sum-exp stable."""
    y = np.asarray(label, dtype=np.float64).reshape(logit.shape)
    z = logit.data
    n = z.size
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return make_node(
        np.asarray(loss.mean()),
        (logit,),
        lambda g: (g * (special.expit(z) - y) / n,),
        "bce",
    )
