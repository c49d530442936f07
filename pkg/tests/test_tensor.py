import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from brainmt.errors import ConfigurationError, DimensionError, NumericError
from brainmt.tensor import (
    Tensor,
    apply_activation,
    backward,
    concat,
    conv1d_causal,
    conv3d,
    flip,
    layer_norm,
    linear,
    matmul,
    no_grad,
    scaled_dot_attention,
    selective_scan,
    softmax,
    take,
    zero_grads,
)

from gradcheck import check_op, numeric_grad, rel_err

RNG = np.random.default_rng(1234)


def naive_conv3d(x, w, b, stride, pad):
    """Six nested loops (plus channel loops) over a channel-last input."""
    n, H, W, D, cin = x.shape
    cout, _, k = w.shape[:3]
    xp = np.zeros((n, H + 2 * pad, W + 2 * pad, D + 2 * pad, cin))
    xp[:, pad : pad + H, pad : pad + W, pad : pad + D] = x
    ho, wo, do = ((s + 2 * pad - k) // stride + 1 for s in (H, W, D))
    out = np.zeros((n, ho, wo, do, cout))
    for bi in range(n):
        for i in range(ho):
            for j in range(wo):
                for m in range(do):
                    for co in range(cout):
                        acc = b[co]
                        for ci in range(cin):
                            for a in range(k):
                                for c in range(k):
                                    for e in range(k):
                                        acc += w[co, ci, a, c, e] * xp[bi, i * stride + a, j * stride + c, m * stride + e, ci]
                        out[bi, i, j, m, co] = acc
    return out


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(m)).data, m)


def test_matmul_projector():
    a, b, c, d = RNG.normal(size=4)
    out = matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[a, b], [c, d]])).data
    np.testing.assert_array_equal(out, [[a, b], [0.0, 0.0]])


def test_matmul_sum_gradient_is_ones_times_bT():
    a = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    b = RNG.normal(size=(4, 2))
    backward(matmul(a, Tensor(b)).sum())
    expected = np.ones((3, 2)) @ b.T
    fd = numeric_grad(lambda: float((a.data @ b).sum()), a.data)
    assert rel_err(a.grad, fd) < 1e-6
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
        matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))


# ---------------------------------------------------------------------------
# conv3d


def test_conv3d_zero_weights_give_bias():
    x = Tensor(RNG.normal(size=(1, 4, 4, 4, 2)))
    out = conv3d(x, Tensor(np.zeros((3, 2, 3, 3, 3))), Tensor([0.5, -1.0, 2.0]), stride=1, pad=1)
    np.testing.assert_array_equal(out.data, np.broadcast_to([0.5, -1.0, 2.0], (1, 4, 4, 4, 3)))


def test_conv3d_pointwise_scaling():
    v = RNG.normal(size=(2, 3, 4, 5, 1))
    out = conv3d(Tensor(v), Tensor(np.full((1, 1, 1, 1, 1), 2.0)), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, 2 * v)


def test_conv3d_matches_naive_loops():
    x = RNG.normal(size=(1, 5, 5, 5, 2))
    w = RNG.normal(size=(3, 2, 3, 3, 3))
    b = RNG.normal(size=3)
    out = conv3d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=0).data
    ref = naive_conv3d(x, w, b, 2, 0)
    assert out.shape == ref.shape == (1, 2, 2, 2, 3)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (2, 0, 2)])
def test_conv3d_matches_naive_with_padding(stride, pad, k):
    x = RNG.normal(size=(2, 4, 5, 3, 2))
    w = RNG.normal(size=(2, 2, k, k, k))
    b = RNG.normal(size=2)
    out = conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
    np.testing.assert_allclose(out, naive_conv3d(x, w, b, stride, pad), atol=1e-12)


def test_conv3d_too_small_input():
    with pytest.raises(DimensionError):
        conv3d(Tensor(np.zeros((1, 2, 2, 2, 1))), Tensor(np.zeros((1, 1, 3, 3, 3))))


def test_conv3d_unbatched_input():
    x = RNG.normal(size=(4, 4, 4, 2))
    w = RNG.normal(size=(3, 2, 3, 3, 3))
    out = conv3d(Tensor(x), Tensor(w), None, 1, 1)
    np.testing.assert_allclose(out.data, naive_conv3d(x[None], w, np.zeros(3), 1, 1)[0], atol=1e-12)


# ---------------------------------------------------------------------------
# conv1d_causal


def test_conv1d_width_one_identity():
    x = RNG.normal(size=(7, 3))
    out = conv1d_causal(Tensor(x), Tensor(np.ones((3, 1))), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_conv1d_impulse_echoes_kernel():
    w = np.array([[0.3, -1.2, 2.0, 0.7]])
    x = np.zeros((6, 1))
    x[0] = 1.0
    out = conv1d_causal(Tensor(x), Tensor(w), Tensor([0.0])).data[:, 0]
    np.testing.assert_array_equal(out, [0.3, -1.2, 2.0, 0.7, 0.0, 0.0])


def test_conv1d_kernel_longer_than_sequence():
    out = conv1d_causal(Tensor(np.ones((2, 1))), Tensor(np.ones((1, 5))))
    np.testing.assert_array_equal(out.data[:, 0], [1.0, 2.0])


def test_conv1d_rejects_empty_kernel():
    with pytest.raises(ConfigurationError):
        conv1d_causal(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 0))))


@settings(max_examples=30, deadline=None)
@given(t=st.integers(0, 11), seed=st.integers(0, 2**16))
def test_conv1d_causality(t, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 12, 3))
    w = rng.normal(size=(3, 4))
    base = conv1d_causal(Tensor(x), Tensor(w)).data
    x2 = x.copy()
    x2[:, t + 1 :] = rng.normal(size=x2[:, t + 1 :].shape) * 100
    pert = conv1d_causal(Tensor(x2), Tensor(w)).data
    np.testing.assert_array_equal(base[:, : t + 1], pert[:, : t + 1])


# ---------------------------------------------------------------------------
# layer norm, activations, softmax


def test_layer_norm_constant_token_is_zero():
    out = layer_norm(Tensor(np.full((2, 5), 3.7)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_two_values():
    out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5).data[0]
    # mean 2, variance 1: (x - 2) / sqrt(1 + eps)
    np.testing.assert_allclose(out, np.array([-1.0, 1.0]) / math.sqrt(1 + 1e-5), rtol=1e-15)
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-5)


def test_layer_norm_zero_gamma_gives_beta():
    out = layer_norm(Tensor(RNG.normal(size=(4, 6))), Tensor(np.zeros(6)), Tensor(np.full(6, 0.25)))
    np.testing.assert_array_equal(out.data, 0.25)


def test_layer_norm_moments():
    out = layer_norm(Tensor(RNG.normal(3, 5, size=(10, 32))), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-5)


def test_activation_fixed_points():
    z = Tensor([0.0])
    assert apply_activation(z, "gelu").data[0] == 0.0
    assert apply_activation(z, "silu").data[0] == 0.0
    assert apply_activation(z, "softplus").data[0] == pytest.approx(math.log(2), abs=1e-15)
    assert apply_activation(z, "sigmoid").data[0] == 0.5
    assert apply_activation(z, "exp").data[0] == 1.0


def test_gelu_is_exact_erf_form():
    x = np.linspace(-4, 4, 17)
    ref = np.array([v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x])
    np.testing.assert_allclose(apply_activation(Tensor(x), "gelu").data, ref, rtol=1e-14, atol=1e-16)


def test_unknown_activation():
    with pytest.raises(ConfigurationError):
        apply_activation(Tensor([1.0]), "relu6")


def test_softmax_cases():
    np.testing.assert_array_equal(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_array_equal(softmax(Tensor([1000.0, 0.0])).data, [1.0, 0.0])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-1e6, 1e6)))
def test_softmax_sums_to_one(x):
    out = softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_jvp_matches_finite_differences():
    x = RNG.normal(size=6)
    v = RNG.normal(size=6)
    t = Tensor(x, requires_grad=True)
    out = softmax(t)
    jac = np.diag(out.data) - np.outer(out.data, out.data)
    h = 1e-6
    fd = (softmax(Tensor(x + h * v)).data - softmax(Tensor(x - h * v)).data) / (2 * h)
    assert rel_err(jac @ v, fd) < 1e-8


# ---------------------------------------------------------------------------
# backward contract


def test_backward_sum_gives_ones():
    x = Tensor(RNG.normal(size=(3, 2)), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_square():
    x = Tensor(RNG.normal(size=5), requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_accumulates_until_zeroed():
    x = Tensor(RNG.normal(size=4), requires_grad=True)
    backward(x.sum())
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, 2.0)
    zero_grads([x])
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, 1.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        backward(x * 2)


def test_non_finite_forward_is_an_error():
    with pytest.raises(NumericError):
        Tensor([1.0]) / Tensor([0.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=(3, 5)))
        loss = (softmax(linear(x, w)) * Tensor(rng.normal(size=(3, 4)))).sum()
        backward(loss)
        return w.grad.copy()

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------------------
# finite-difference sweep: every op, three shapes each

TOL = 1e-4
SHAPES = [(3,), (2, 5), (2, 3, 4)]


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("kind", ["gelu", "silu", "softplus", "exp", "sigmoid"])
def test_activation_gradients(kind, shape):
    assert max(check_op(lambda x: apply_activation(x, kind), RNG.normal(size=shape))) < TOL


@pytest.mark.parametrize("shape", SHAPES)
def test_elementwise_gradients(shape):
    a, b = RNG.normal(size=shape), RNG.uniform(0.5, 2.0, size=shape)
    assert max(check_op(lambda x, y: x * y + x / y - y, a, b)) < TOL
    assert max(check_op(lambda x: x**3, a)) < TOL


@pytest.mark.parametrize("shape", [(2, 3), (4, 5), (2, 3, 6)])
def test_softmax_layer_norm_gradients(shape):
    d = shape[-1]
    assert max(check_op(lambda x: softmax(x, axis=-1), RNG.normal(size=shape))) < TOL
    errs = check_op(layer_norm, RNG.normal(size=shape), RNG.normal(size=d), RNG.normal(size=d))
    assert max(errs) < TOL


@pytest.mark.parametrize("sa,sb", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 2, 3), (2, 3, 2))])
def test_matmul_gradients(sa, sb):
    assert max(check_op(matmul, RNG.normal(size=sa), RNG.normal(size=sb))) < TOL


@pytest.mark.parametrize("shape", [(3, 4), (2, 5, 4), (1, 2, 3, 4)])
def test_linear_gradients(shape):
    assert max(check_op(linear, RNG.normal(size=shape), RNG.normal(size=(4, 3)), RNG.normal(size=3))) < TOL


@pytest.mark.parametrize(
    "xs,k,stride,pad", [((1, 4, 4, 4, 2), 3, 1, 1), ((2, 5, 5, 5, 1), 3, 2, 1), ((1, 4, 6, 4, 3), 2, 2, 0)]
)
def test_conv3d_gradients(xs, k, stride, pad):
    errs = check_op(
        lambda x, w, b: conv3d(x, w, b, stride, pad),
        RNG.normal(size=xs),
        RNG.normal(size=(2, xs[-1], k, k, k)),
        RNG.normal(size=2),
    )
    assert max(errs) < TOL


@pytest.mark.parametrize("xs,k", [((6, 3), 4), ((2, 9, 2), 3), ((1, 3, 4), 5)])
def test_conv1d_gradients(xs, k):
    d = xs[-1]
    errs = check_op(conv1d_causal, RNG.normal(size=xs), RNG.normal(size=(d, k)), RNG.normal(size=d))
    assert max(errs) < TOL


@pytest.mark.parametrize("shape", [(5, 4), (2, 3, 7, 2), (1, 1, 1, 3)])
def test_attention_gradients(shape):
    q, k, v = (RNG.normal(size=shape) for _ in range(3))
    assert max(check_op(scaled_dot_attention, q, k, v)) < TOL


@pytest.mark.parametrize("L,d,N", [(1, 2, 3), (5, 3, 4), (9, 2, 16)])
def test_selective_scan_gradients(L, d, N):
    u = RNG.normal(size=(2, L, d))
    delta = RNG.uniform(0.05, 1.0, size=(2, L, d))
    A = -RNG.uniform(0.5, 3.0, size=(d, N))
    B = RNG.normal(size=(2, L, N))
    C = RNG.normal(size=(2, L, N))
    assert max(check_op(selective_scan, u, delta, A, B, C)) < TOL


@pytest.mark.parametrize("shape", SHAPES)
def test_shape_op_gradients(shape):
    x = RNG.normal(size=shape)
    n = shape[-1]
    perm = RNG.permutation(n)
    assert max(check_op(lambda t: take(t, perm, axis=-1) * t, x)) < TOL
    assert max(check_op(lambda t: flip(t, -1) * t, x)) < TOL
    assert max(check_op(lambda t: concat([t, t * t], axis=-1), x)) < TOL
    assert max(check_op(lambda t: t.reshape(-1)[1:] * 2.0, x)) < TOL
    assert max(check_op(lambda t: t.sum(axis=-1, keepdims=True) * t.mean(), x)) < TOL
    assert max(check_op(lambda t: t.transpose() * 1.5, x)) < TOL


def test_attention_matches_explicit_softmax():
    q, k, v = (RNG.normal(size=(2, 6, 3)) for _ in range(3))
    s = q @ np.swapaxes(k, 1, 2) / math.sqrt(3)
    p = np.exp(s - s.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    np.testing.assert_allclose(scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).data, p @ v, atol=1e-14)
