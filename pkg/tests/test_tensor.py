import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import attnscat.tensor as T
from attnscat.tensor import GraphError, Tensor, backward, grad_check

from oracles import conv2d_loops, dft2_matrix


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def weighted(out, seed=1):
    """sum(out * R) for a fixed random R, so gradients are O(1) and generic."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    if out.is_complex:
        r = r + 1j * np.random.default_rng(seed + 1).standard_normal(out.shape)
        return T.tsum(T.real(out * r))
    return T.tsum(out * r)


def check_all(build, *leaves):
    """grad_check every leaf feeding ``build()``."""
    return max(grad_check(lambda _: weighted(build()), lf) for lf in leaves)


# -- complex modulus ----------------------------------------------------------
def complex_from(re, im):
    return re * Tensor(np.array(1 + 0j)) + im * Tensor(np.array(1j))


def test_modulus_pythagorean():
    z = Tensor(np.array([3 + 4j]))
    assert T.complex_modulus(z).data[0] == 5.0


def test_modulus_origin_value_and_gradient():
    re, im = leaf([0.0]), leaf([0.0])
    out = T.tsum(T.complex_modulus(complex_from(re, im)))
    assert out.item() == 0.0
    backward(out)
    assert re.grad[0] == 0.0 and im.grad[0] == 0.0


def test_modulus_gradient_wrt_real_part():
    re, im = leaf([3.0]), leaf([4.0])
    backward(T.tsum(T.complex_modulus(complex_from(re, im))))
    assert re.grad[0] == pytest.approx(0.6, abs=1e-15)
    assert im.grad[0] == pytest.approx(0.8, abs=1e-15)


def test_modulus_rejects_real():
    with pytest.raises(TypeError):
        T.complex_modulus(Tensor(np.ones(3)))


# -- fft -----------------------------------------------------------------------
def test_fft_constant_signal_has_only_dc():
    spectrum = T.fft2(Tensor(np.ones((4, 4)))).data
    assert spectrum[0, 0] == pytest.approx(16)
    rest = spectrum.copy()
    rest[0, 0] = 0
    assert np.max(np.abs(rest)) < 1e-12


def test_fft_impulse_is_flat():
    x = np.zeros((8, 8))
    x[0, 0] = 1
    np.testing.assert_allclose(T.fft2(Tensor(x)).data, np.ones((8, 8)), atol=1e-12)


def test_fft_round_trip_float32():
    x = np.random.default_rng(0).standard_normal((8, 8)).astype(np.float32)
    back = T.real(T.ifft2(T.fft2(Tensor(x)))).data
    assert back.dtype == np.float32
    assert np.linalg.norm(back - x) / np.linalg.norm(x) <= 1e-5


def test_parseval_float32():
    x = np.random.default_rng(1).standard_normal((2, 16, 32)).astype(np.float32)
    spectrum = T.fft2(Tensor(x)).data
    lhs = np.sum(x.astype(np.float64) ** 2)
    rhs = np.sum(np.abs(spectrum.astype(np.complex128)) ** 2) / (16 * 32)
    assert abs(lhs - rhs) / lhs <= 1e-5


def test_fft_matches_dft_matrix():
    x = np.random.default_rng(2).standard_normal((3, 8, 16))
    np.testing.assert_allclose(T.fft2(Tensor(x)).data, dft2_matrix(x), atol=1e-10)


@pytest.mark.parametrize("shape", [(6, 8), (8, 12), (3, 3)])
def test_fft_rejects_non_power_of_two(shape):
    with pytest.raises(ValueError):
        T.fft2(Tensor(np.zeros(shape)))


def test_radix2_backend_matches_default():
    x = np.random.default_rng(3).standard_normal((2, 16, 8))
    ref = T.fft2(Tensor(x)).data
    inv_ref = T.ifft2(Tensor(ref)).data
    T.set_fft_backend("radix2")
    try:
        np.testing.assert_allclose(T.fft2(Tensor(x)).data, ref, atol=1e-10)
        np.testing.assert_allclose(T.ifft2(Tensor(ref)).data, inv_ref, atol=1e-10)
    finally:
        T.set_fft_backend("pocketfft")
    assert T.get_fft_backend() == "pocketfft"


def test_unknown_backend():
    with pytest.raises(ValueError):
        T.set_fft_backend("fftw")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 2 ** 31 - 1))
def test_fft_round_trip_property(ph, pw, seed):
    x = np.random.default_rng(seed).standard_normal((2 ** ph, 2 ** pw))
    back = T.ifft2(T.fft2(Tensor(x))).data
    np.testing.assert_allclose(back.real, x, atol=1e-12)
    assert np.max(np.abs(back.imag)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 4), st.integers(0, 2 ** 31 - 1))
def test_radix2_matches_dft_property(p, seed):
    x = np.random.default_rng(seed).standard_normal((3, 2 ** p))
    expected = x @ np.exp(-2j * np.pi * np.outer(np.arange(2 ** p), np.arange(2 ** p)) / 2 ** p)
    np.testing.assert_allclose(T.fft_radix2(x), expected, atol=1e-10)


# -- conv2d ----------------------------------------------------------------------
def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 7))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_dilation3_receptive_field():
    rng = np.random.default_rng(1)
    w = Tensor(rng.standard_normal((1, 1, 3, 3)))
    x = rng.standard_normal((1, 1, 15, 15))
    base = T.conv2d(Tensor(x), w, dilation=3).data[0, 0, 7, 7]
    near, far = x.copy(), x.copy()
    near[0, 0, 7 + 3, 7 + 3] += 1.0
    far[0, 0, 7 + 4, 7] += 1.0
    assert T.conv2d(Tensor(near), w, dilation=3).data[0, 0, 7, 7] != base
    assert T.conv2d(Tensor(far), w, dilation=3).data[0, 0, 7, 7] == base


def test_conv_zero_kernel_gives_bias():
    x = Tensor(np.random.default_rng(2).standard_normal((1, 2, 6, 6)))
    out = T.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.array([1.5, -2.0, 0.25])), dilation=2)
    for o, b in enumerate([1.5, -2.0, 0.25]):
        assert np.all(out.data[0, o] == b)


@pytest.mark.parametrize("dilation", [1, 2, 3])
def test_conv_matches_loop_oracle(dilation):
    rng = np.random.default_rng(dilation)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), dilation=dilation).data
    np.testing.assert_allclose(out, conv2d_loops(x, w, b, dilation), atol=1e-12)


def test_conv_kernel_larger_than_padded_input():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), padding=0)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 1, 1))))


# -- backward --------------------------------------------------------------------
def test_backward_sum_gives_ones():
    x = leaf(np.random.default_rng(0).standard_normal((2, 3, 4)))
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_sigmoid_at_zero():
    x = leaf([0.0])
    backward(T.tsum(T.sigmoid(x)))
    assert x.grad[0] == 0.25


def test_backward_requires_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(GraphError):
        backward(x * 2.0)


def test_backward_twice_is_an_error():
    x = leaf(np.ones(3))
    out = T.tsum(T.exp(x))
    backward(out)
    with pytest.raises(GraphError):
        backward(out)


def test_backward_untouched_leaf_gets_zero():
    x, unused = leaf(np.ones(3)), leaf(np.ones((2, 2)))
    backward(T.tsum(x * x), inputs=[x, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))


def test_backward_shared_subexpression_accumulates():
    x = leaf([2.0])
    y = x * x
    backward(T.tsum(y + y * 3.0))  # d/dx 4x^2 = 8x
    assert x.grad[0] == pytest.approx(16.0)


def test_grad_is_real_and_same_shape():
    x = leaf(np.random.default_rng(0).standard_normal((4, 8)))
    backward(T.tsum(T.complex_modulus(T.fft2(x))))
    assert x.grad.shape == x.shape and x.grad.dtype == np.float64


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_raises():
    with pytest.raises(FloatingPointError):
        T.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))
    with pytest.raises(FloatingPointError):
        T.exp(Tensor(np.array([1e4])))


def test_determinism():
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))

    def run():
        xt = Tensor(x, requires_grad=True)
        out = T.tsum(T.complex_modulus(T.fft2(T.conv2d(xt, Tensor(w), dilation=2))))
        backward(out)
        return out.data.copy(), xt.grad.copy()

    a, b = run(), run()
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


# -- grad_check oracle -------------------------------------------------------------
def test_grad_check_sum_of_squares():
    assert grad_check(lambda t: T.tsum(t * t), np.array([1.0, 2.0])) < 1e-8
    x = leaf([1.0, 2.0])
    backward(T.tsum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_grad_check_modulus_norm():
    x = np.random.default_rng(0).standard_normal((8, 8))
    assert grad_check(lambda t: T.tsum(T.complex_modulus(T.fft2(t))), x) < 1e-6


def test_grad_check_detects_wrong_gradient():
    def bad(t):
        return T.Tensor.from_op(np.asarray((t.data ** 2).sum()), (t,), lambda g: (g * t.data,), "bad")

    assert grad_check(bad, np.array([1.0, 2.0, 3.0])) > 0.1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_non_finite():
    with pytest.raises(FloatingPointError):
        grad_check(lambda t: T.tsum(T.sqrt(t)), np.array([1e-7, 1.0]), eps=1e-5)


# -- per-primitive gradients (real64, <= 1e-5) -----------------------------------------
RNG = np.random.default_rng(42)


def away_from_zero(shape, margin=0.1):
    a = RNG.standard_normal(shape)
    return np.where(np.abs(a) < margin, np.sign(a) * margin + a, a)


def _binary(op, a_shape=(3, 4), b_shape=(3, 4), positive_b=False):
    a, b = leaf(RNG.standard_normal(a_shape)), leaf(RNG.standard_normal(b_shape))
    if positive_b:
        b.data[:] = np.abs(b.data) + 0.5
    return (lambda: op(a, b)), (a, b)


def _unary(op, x):
    t = leaf(x)
    return (lambda: op(t)), (t,)


def _conv_case(dilation):
    x, w, b = leaf(RNG.standard_normal((2, 3, 6, 6))), leaf(RNG.standard_normal((2, 3, 3, 3))), leaf(RNG.standard_normal(2))
    return (lambda: T.conv2d(x, w, b, dilation=dilation)), (x, w, b)


PRIMITIVES = {
    "add": lambda: _binary(T.add),
    "add_broadcast": lambda: _binary(T.add, (3, 4), (1, 4)),
    "sub": lambda: _binary(T.sub, (2, 3, 4), (4,)),
    "mul": lambda: _binary(T.mul),
    "mul_broadcast": lambda: _binary(T.mul, (2, 3, 4), (3, 1)),
    "div": lambda: _binary(T.div, positive_b=True),
    "matmul": lambda: _binary(T.matmul, (2, 3, 4), (4, 5)),
    "power": lambda: _unary(lambda t: T.power(t, 3.0), RNG.standard_normal((5,))),
    "sqrt": lambda: _unary(T.sqrt, RNG.uniform(0.5, 2.0, (5,))),
    "exp": lambda: _unary(T.exp, RNG.standard_normal((5,))),
    "relu": lambda: _unary(T.relu, away_from_zero((4, 4))),
    "sigmoid": lambda: _unary(T.sigmoid, RNG.standard_normal((4, 4)) * 3),
    "clamp": lambda: _unary(lambda t: T.clamp(t, -0.5, 0.5), np.array([-1.0, -0.3, 0.1, 0.4, 0.9])),
    "sum_axis": lambda: _unary(lambda t: T.tsum(t, axis=1), RNG.standard_normal((3, 4, 2))),
    "sum_keepdims": lambda: _unary(lambda t: T.tsum(t, axis=(0, 2), keepdims=True), RNG.standard_normal((3, 4, 2))),
    "mean": lambda: _unary(lambda t: T.mean(t, axis=-1), RNG.standard_normal((3, 4))),
    "global_avg_pool": lambda: _unary(T.global_avg_pool, RNG.standard_normal((2, 3, 4, 4))),
    "reshape": lambda: _unary(lambda t: T.reshape(t, (6, 4)), RNG.standard_normal((2, 3, 4))),
    "flatten": lambda: _unary(T.flatten, RNG.standard_normal((2, 3, 4))),
    "transpose": lambda: _unary(lambda t: T.transpose(t, (2, 0, 1)), RNG.standard_normal((2, 3, 4))),
    "getitem_basic": lambda: _unary(lambda t: t[:, 1:3, None], RNG.standard_normal((3, 4))),
    "getitem_advanced": lambda: _unary(lambda t: t[np.array([0, 2, 0])], RNG.standard_normal((3, 4))),
    "concat": lambda: _binary(lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 5)),
    "stack": lambda: _binary(lambda a, b: T.stack([a, b], axis=1)),
    "decimate": lambda: _unary(lambda t: T.decimate(t, 2), RNG.standard_normal((2, 8, 8))),
    "fft2": lambda: _unary(T.fft2, RNG.standard_normal((2, 4, 8))),
    "ifft2": lambda: _unary(T.ifft2, RNG.standard_normal((2, 8, 4))),
    "fft2_of_complex": lambda: _unary(lambda t: T.ifft2(T.fft2(t) * (1 + 2j)), RNG.standard_normal((4, 4))),
    "real": lambda: _unary(lambda t: T.real(t * (0.5 - 1j)), RNG.standard_normal((3,))),
    "complex_modulus": lambda: _unary(lambda t: T.complex_modulus(T.fft2(t)), RNG.standard_normal((4, 4))),
    "conv2d": lambda: _conv_case(1),
    "conv2d_dilated": lambda: _conv_case(3),
    "max_pool2d": lambda: _unary(T.max_pool2d, RNG.standard_normal((2, 2, 4, 6))),
    "upsample_bilinear": lambda: _unary(lambda t: T.upsample_bilinear(t, 7, 9), RNG.standard_normal((2, 3, 4))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient(name):
    build, leaves = PRIMITIVES[name]()
    assert check_all(build, *leaves) <= 1e-5


def test_upsample_backward_is_transpose():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((3, 5)), rng.standard_normal((8, 11))
    rh, rw = T.bilinear_matrix(3, 8), T.bilinear_matrix(5, 11)
    up = T.upsample_bilinear(Tensor(x), 8, 11).data
    np.testing.assert_allclose(up, rh @ x @ rw.T)
    xt = leaf(x)
    backward(T.tsum(T.upsample_bilinear(xt, 8, 11) * y))
    np.testing.assert_allclose(xt.grad, rh.T @ y @ rw, atol=1e-12)
    assert np.sum(up * y) == pytest.approx(np.sum(x * xt.grad))


def test_max_pool_values():
    x = np.arange(16.0).reshape(1, 4, 4)
    np.testing.assert_array_equal(T.max_pool2d(Tensor(x)).data, [[[5, 7], [13, 15]]])
