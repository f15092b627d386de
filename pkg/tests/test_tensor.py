import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from atac import tensor as T
from atac.tensor import ConvSpec, ShapeError


def brute_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.einsum("nchw,kchw->nk", patch, w)
    return out


@pytest.mark.parametrize(
    "a, b, expected",
    [([1, 2], [0, 0], [0, 0]), ([2, 3], [1, 1], [2, 3]), ([0.5, -2], [4, 3], [2, -6])],
)
def test_elementwise_mul_examples(a, b, expected):
    npt.assert_array_equal(T.elementwise_mul(a, b), expected)


def test_elementwise_mul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.elementwise_mul(np.ones(2), np.ones(3))


def test_as_tensor_rejects_rank5_and_empty_dims():
    with pytest.raises(ShapeError):
        T.as_tensor(np.ones((1, 1, 1, 1, 1)))
    with pytest.raises(ShapeError):
        T.as_tensor(np.ones((2, 0)))


def test_conv_all_ones_sum():
    out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), ConvSpec(1, 1, 3, 3))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9.0


def test_conv_zero_kernel(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    out = T.conv2d(x, np.zeros((4, 3, 3, 3)), ConvSpec(3, 4, 3, 3, padding=1))
    assert out.shape == (2, 4, 5, 5)
    assert not out.any()


def test_pointwise_scaling():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    out = T.conv2d(x, np.full((1, 1, 1, 1), 2.0), ConvSpec.pointwise(1, 1))
    npt.assert_array_equal(out[0, 0], [[2, 4], [6, 8]])


def test_pointwise_ones_is_identity(rng):
    x = rng.normal(size=(2, 1, 4, 4))
    npt.assert_array_equal(T.conv2d(x, np.ones((1, 1, 1, 1)), ConvSpec.pointwise(1, 1)), x)


@pytest.mark.parametrize("stride, pad, k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 3, 7), (2, 0, 1)])
def test_conv_matches_direct_loops(rng, stride, pad, k):
    x = rng.normal(size=(2, 3, 9, 9))
    w = rng.normal(size=(4, 3, k, k))
    spec = ConvSpec(3, 4, k, k, stride, pad)
    npt.assert_allclose(T.conv2d(x, w, spec), brute_conv(x, w, stride, pad), atol=1e-12)


def test_conv_bias_and_output_size():
    spec = ConvSpec(1, 2, 3, 3, stride=2, padding=1, has_bias=True)
    assert spec.output_hw(32, 32) == (16, 16)
    assert ConvSpec(3, 64, 7, 7, stride=2, padding=3).output_hw(224, 224) == (112, 112)
    out = T.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((2, 1, 3, 3)), spec, bias=np.array([1.0, -1.0]))
    npt.assert_array_equal(out[0, 0], 1.0)
    npt.assert_array_equal(out[0, 1], -1.0)


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        T.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)), ConvSpec(1, 1, 3, 3))


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 1, 1, 1)), ConvSpec.pointwise(1, 1))


def test_col2im_is_adjoint_of_im2col(rng):
    spec = ConvSpec(2, 1, 3, 3, stride=2, padding=1)
    x = rng.normal(size=(2, 2, 7, 7))
    cols = T.im2col(x, spec)
    y = rng.normal(size=cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * T.col2im(y, spec, x.shape))
    assert abs(lhs - rhs) < 1e-10


def test_gap_examples():
    assert T.global_avg_pool(np.full((1, 1, 3, 3), 7.0))[0, 0, 0, 0] == 7.0
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert T.global_avg_pool(x)[0, 0, 0, 0] == 2.5
    assert not T.global_avg_pool(np.zeros((2, 3, 4, 4))).any()
    assert T.global_avg_pool(np.zeros((2, 3, 4, 4))).shape == (2, 3, 1, 1)


def test_broadcast_mul_examples(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    npt.assert_array_equal(T.broadcast_mul(x, np.ones((2, 3, 1, 1))), x)
    npt.assert_array_equal(T.broadcast_mul(x, np.full((2, 3, 1, 1), 0.5)), x / 2)
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    npt.assert_array_equal(T.broadcast_mul(x, np.full((1, 1, 1, 1), 2.0))[0, 0], [[2, 4], [6, 8]])


def test_gap_then_broadcast_on_constant_map(rng):
    c = rng.normal(size=(2, 3, 1, 1))
    x = np.broadcast_to(c, (2, 3, 4, 4)).copy()
    npt.assert_allclose(T.broadcast_mul(x, T.global_avg_pool(x)), T.elementwise_mul(x, x), rtol=1e-15)


def test_linear_examples(rng):
    x = rng.normal(size=(3, 4))
    npt.assert_array_equal(T.linear(x, np.eye(4), np.zeros(4)), x)
    npt.assert_array_equal(T.linear(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]), np.array([1.0])), [[12.0]])
    npt.assert_array_equal(T.linear(np.zeros((2, 3)), np.ones((5, 3)), np.arange(5.0)), np.tile(np.arange(5.0), (2, 1)))


def test_sigmoid_stable_at_extremes():
    s = T.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    npt.assert_array_equal(s, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(s))


@pytest.mark.parametrize(
    "logits, label, expected",
    [([[0.0, 0.0]], [0], math.log(2)), ([[1000.0, -1000.0]], [0], 0.0), ([[3.0] * 7], [4], math.log(7))],
)
def test_cross_entropy_examples(logits, label, expected):
    assert T.softmax_cross_entropy(np.array(logits), np.array(label)) == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError, match="position 1"):
        T.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


@given(
    logits=hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)),
    shift=hnp.arrays(np.float64, (3, 1), elements=st.floats(-1e3, 1e3)),
    labels=hnp.arrays(np.int64, 3, elements=st.integers(0, 4)),
)
def test_cross_entropy_shift_invariance(logits, shift, labels):
    a = T.softmax_cross_entropy(logits, labels)
    b = T.softmax_cross_entropy(logits + shift, labels)
    assert abs(a - b) < 1e-9


@given(x=hnp.arrays(np.float64, (2, 3, 4, 4), elements=st.floats(-10, 10)))
def test_kernels_are_pure(x):
    w = np.linspace(-1, 1, 4 * 3 * 9).reshape(4, 3, 3, 3)
    spec = ConvSpec(3, 4, 3, 3, padding=1)
    npt.assert_array_equal(T.conv2d(x, w, spec), T.conv2d(x.copy(), w.copy(), spec))
    npt.assert_array_equal(T.sigmoid(x), T.sigmoid(x))
