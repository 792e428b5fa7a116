"""Unit tests for the autodiff core: op values, shapes, errors, gradients."""

import numpy as np
import pytest

from driftseg import tensor as T
from driftseg.tensor import NumericsError, ShapeError, Tensor


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# ---------------------------------------------------------------------------
# construction


def test_tensor_requires_rank4():
    with pytest.raises(ShapeError):
        T.tensor(np.zeros((3, 3)))


def test_tensor_rejects_nonfinite():
    with pytest.raises(NumericsError):
        T.tensor(np.full((1, 1, 1, 1), np.nan))


def test_untouched_leaf_grad_is_zeros():
    x = T.tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    assert np.array_equal(x.grad, np.zeros((1, 2, 2, 2)))


def test_item_requires_scalar():
    with pytest.raises(ShapeError):
        T.tensor(np.ones((1, 1, 2, 1))).item()


# ---------------------------------------------------------------------------
# conv2d


def test_conv_identity_1x1():
    x = T.tensor(rand((2, 3, 5, 5)))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    y = T.conv2d(x, T.tensor(w))
    assert np.allclose(y.data, x.data)


def test_conv_all_ones_sum():
    x = T.tensor(np.ones((1, 1, 3, 3)))
    w = T.tensor(np.ones((1, 1, 3, 3)))
    y = T.conv2d(x, w)
    assert y.shape == (1, 1, 1, 1)
    assert y.item() == 9.0


def test_conv_strided_shape():
    x = T.tensor(rand((2, 3, 8, 8)))
    w = T.tensor(rand((16, 3, 3, 3), seed=1) * 0.1)
    y = T.conv2d(x, w, stride=2, pad=1)
    assert y.shape == (2, 16, 4, 4)


def test_conv_bias_shape_checked():
    x = T.tensor(rand((1, 2, 4, 4)))
    w = T.tensor(rand((3, 2, 1, 1)))
    with pytest.raises(ShapeError):
        T.conv2d(x, w, T.tensor(np.zeros((1, 2, 1, 1))))


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(T.tensor(rand((1, 2, 4, 4))), T.tensor(rand((3, 4, 1, 1))))


def test_conv_linearity():
    x = rand((1, 2, 6, 6), seed=3)
    y = rand((1, 2, 6, 6), seed=4)
    w = T.tensor(rand((4, 2, 3, 3), seed=5))
    a, b = 1.7, -0.3
    lhs = T.conv2d(T.tensor(a * x + b * y), w, pad=1).data
    rhs = a * T.conv2d(T.tensor(x), w, pad=1).data \
        + b * T.conv2d(T.tensor(y), w, pad=1).data
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_conv_gradcheck_strided():
    w = T.tensor(rand((2, 2, 3, 3), seed=6) * 0.3)

    def f(t):
        return T.sum_all(T.pointwise(T.conv2d(t, w, stride=2, pad=1), "sigmoid"))

    err = T.grad_check(f, T.tensor(rand((1, 2, 6, 6), seed=7)))
    assert err <= 1e-5


def test_conv_weight_and_bias_gradients():
    x = T.tensor(rand((2, 2, 4, 4), seed=8))
    w0 = rand((3, 2, 3, 3), seed=9) * 0.3
    b0 = rand((1, 3, 1, 1), seed=10) * 0.1

    def fw(t4):
        w = T.reshape(t4, (3, 2, 3, 3))
        return T.sum_all(T.pointwise(T.conv2d(x, w, T.tensor(b0), pad=1), "sigmoid"))

    assert T.grad_check(fw, T.tensor(w0.reshape(1, 1, 54, 1))) <= 1e-5

    def fb(bt):
        return T.sum_all(T.pointwise(T.conv2d(x, T.tensor(w0), bt, pad=1), "sigmoid"))

    assert T.grad_check(fb, T.tensor(b0)) <= 1e-5


# ---------------------------------------------------------------------------
# upsample / pooling


def test_upsample_values_and_grad():
    x = T.tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
    y = T.upsample2x(x)
    assert y.shape == (1, 1, 4, 4)
    expect = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    assert np.array_equal(y.data[0, 0], expect)
    T.backward(T.sum_all(y))
    assert np.array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))


def test_pool_global_avg_max():
    x = T.tensor(np.array([-1.0, 1.0]).reshape(1, 1, 1, 2))
    assert T.pool_global(x, "avg").item() == 0.0
    assert T.pool_global(x, "max").item() == 1.0


def test_pool_global_max_routes_to_argmax_only():
    x = T.tensor(np.array([[1.0, 5.0], [2.0, 3.0]]).reshape(1, 1, 2, 2),
                 requires_grad=True)
    T.backward(T.sum_all(T.pool_global(x, "max")))
    assert np.array_equal(x.grad[0, 0], [[0, 1], [0, 0]])


def test_pool_global_constant():
    x = T.tensor(np.full((2, 3, 4, 4), 2.5))
    for mode in ("avg", "max"):
        assert np.allclose(T.pool_global(x, mode).data, 2.5)


def test_pool_directional_oracle():
    x = T.tensor(np.array([[1.0, 2, 3], [4, 5, 6]]).reshape(1, 1, 2, 3))
    zw = T.pool_directional(x, "width")
    assert zw.shape == (1, 1, 2, 1)
    assert np.array_equal(zw.data.reshape(-1), [2.0, 5.0])
    zh = T.pool_directional(x, "height")
    assert zh.shape == (1, 1, 1, 3)
    assert np.array_equal(zh.data.reshape(-1), [2.5, 3.5, 4.5])


def test_directional_composes_to_global_avg():
    x = T.tensor(rand((2, 3, 5, 7), seed=11))
    via_dir = T.pool_directional(T.pool_directional(x, "width"), "height")
    assert np.allclose(via_dir.data, T.pool_global(x, "avg").data, atol=1e-12)


def test_pool_across_channels():
    x = T.tensor(rand((2, 8, 5, 5), seed=12))
    avg = T.pool_across_channels(x, "avg")
    mx = T.pool_across_channels(x, "max")
    assert avg.shape == (2, 1, 5, 5) and mx.shape == (2, 1, 5, 5)
    assert np.allclose(avg.data[:, 0], x.data.mean(axis=1))
    assert np.allclose(mx.data[:, 0], x.data.max(axis=1))


# ---------------------------------------------------------------------------
# pointwise / elementwise / gates


def test_sigmoid_zero_is_half():
    assert T.pointwise(T.tensor(np.zeros((1, 1, 1, 1))), "sigmoid").item() == 0.5


def test_relu():
    x = T.tensor(np.array([-2.0, 3.0]).reshape(1, 1, 1, 2))
    assert np.array_equal(T.pointwise(x, "relu").data.reshape(-1), [0.0, 3.0])


def test_channel_gate_broadcast():
    x = T.tensor(rand((2, 3, 4, 4), seed=13))
    gate = T.tensor(np.full((2, 3, 1, 1), 0.5))
    y = T.elementwise(x, gate, "mul")
    assert np.allclose(y.data, 0.5 * x.data)


def test_spatial_gate_broadcast_grads():
    x = T.tensor(rand((1, 3, 2, 2), seed=14), requires_grad=True)
    g = T.tensor(rand((1, 1, 2, 2), seed=15), requires_grad=True)
    T.backward(T.sum_all(T.elementwise(x, g, "mul")))
    assert np.allclose(x.grad, np.broadcast_to(g.data, x.shape))
    assert np.allclose(g.grad, x.data.sum(axis=1, keepdims=True))


def test_illegal_broadcast_rejected():
    with pytest.raises(ShapeError):
        T.elementwise(T.tensor(rand((1, 3, 4, 4))), T.tensor(rand((1, 3, 4, 1))), "mul")
    with pytest.raises(ShapeError):
        T.elementwise(T.tensor(rand((1, 3, 4, 4))), T.tensor(rand((1, 3, 1, 1))), "add")


def test_concat_split_roundtrip():
    a = T.tensor(rand((1, 2, 3, 3), seed=16))
    b = T.tensor(rand((1, 2, 3, 3), seed=17))
    joined = T.concat([a, b], axis=1)
    assert joined.shape == (1, 4, 3, 3)
    pa, pb = T.split(joined, 1, [2, 2])
    assert np.array_equal(pa.data, a.data)
    assert np.array_equal(pb.data, b.data)


def test_split_size_mismatch():
    with pytest.raises(ShapeError):
        T.split(T.tensor(rand((1, 4, 2, 2))), 1, [3, 3])


def test_clamp_gradient_zero_outside():
    x = T.tensor(np.array([-1.0, 0.5, 2.0]).reshape(1, 1, 1, 3), requires_grad=True)
    T.backward(T.sum_all(T.clamp(x, 0.0, 1.0)))
    assert np.array_equal(x.grad.reshape(-1), [0.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# matmul / reshape / transpose / softmax


def test_matmul_leading_broadcast():
    a = T.tensor(rand((2, 3, 4, 5), seed=18))
    b = T.tensor(rand((1, 1, 5, 6), seed=19))
    y = T.matmul(a, b)
    assert y.shape == (2, 3, 4, 6)
    assert np.allclose(y.data, np.matmul(a.data, b.data))


def test_matmul_broadcast_gradients():
    a0 = rand((2, 2, 3, 4), seed=20)
    b0 = rand((1, 1, 4, 2), seed=21)

    def fb(bt):
        return T.sum_all(T.pointwise(T.matmul(T.tensor(a0), bt), "sigmoid"))

    assert T.grad_check(fb, T.tensor(b0)) <= 1e-5


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(T.tensor(rand((1, 1, 2, 3))), T.tensor(rand((1, 1, 4, 2))))


def test_transpose_roundtrip_grad():
    x = T.tensor(rand((2, 3, 4, 5), seed=22), requires_grad=True)
    y = T.transpose(x, (0, 2, 3, 1))
    assert y.shape == (2, 4, 5, 3)
    T.backward(T.sum_all(T.elementwise(y, y, "mul")))
    assert np.allclose(x.grad, 2 * x.data)


def test_softmax_oracle_and_invariances():
    logits = T.tensor(np.array([0.0, np.log(3.0)]).reshape(1, 1, 1, 2))
    w = T.softmax_last(logits)
    assert np.allclose(w.data.reshape(-1), [0.25, 0.75], atol=1e-15)
    # uniform
    u = T.softmax_last(T.tensor(np.zeros((1, 1, 1, 5))))
    assert np.allclose(u.data, 0.2)
    # shift invariance
    shifted = T.softmax_last(T.tensor(logits.data + 100.0))
    assert np.allclose(shifted.data, w.data, atol=1e-15)
    # rows sum to 1
    r = T.softmax_last(T.tensor(rand((2, 3, 4, 7), seed=23)))
    assert np.all(np.abs(r.data.sum(axis=3) - 1.0) <= 1e-12)
    assert np.all((r.data > 0) & (r.data < 1))


def test_softmax_gradcheck():
    def f(t):
        return T.sum_all(T.elementwise(T.softmax_last(t), T.softmax_last(t), "mul"))

    assert T.grad_check(f, T.tensor(rand((1, 2, 3, 4), seed=24))) <= 1e-5


# ---------------------------------------------------------------------------
# backward semantics


def test_backward_requires_scalar():
    x = T.tensor(rand((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.pointwise(x, "relu"))


def test_backward_sum_gives_ones():
    x = T.tensor(rand((1, 2, 3, 3), seed=25), requires_grad=True)
    T.backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones_like(x.data))


def test_backward_sum_of_squares():
    x = T.tensor(rand((1, 1, 3, 3), seed=26), requires_grad=True)
    T.backward(T.sum_all(T.elementwise(x, x, "mul")))
    assert np.allclose(x.grad, 2 * x.data)


def test_shared_subexpression_accumulation():
    # loss = sum(y + y) with shared y must equal the unrolled duplicate graph
    x0 = rand((1, 1, 2, 2), seed=27)
    x = T.tensor(x0, requires_grad=True)
    y = T.pointwise(x, "sigmoid")
    T.backward(T.sum_all(T.elementwise(y, y, "add")))
    shared = x.grad.copy()

    x2 = T.tensor(x0, requires_grad=True)
    y1 = T.pointwise(x2, "sigmoid")
    y2 = T.pointwise(x2, "sigmoid")
    T.backward(T.sum_all(T.elementwise(y1, y2, "add")))
    assert np.allclose(shared, x2.grad, atol=1e-15)


def test_grad_check_sum_of_squares_tight():
    def f(t):
        return T.sum_all(T.elementwise(t, t, "mul"))

    err = T.grad_check(f, T.tensor(rand((1, 1, 3, 3), seed=28)))
    assert err <= 1e-8


def test_grad_check_constant_zero():
    def f(t):
        return T.sum_all(T.affine(t, 0.0, 1.0))

    assert T.grad_check(f, T.tensor(rand((1, 1, 2, 2), seed=29))) == 0.0


def test_sdiv_gradcheck():
    def f(t):
        num = T.sum_all(T.elementwise(t, t, "mul"))
        den = T.affine(T.sum_all(T.pointwise(t, "sigmoid")), 1.0, 1.0)
        return T.sdiv(num, den)

    assert T.grad_check(f, T.tensor(rand((1, 1, 2, 3), seed=30))) <= 1e-5
