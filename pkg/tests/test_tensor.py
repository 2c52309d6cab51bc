import numpy as np
import pytest

from certilip.errors import OracleScaleError, ShapeError
from certilip.tensor import Conv2dOperator, DenseOperator, apply, apply_adjoint, materialize


def naive_matvec(m, x):
    out = np.zeros(m.shape[0])
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            out[i] += m[i, j] * x[j]
    return out


def naive_conv(kernel, x, stride, pad):
    c_out, c_in, kh, kw = kernel.shape
    _, h, w = x.shape
    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
    xp[:, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                for c in range(c_in):
                    for p in range(kh):
                        for q in range(kw):
                            out[o, i, j] += kernel[o, c, p, q] * xp[c, i * stride + p, j * stride + q]
    return out


def test_dense_identity():
    op = DenseOperator(np.eye(4))
    np.testing.assert_array_equal(apply(op, np.array([1.0, 2, 3, 4])), [1, 2, 3, 4])


def test_conv_1x1_scaling():
    op = Conv2dOperator(np.array([[[[2.0]]]]), (3, 3))
    np.testing.assert_array_equal(apply(op, np.ones((1, 3, 3))), 2 * np.ones((1, 3, 3)))


def test_dense_matches_naive_loop():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((8, 5))
    x = rng.standard_normal(5)
    np.testing.assert_allclose(apply(DenseOperator(m), x), naive_matvec(m, x), rtol=0, atol=1e-14)


def test_dense_adjoint_matches_naive_transpose():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((8, 5))
    y = rng.standard_normal(8)
    np.testing.assert_allclose(apply_adjoint(DenseOperator(m), y), naive_matvec(m.T, y), atol=1e-14)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("hw", [(5, 5), (6, 4)])
def test_conv_matches_naive_loop(stride, hw):
    rng = np.random.default_rng(2)
    kern = rng.standard_normal((3, 2, 3, 3))
    x = rng.standard_normal((2,) + hw)
    op = Conv2dOperator(kern, hw, stride=stride)
    np.testing.assert_allclose(op.apply(x), naive_conv(kern, x, stride, 1), atol=1e-12)


@pytest.mark.parametrize("op_factory", [
    lambda r: DenseOperator(r.standard_normal((7, 5))),
    lambda r: Conv2dOperator(r.standard_normal((3, 2, 3, 3)), (6, 6)),
    lambda r: Conv2dOperator(r.standard_normal((4, 3, 3, 3)), (7, 5), stride=2),
    lambda r: Conv2dOperator(r.standard_normal((2, 2, 1, 1)), (4, 4), padding=0),
])
def test_adjoint_identity_200_pairs(op_factory):
    rng = np.random.default_rng(3)
    op = op_factory(rng)
    xs = rng.standard_normal((200,) + op.in_shape)
    ys = rng.standard_normal((200,) + op.out_shape)
    lhs = np.sum((op.apply(xs) * ys).reshape(200, -1), axis=1)
    rhs = np.sum((xs * op.apply_adjoint(ys)).reshape(200, -1), axis=1)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_adjoint_of_zero_is_zero():
    rng = np.random.default_rng(4)
    op = Conv2dOperator(rng.standard_normal((2, 3, 3, 3)), (4, 4))
    assert not np.any(op.apply_adjoint(np.zeros(op.out_shape)))


def test_materialize_conv_column_by_column():
    rng = np.random.default_rng(5)
    op = Conv2dOperator(rng.standard_normal((1, 1, 3, 3)), (4, 4))
    m = materialize(op)
    assert m.shape == (16, 16)
    for j in range(16):
        e = np.zeros(16)
        e[j] = 1
        np.testing.assert_array_equal(m[:, j], op.apply(e.reshape(1, 4, 4)).ravel())
    x = rng.standard_normal((1, 4, 4))
    np.testing.assert_allclose(m @ x.ravel(), op.apply(x).ravel(), atol=1e-10)


def test_materialize_dense_and_zero():
    m = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(materialize(DenseOperator(m)), m)
    zero = Conv2dOperator(np.zeros((2, 2, 3, 3)), (3, 3))
    assert not np.any(materialize(zero))


def test_materialize_guard():
    op = Conv2dOperator(np.zeros((1, 5, 3, 3)), (30, 30))
    with pytest.raises(OracleScaleError):
        materialize(op)


def test_shape_mismatch_names_both_shapes():
    op = DenseOperator(np.eye(3))
    with pytest.raises(ShapeError, match=r"\(4,\).*\(3,\)"):
        apply(op, np.ones(4))
    with pytest.raises(ShapeError):
        apply_adjoint(op, np.ones((2, 5)))


def test_bad_stride_rejected():
    with pytest.raises(ShapeError):
        Conv2dOperator(np.zeros((1, 1, 3, 3)), (5, 5), stride=3)


def test_deterministic():
    rng = np.random.default_rng(6)
    op = Conv2dOperator(rng.standard_normal((3, 3, 3, 3)), (8, 8))
    x = rng.standard_normal((5, 3, 8, 8))
    assert np.array_equal(op.apply(x), op.apply(x))
