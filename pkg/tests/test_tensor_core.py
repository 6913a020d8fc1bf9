import numpy as np
import pytest
from hypothesis import given, strategies as st

from changeinfer.errors import ShapeError
from changeinfer.tensor_core import (ConvSpec, PoolSpec, conv2d_dense, conv2d_gemm, gemm, im2col, kernel_matrix,
                                     maxpool_dense, output_size, relu)

RAMP3 = np.arange(1, 10, dtype=np.float32).reshape(1, 3, 3)


def ones3x3(pad=1):
    return ConvSpec(np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32), 1, pad)


def test_output_size_floor_and_ceil():
    assert output_size(7, 3, 1, 1) == 7
    assert output_size(7, 3, 2, 0) == 3
    assert output_size(5, 2, 2, 0) == 2
    assert output_size(5, 2, 2, 0, ceil_mode=True) == 3
    # a ceil window that would start in the padding is dropped
    assert output_size(4, 2, 2, 0, ceil_mode=True) == 2


def test_conv_identity_1x1():
    x = np.random.default_rng(0).random((1, 4, 5), dtype=np.float32)
    spec = ConvSpec(np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    np.testing.assert_array_equal(conv2d_dense(x, spec), x)


def test_conv_zero_weights_gives_bias():
    spec = ConvSpec.zeros(2, 3, 3, padding=1)
    spec.bias[:] = [0.5, -1.0, 2.0]
    y = conv2d_dense(np.ones((2, 4, 4), np.float32), spec)
    for o, b in enumerate(spec.bias):
        assert np.all(y[o] == b)


def test_conv_ramp_hand_sums():
    y = conv2d_dense(RAMP3, ones3x3())
    assert y[0, 1, 1] == 45
    assert y[0, 0, 0] == 1 + 2 + 4 + 5


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d_dense(np.ones((2, 3, 3), np.float32), ones3x3())


def test_conv_rejects_empty_output():
    with pytest.raises(ShapeError):
        conv2d_dense(np.ones((1, 2, 2), np.float32), ones3x3(pad=0))


def test_kernel_matrix_layout():
    w = np.random.default_rng(1).random((4, 3, 2, 5), dtype=np.float32)
    K = kernel_matrix(ConvSpec(w, np.zeros(4, np.float32)))
    o, c, j, i = 2, 1, 1, 3
    assert K.shape == (4, 3 * 2 * 5)
    assert K[o, (c * 2 + j) * 5 + i] == w[o, c, j, i]


def test_im2col_1x1_is_reshape():
    x = np.random.default_rng(2).random((3, 4, 5), dtype=np.float32)
    spec = ConvSpec.zeros(3, 2, 1)
    np.testing.assert_array_equal(im2col(x, spec), x.reshape(3, 20))


def test_im2col_ramp_corner_column():
    X = im2col(RAMP3, ones3x3())
    np.testing.assert_array_equal(X[:, 0], [0, 0, 0, 0, 1, 2, 0, 4, 5])


def test_im2col_single_selected_pixel():
    x = np.ones((2, 5, 5), np.float32)
    X = im2col(x, ConvSpec.zeros(2, 1, 3), np.array([[1, 1]]))
    assert X.shape == (2 * 9, 1)


def test_im2col_selected_out_of_range():
    with pytest.raises(ShapeError):
        im2col(np.ones((1, 5, 5), np.float32), ConvSpec.zeros(1, 1, 3), np.array([[3, 0]]))


def test_im2col_index_formula():
    rng = np.random.default_rng(3)
    x = rng.random((2, 6, 7), dtype=np.float32)
    spec = ConvSpec.zeros(2, 1, (3, 2), stride=2, padding=1)
    ho, wo = spec.output_hw(6, 7)
    X = im2col(x, spec)
    assert X.shape == (2 * 3 * 2, ho * wo)
    for c in range(2):
        for j in range(3):
            for i in range(2):
                for yo in range(ho):
                    for xo in range(wo):
                        r, q = j + yo * 2 - 1, i + xo * 2 - 1
                        want = x[c, r, q] if 0 <= r < 6 and 0 <= q < 7 else 0
                        assert X[(c * 3 + j) * 2 + i, yo * wo + xo] == want


def test_im2col_selected_order_follows_indexes():
    x = np.random.default_rng(4).random((1, 5, 5), dtype=np.float32)
    spec = ConvSpec.zeros(1, 1, 3, padding=1)
    full = im2col(x, spec)
    sel = np.array([[4, 4], [0, 2], [2, 1]])
    np.testing.assert_array_equal(im2col(x, spec, sel), full[:, sel[:, 0] * 5 + sel[:, 1]])


def test_gemm_examples():
    np.testing.assert_array_equal(gemm(np.array([[1, 2], [3, 4]], np.float32), np.array([[5], [6]], np.float32)),
                                  [[17], [39]])
    X = np.random.default_rng(5).random((4, 7), dtype=np.float32)
    np.testing.assert_array_equal(gemm(np.eye(4, dtype=np.float32), X), X)
    assert not gemm(X.T.copy(), np.zeros((4, 3), np.float32)).any()
    assert gemm(np.ones((3, 4), np.float32), np.ones((4, 0), np.float32)).shape == (3, 0)


def test_gemm_shape_mismatch():
    with pytest.raises(ShapeError):
        gemm(np.ones((2, 3), np.float32), np.ones((4, 1), np.float32))


def test_maxpool_examples():
    assert maxpool_dense(np.array([[[1, 2], [3, 4]]], np.float32), 2, 2).tolist() == [[[4]]]
    ramp = np.arange(1, 17, dtype=np.float32).reshape(1, 4, 4)
    assert maxpool_dense(ramp, 2, 2).tolist() == [[[6, 8], [14, 16]]]
    const = np.full((2, 6, 6), 0.3, np.float32)
    assert np.all(maxpool_dense(const, 2, 2) == np.float32(0.3))


def test_maxpool_ceil_mode_partial_window():
    x = np.arange(1, 26, dtype=np.float32).reshape(1, 5, 5)
    y = maxpool_dense(x, 2, 2, ceil_mode=True)
    assert y.shape == (1, 3, 3)
    assert y[0, 2, 2] == 25 and y[0, 0, 2] == 10


def test_maxpool_too_small():
    with pytest.raises(ShapeError):
        maxpool_dense(np.ones((1, 1, 1), np.float32), 2, 2)


def test_relu_examples():
    assert relu(np.array([-1, 0, 2], np.float32)).tolist() == [0, 0, 2]
    assert not relu(-np.ones(5, np.float32)).any()
    x = np.random.default_rng(6).normal(size=50).astype(np.float32)
    np.testing.assert_array_equal(relu(relu(x)), relu(x))


conv_cases = st.fixed_dictionaries({
    "cin": st.integers(1, 8), "cout": st.integers(1, 8), "kh": st.integers(1, 7), "kw": st.integers(1, 7),
    "stride": st.integers(1, 3), "pad": st.integers(0, 3), "h": st.integers(1, 16), "w": st.integers(1, 16),
    "seed": st.integers(0, 2**31 - 1),
})


def _case(p):
    rng = np.random.default_rng(p["seed"])
    w = rng.normal(size=(p["cout"], p["cin"], p["kh"], p["kw"])).astype(np.float32)
    spec = ConvSpec(w, rng.normal(size=p["cout"]).astype(np.float32), p["stride"], p["pad"])
    x = rng.normal(size=(p["cin"], p["h"], p["w"])).astype(np.float32)
    return spec, x, rng


@given(conv_cases)
def test_dense_equals_gemm_exactly(p):
    spec, x, _ = _case(p)
    ho, wo = spec.output_hw(p["h"], p["w"])
    if ho < 1 or wo < 1:
        return
    y = conv2d_dense(x, spec)
    X = im2col(x, spec)
    assert X.shape[1] == ho * wo
    y2 = (gemm(spec.kernel_matrix(), X) + spec.bias[:, None]).reshape(spec.out_channels, ho, wo)
    np.testing.assert_array_equal(y, y2)
    np.testing.assert_array_equal(conv2d_gemm(x, spec), y)
    assert np.isfinite(y).all()


@given(conv_cases)
def test_conv_linearity(p):
    spec, x1, rng = _case(p)
    if min(spec.output_hw(p["h"], p["w"])) < 1:
        return
    x2 = rng.normal(size=x1.shape).astype(np.float32)
    b = spec.bias[:, None, None]
    lhs = conv2d_dense(x1 + x2, spec) - b
    rhs = (conv2d_dense(x1, spec) - b) + (conv2d_dense(x2, spec) - b)
    scale = max(np.abs(rhs).max(), np.abs(lhs).max(), 1e-3)
    assert np.abs(lhs - rhs).max() / scale <= 1e-5


def test_conv_spec_validation():
    with pytest.raises(ShapeError):
        ConvSpec(np.ones((2, 1, 3, 3), np.float32), np.zeros(3, np.float32))
    with pytest.raises(ValueError):
        PoolSpec(2, 0)
