import numpy as np
import pytest
from hypothesis import given, strategies as st

from changeinfer.cb_layers import (CBConvLayer, CBJoin, CBPointwise, CBPoolLayer, PROPAGATE, REUSE_1X1,
                                   update_output)
from changeinfer.change_engine import extract_indexes
from changeinfer.errors import ConfigError, ShapeError
from changeinfer.tensor_core import ConvSpec, PoolSpec, conv2d_dense, maxpool_dense, rel_error, relu


def rand_spec(rng, cin, cout, k, stride=1, pad=None):
    pad = k // 2 if pad is None else pad
    return ConvSpec(rng.normal(size=(cout, cin, k, k)).astype(np.float32),
                    rng.normal(size=cout).astype(np.float32), stride, pad)


def upstream_of(m):
    return m, extract_indexes(m)


def test_bootstrap_equals_dense():
    rng = np.random.default_rng(0)
    spec = rand_spec(rng, 3, 4, 3)
    layer = CBConvLayer("c", spec, tau=0.0, fuse_relu=True)
    x = rng.random((3, 9, 8), dtype=np.float32)
    out, m, idx, st_ = layer.forward(x)
    assert m.all() and st_.changed_px == 72
    assert rel_error(out, relu(conv2d_dense(x, spec))) <= 1e-5
    assert st_.eff_ops == st_.dense_ops == 2 * 72 * 4 * 3 * 9


def test_empty_change_keeps_output_and_zero_ops():
    rng = np.random.default_rng(1)
    layer = CBConvLayer("c", rand_spec(rng, 2, 3, 3), tau=0.1)
    x = rng.random((2, 6, 6), dtype=np.float32)
    out0 = layer.forward(x)[0].copy()
    out, m, idx, st_ = layer.forward(x)
    np.testing.assert_array_equal(out, out0)
    assert idx.shape == (0, 2) and st_.eff_ops == 0 and st_.changed_px == 0


def test_single_pixel_7x7_updates_49():
    rng = np.random.default_rng(2)
    layer = CBConvLayer("c", rand_spec(rng, 1, 2, 7), tau=0.0)
    x = rng.random((1, 20, 20), dtype=np.float32)
    layer.forward(x)
    x2 = x.copy()
    x2[0, 10, 10] += 1
    _, _, idx, st_ = layer.forward(x2)
    assert st_.changed_px == 49 and len(idx) == 49
    assert layer.consistency_error() == 0.0


def test_output_buffer_is_reused():
    rng = np.random.default_rng(3)
    layer = CBConvLayer("c", rand_spec(rng, 1, 1, 3), tau=0.0)
    a = layer.forward(rng.random((1, 5, 5), dtype=np.float32))[0]
    b = layer.forward(rng.random((1, 5, 5), dtype=np.float32))[0]
    assert a is b is layer.prev_output


def test_update_output_examples():
    prev = np.ones((2, 3, 3), np.float32)
    before = prev.copy()
    update_output(prev, np.zeros((2, 0), np.float32), np.zeros((0, 2), int))
    np.testing.assert_array_equal(prev, before)
    update_output(prev, np.array([[-1.0], [0.25]], np.float32), np.array([[1, 2]]),
                  bias=np.array([0.5, 0.0], np.float32), fuse_relu=True)
    assert prev[0, 1, 2] == 0 and prev[1, 1, 2] == 0.25
    y = np.array([[7, 8], [9, 10]], np.float32)
    update_output(prev, y, np.array([[0, 0], [2, 1]]))
    mask = np.ones((3, 3), bool)
    mask[0, 0] = mask[2, 1] = mask[1, 2] = False
    np.testing.assert_array_equal(prev[:, mask], before[:, mask])
    assert prev[:, 2, 1].tolist() == [8, 10]


def test_update_output_count_mismatch():
    with pytest.raises(ShapeError):
        update_output(np.zeros((1, 2, 2), np.float32), np.zeros((1, 3), np.float32), np.array([[0, 0]]))


def test_policy_errors():
    rng = np.random.default_rng(4)
    with pytest.raises(ConfigError):
        CBConvLayer("c", rand_spec(rng, 1, 1, 3), policy=REUSE_1X1)
    with pytest.raises(ConfigError):
        CBConvLayer("c", rand_spec(rng, 1, 1, 1), policy="nope")
    with pytest.raises(ConfigError):
        CBConvLayer("c", rand_spec(rng, 1, 1, 1), tau=-0.5)
    layer = CBConvLayer("c", rand_spec(rng, 1, 1, 3), policy=PROPAGATE)
    with pytest.raises(ConfigError):
        layer.forward(np.zeros((1, 4, 4), np.float32))


def test_reuse_1x1_uses_upstream_indexes_verbatim():
    rng = np.random.default_rng(5)
    layer = CBConvLayer("c", rand_spec(rng, 2, 3, 1), policy=REUSE_1X1)
    x = rng.random((2, 4, 4), dtype=np.float32)
    layer.forward(x, upstream_of(np.ones((4, 4), bool)))
    m = np.zeros((4, 4), bool)
    m[1, 2] = True
    x2 = x.copy()
    x2[:, 1, 2] += 1
    up = upstream_of(m)
    out, m_out, idx, _ = layer.forward(x2, up)
    assert m_out is up[0] and idx is up[1]
    assert layer.consistency_error() == 0.0


def test_propagate_policy_marks_worst_case():
    rng = np.random.default_rng(6)
    layer = CBConvLayer("c", rand_spec(rng, 1, 1, 3), policy=PROPAGATE)
    x = rng.random((1, 6, 6), dtype=np.float32)
    layer.forward(x, upstream_of(np.ones((6, 6), bool)))
    m = np.zeros((6, 6), bool)
    m[2, 2] = True
    # the value does not even change: propagation marks the window anyway
    _, _, idx, st_ = layer.forward(x, upstream_of(m))
    assert st_.changed_px == 9


def test_pool_examples():
    rng = np.random.default_rng(7)
    pool = CBPoolLayer("p", PoolSpec(2, 2))
    x = rng.random((2, 6, 6), dtype=np.float32)
    out, _, _, _ = pool.forward(x, upstream_of(np.ones((6, 6), bool)))
    np.testing.assert_array_equal(out, maxpool_dense(x, 2, 2))
    before = out.copy()
    _, _, idx, st_ = pool.forward(x, upstream_of(np.zeros((6, 6), bool)))
    assert st_.changed_px == 0
    np.testing.assert_array_equal(out, before)
    m = np.zeros((6, 6), bool)
    m[3, 4] = True
    x[:, 3, 4] = 5
    _, _, idx, st_ = pool.forward(x, upstream_of(m))
    assert idx.tolist() == [[1, 2]]
    np.testing.assert_array_equal(out, maxpool_dense(x, 2, 2))


def test_pool_shape_mismatch():
    pool = CBPoolLayer("p", PoolSpec(2, 2))
    pool.forward(np.zeros((1, 4, 4), np.float32), upstream_of(np.ones((4, 4), bool)))
    with pytest.raises(ShapeError):
        pool.forward(np.zeros((1, 4, 4), np.float32), upstream_of(np.ones((3, 4), bool)))


@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 3, 5]), st.sampled_from([1, 2]), st.floats(0, 0.3))
def test_conv_locality_and_consistency(seed, k, stride, tau):
    rng = np.random.default_rng(seed)
    spec = rand_spec(rng, 2, 3, k, stride)
    layer = CBConvLayer("c", spec, tau=tau, fuse_relu=bool(seed % 2))
    x = rng.random((2, 11, 9), dtype=np.float32)
    layer.forward(x)
    for _ in range(3):
        x = x.copy()
        mask = rng.random((11, 9)) < 0.1
        x[:, mask] += rng.normal(0, 0.3, (2, int(mask.sum()))).astype(np.float32)
        before = layer.prev_output.copy()
        out, m_out, idx, st_ = layer.forward(x)
        np.testing.assert_array_equal(out[:, ~m_out], before[:, ~m_out])
        assert st_.eff_ops <= st_.dense_ops
        assert layer.consistency_error() <= 1e-5


@given(st.integers(0, 2**31 - 1), st.booleans())
def test_pool_tracks_dense(seed, ceil):
    rng = np.random.default_rng(seed)
    pool = CBPoolLayer("p", PoolSpec(2, 2, ceil))
    x = rng.random((2, 7, 9), dtype=np.float32)
    pool.forward(x, upstream_of(np.ones((7, 9), bool)))
    for _ in range(3):
        m = rng.random((7, 9)) < 0.15
        x = x.copy()
        x[:, m] = rng.random((2, int(m.sum())), dtype=np.float32)
        out = pool.forward(x, upstream_of(m))[0]
        np.testing.assert_array_equal(out, maxpool_dense(x, 2, 2, ceil))


def test_pointwise_and_join():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(2, 2, 4, 4)).astype(np.float32)
    r = CBPointwise("r", relu)
    full = upstream_of(np.ones((4, 4), bool))
    np.testing.assert_array_equal(r.forward(a, full)[0], relu(a))
    add, cat = CBJoin("j", "add"), CBJoin("k", "concat")
    np.testing.assert_array_equal(add.forward([a, b], [full, full])[0], a + b)
    np.testing.assert_array_equal(cat.forward([a, b], [full, full])[0], np.concatenate([a, b]))
    ma = np.zeros((4, 4), bool)
    ma[0, 1] = True
    mb = np.zeros((4, 4), bool)
    mb[3, 3] = True
    a[:, 0, 1] += 1
    b[:, 3, 3] -= 1
    out, m, _, _ = add.forward([a, b], [upstream_of(ma), upstream_of(mb)])
    np.testing.assert_array_equal(m, ma | mb)
    np.testing.assert_array_equal(out, a + b)
    with pytest.raises(ConfigError):
        CBJoin("x", "mul")
    with pytest.raises(ShapeError):
        add.forward([a, np.zeros((3, 4, 4), np.float32)], [full, full])
