import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qat4 import tensor as T
from qat4.errors import DomainError, ShapeError

from conftest import direct_conv


def test_matmul_identity_and_by_hand():
    a = np.array([[1, 2], [3, 4]], dtype=np.float32)
    np.testing.assert_array_equal(T.matmul(np.eye(2, dtype=np.float32), a), a)
    np.testing.assert_array_equal(T.matmul(np.array([[1, 2]]), np.array([[3], [4]])), [[11]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 7)).astype(np.float32)
    b = rng.standard_normal((7, 3)).astype(np.float32)
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                ref[i, j] += float(a[i, k]) * float(b[k, j])
    np.testing.assert_allclose(T.matmul(a, b), ref, atol=1e-6, rtol=0)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_right_identity_exact():
    a = np.random.default_rng(1).standard_normal((6, 4)).astype(np.float32)
    np.testing.assert_array_equal(T.matmul(a, np.eye(4, dtype=np.float32)), a)


def test_im2col_identity_case():
    x = np.array([[[2.5]]], dtype=np.float32)
    np.testing.assert_array_equal(T.im2col(x, 1, 1, 0), [[2.5]])


def test_im2col_corner_padding():
    cols = T.im2col(np.ones((1, 3, 3), dtype=np.float32), 3, 1, 1)
    corner = cols[:, 0]
    assert corner.size == 9
    assert int((corner == 1).sum()) == 4 and int((corner == 0).sum()) == 5


def test_im2col_nonint_extent():
    with pytest.raises(ShapeError):
        T.im2col(np.zeros((1, 4, 4)), 3, 2, 0)


def test_conv_via_im2col_matches_direct():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    y = (w.reshape(4, -1) @ T.im2col(x, 3, 1, 1)).reshape(4, 8, 8)
    np.testing.assert_allclose(y, direct_conv(x[None], w, pad=1)[0], atol=1e-5, rtol=0)


def test_nhwc_lowering_matches_direct():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((5, 3, 3, 3))
    cols = T.im2col_nhwc(x.transpose(0, 2, 3, 1), 3, 1, 1)
    y = (cols @ w.transpose(0, 2, 3, 1).reshape(5, -1).T).reshape(2, 6, 6, 5).transpose(0, 3, 1, 2)
    np.testing.assert_allclose(y, direct_conv(x, w, pad=1), atol=1e-10)


def test_col2im_bijective_case():
    x = np.random.default_rng(4).standard_normal((3, 5, 5)).astype(np.float32)
    np.testing.assert_array_equal(T.col2im(T.im2col(x, 1, 1, 0), x.shape, 1, 1, 0), x)


def test_col2im_overlap_count():
    ones = T.im2col(np.ones((1, 5, 5)), 3, 1, 1)
    acc = T.col2im(np.ones_like(ones), (1, 5, 5), 3, 1, 1)
    assert acc[0, 2, 2] == 9
    assert acc[0, 0, 0] == 4


def test_col2im_geometry_mismatch():
    with pytest.raises(ShapeError):
        T.col2im(np.zeros((9, 10)), (1, 5, 5), 3, 1, 1)


def _adjoint_gap(c, h, k, stride, pad, lowering, seed):
    rng = np.random.default_rng(seed)
    if lowering == "nchw":
        x = rng.standard_normal((2, c, h, h))
        cols = T.im2col_batch(x, k, stride, pad)
        y = rng.standard_normal(cols.shape)
        back = T.col2im_batch(y, x.shape, k, stride, pad)
    else:
        x = rng.standard_normal((2, h, h, c))
        cols = T.im2col_nhwc(x, k, stride, pad)
        y = rng.standard_normal(cols.shape)
        back = T.col2im_nhwc(y, x.shape, k, stride, pad)
    lhs = float(np.sum(cols * y))
    rhs = float(np.sum(x * back))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12)


@settings(max_examples=60, deadline=None)
@given(k=st.sampled_from([1, 3, 5]), stride=st.sampled_from([1, 2]),
       pad=st.sampled_from([0, 1, 2]), c=st.integers(1, 3), extra=st.integers(0, 3),
       lowering=st.sampled_from(["nchw", "nhwc"]), seed=st.integers(0, 10_000))
def test_im2col_col2im_adjoint(k, stride, pad, c, extra, lowering, seed):
    # pick H so the output extent is an integer
    h = k - 2 * pad + stride * (extra + 1)
    if h < 1:
        h += stride * ((1 - h) // stride + 1)
    assert _adjoint_gap(c, h, k, stride, pad, lowering, seed) < 1e-5


def test_adjoint_identity_float32():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 8, 8)).astype(np.float32)
    cols = T.im2col(x, 3, 1, 1)
    y = rng.standard_normal(cols.shape).astype(np.float32)
    lhs = np.sum(cols.astype(np.float64) * y)
    rhs = np.sum(x.astype(np.float64) * T.col2im(y, x.shape, 3, 1, 1))
    assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), 1.0)


def test_kernels_deterministic():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
    a = T.im2col_batch(x, 3, 1, 1)
    b = T.im2col_batch(x, 3, 1, 1)
    assert a.tobytes() == b.tobytes()
    assert T.col2im_batch(a, x.shape, 3, 1, 1).tobytes() == T.col2im_batch(b, x.shape, 3, 1, 1).tobytes()


@pytest.mark.parametrize("x, expected", [([0, 0, 0], 0.0), ([-3.5, 1.2, 0.26], 3.5),
                                         ([7, -7.0001], 7.0001)])
def test_max_abs(x, expected):
    arr = np.array(x, dtype=np.float64)
    assert T.max_abs(arr) == max(abs(v) for v in arr) == pytest.approx(expected)


def test_max_abs_empty():
    with pytest.raises(DomainError):
        T.max_abs(np.array([]))


def test_global_l2_norm():
    assert T.global_l2_norm([np.array([3.0]), np.array([4.0])]) == 5.0
    assert T.global_l2_norm([np.zeros(5), np.zeros((2, 2))]) == 0.0
    rng = np.random.default_rng(7)
    ts = [rng.standard_normal(s).astype(np.float32) for s in [(3,), (4, 5), (2, 2, 2)]]
    flat = np.concatenate([t.astype(np.float64).ravel() for t in ts])
    assert T.global_l2_norm(ts) == pytest.approx(np.linalg.norm(flat), rel=1e-6)
    with pytest.raises(DomainError):
        T.global_l2_norm([])
