import numpy as np
import pytest

import numerics
from errors import NumericError, RowIndexError, ShapeError


def _naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = a.dtype.type(0)
            for k in range(a.shape[1]):
                s = s + a[i, k] * b[k, j]
            out[i, j] = s
    return out


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_matmul_matches_naive_loop_bit_exactly(rng, dtype):
    for _ in range(5):
        n, k, m = rng.integers(1, 7, size=3)
        a = rng.standard_normal((n, k)).astype(dtype)
        b = rng.standard_normal((k, m)).astype(dtype)
        assert np.array_equal(numerics.matmul(a, b), _naive_matmul(a, b))


def test_matmul_identity_and_shape_error():
    a = numerics.matrix([[1, 2], [3, 4]])
    assert np.array_equal(numerics.matmul(a, np.eye(2, dtype=a.dtype)), a)
    with pytest.raises(ShapeError):
        numerics.matmul(numerics.zeros(2, 3), numerics.zeros(2, 3))


def test_matrix_validates_shape_and_values():
    assert numerics.matrix([1, 2, 3, 4, 5, 6], 2, 3).shape == (2, 3)
    with pytest.raises(ShapeError):
        numerics.matrix([1, 2, 3], 2, 2)
    with pytest.raises(NumericError):
        numerics.matrix([[1.0, np.nan]])


def test_check_mode_switches_width():
    assert numerics.float_dtype() == np.float32
    with numerics.check_mode(True):
        assert numerics.float_dtype() == np.float64
        assert numerics.zeros(1, 1).dtype == np.float64
    assert numerics.float_dtype() == np.float32


def test_gather_and_scatter_add_rows():
    table = numerics.matrix([[1, 1], [2, 2], [3, 3]])
    assert np.array_equal(numerics.gather_rows(table, [2, 0]), table[[2, 0]])
    grads = numerics.matrix([[1, 0], [1, 0], [0, 5]])
    out = numerics.scatter_add_rows(table, [0, 0, 2], grads)
    assert np.array_equal(out, numerics.matrix([[3, 1], [2, 2], [3, 8]]))
    # not in place by default
    assert table[0, 0] == 1


def test_row_index_errors():
    table = numerics.zeros(3, 2)
    with pytest.raises(RowIndexError):
        numerics.gather_rows(table, [3])
    with pytest.raises(IndexError):
        numerics.scatter_add_rows(table, [-1], numerics.zeros(1, 2))
    with pytest.raises(ShapeError):
        numerics.scatter_add_rows(table, [0, 1], numerics.zeros(1, 2))


def test_sigmoid_is_stable_at_extremes():
    out = numerics.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0 and out[1] == 0.5 and out[2] == 1.0
    assert float(numerics.sigmoid(np.float64(0.0))) == 0.5
    assert np.isnan(numerics.sigmoid(np.array([np.nan]))[0])


def test_relu_keeps_shape_and_dtype():
    x = np.array([[-2.0, 0.0], [0.5, 3.0]], dtype=np.float32)
    out = numerics.relu(x)
    assert out.dtype == np.float32
    assert out.tolist() == [[0.0, 0.0], [0.5, 3.0]]


def test_masked_softmax():
    scores = np.array([[1.0, 2.0, 3.0], [5.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    mask = np.array([[True, True, False], [True, False, False], [False, False, False]])
    w = numerics.masked_softmax(scores, mask)
    assert w[0, 2] == 0.0
    assert w[0].sum() == pytest.approx(1.0)
    assert w[0, 1] > w[0, 0]
    assert np.array_equal(w[1], [1.0, 0.0, 0.0])
    assert np.array_equal(w[2], [0.0, 0.0, 0.0])


def test_masked_softmax_ignores_huge_masked_scores():
    w = numerics.masked_softmax(np.array([[0.0, 1e30]]), np.array([[True, False]]))
    assert np.array_equal(w, [[1.0, 0.0]])


def test_keyed_uniform_independent_of_batch_composition():
    keys = np.array([5, 17, 99], dtype=np.uint64)
    full = numerics.keyed_uniform(7, 2, keys, 4)
    alone = numerics.keyed_uniform(7, 2, keys[1:2], 4)
    assert np.array_equal(full[1], alone[0])
    assert np.all((full >= 0) & (full < 1))
    assert not np.array_equal(full, numerics.keyed_uniform(8, 2, keys, 4))
    assert not np.array_equal(full, numerics.keyed_uniform(7, 3, keys, 4))


def test_glorot_bound():
    assert numerics.glorot_bound(3, 3) == pytest.approx(1.0)
