import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dari.errors import ParameterError, ShapeError
from dari.tensor import add_scaled, make_rng, squared_l2, tensor_filled, tensor_gaussian


def test_filled():
    np.testing.assert_array_equal(tensor_filled([2, 2], 0.0), [[0, 0], [0, 0]])
    np.testing.assert_array_equal(tensor_filled([3], 1.5), [1.5, 1.5, 1.5])
    assert tensor_filled([3], 1.5).dtype == np.float64


@pytest.mark.parametrize("shape", [[0], [], [2, 0, 3], [2**40, 2**40]])
def test_filled_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        tensor_filled(shape, 1.0)


def test_gaussian_statistics():
    x = tensor_gaussian([10**6], 0.01, make_rng(1))
    assert abs(x.mean()) <= 4 * (0.01 / 10**3)
    y = tensor_gaussian([10**6], 0.001, make_rng(2))
    assert abs(y.std() - 0.001) <= 0.05 * 0.001


def test_gaussian_deterministic():
    a = tensor_gaussian([4, 5], 0.1, make_rng(7))
    b = tensor_gaussian([4, 5], 0.1, make_rng(7))
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != tensor_gaussian([4, 5], 0.1, make_rng(8)).tobytes()


@pytest.mark.parametrize("std", [0.0, -1.0])
def test_gaussian_rejects_nonpositive_std(std):
    with pytest.raises(ParameterError):
        tensor_gaussian([3], std, make_rng(0))


def test_squared_l2():
    assert squared_l2(np.array([3.0, 4.0])) == 25
    assert squared_l2(np.zeros((3, 2))) == 0
    assert squared_l2(np.ones(4)) == 4


def test_add_scaled():
    np.testing.assert_array_equal(add_scaled(np.array([1.0, 2.0]), np.array([10.0, 10.0]), 0.5), [6, 7])
    acc = np.array([1.0, 2.0])
    np.testing.assert_array_equal(add_scaled(acc, np.array([5.0, 5.0]), 0.0), acc)
    with pytest.raises(ShapeError):
        add_scaled(np.zeros(2), np.zeros(3), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-10**6, 10**6), min_size=1, max_size=30), st.integers(0, 2**32))
def test_add_scaled_roundtrip_exact(values, seed):
    a = np.array(values, dtype=np.float64)
    x = make_rng(seed).integers(-1000, 1000, size=a.shape).astype(np.float64)
    np.testing.assert_array_equal(add_scaled(add_scaled(a, x, 1), x, -1), a)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 50))
def test_squared_l2_is_self_dot(seed, n):
    t = make_rng(seed).standard_normal(n)
    assert squared_l2(t) == pytest.approx(float(np.dot(t, t)), rel=1e-14)
    assert squared_l2(t) >= 0
