import numpy as np
import pytest

from conftest import central_diff, rel_err
from dari.errors import ShapeError
from dari.metric import (
    MetricLayer,
    factorized_distance,
    mahalanobis_distance,
    metric_backward,
    metric_forward,
    min_quadratic_form,
    reconstruct_M,
    trace_regularizer,
)


def test_forward_identity(rng):
    f = rng.standard_normal(5)
    np.testing.assert_array_equal(metric_forward(MetricLayer(np.eye(5)), f), f)


def test_forward_homogeneity(rng):
    f1, f2 = rng.standard_normal(5), rng.standard_normal(5)
    d1 = factorized_distance(f1, f2, MetricLayer(np.eye(5)))
    d2 = factorized_distance(f1, f2, MetricLayer(2 * np.eye(5)))
    assert d2 == pytest.approx(4 * d1, rel=1e-14)


def test_forward_matches_loop_oracle(rng):
    Lm = rng.standard_normal((4, 7))
    f = rng.standard_normal(7)
    ref = [sum(Lm[i, j] * f[j] for j in range(7)) for i in range(4)]
    np.testing.assert_allclose(metric_forward(MetricLayer(Lm), f), ref, rtol=0, atol=1e-12)


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        metric_forward(MetricLayer(np.eye(3)), np.zeros(4))


def test_backward_basic(rng):
    layer = MetricLayer(np.eye(4))
    f = rng.standard_normal(4)
    gf, gL = metric_backward(layer, f, np.zeros(4))
    assert not gf.any() and not gL.any()
    g = rng.standard_normal(4)
    gf, gL = metric_backward(layer, f, g)
    np.testing.assert_array_equal(gf, g)
    np.testing.assert_array_equal(gL, np.outer(g, f))


def test_backward_distance_finite_differences(rng):
    layer = MetricLayer(rng.standard_normal((5, 6)))
    f1, f2 = rng.standard_normal(6), rng.standard_normal(6)
    delta = f1 - f2
    # d2 = ||L delta||^2, so d(d2)/d(L delta) = 2 L delta
    ge = 2 * metric_forward(layer, delta)
    gdelta, gL = metric_backward(layer, delta, ge)
    obj = lambda: factorized_distance(f1, f2, layer)
    assert rel_err(gL, central_diff(obj, layer.L)) <= 1e-6
    assert rel_err(gdelta, central_diff(obj, f1)) <= 1e-6


def test_backward_shape_error():
    with pytest.raises(ShapeError):
        metric_backward(MetricLayer(np.eye(3)), np.zeros(3), np.zeros(4))


def test_mahalanobis_basic(rng):
    f = rng.standard_normal(4)
    assert mahalanobis_distance(f, f, np.eye(4)) == 0
    g = rng.standard_normal(4)
    assert mahalanobis_distance(f, g, np.eye(4)) == pytest.approx(np.sum((f - g) ** 2), rel=1e-14)
    with pytest.raises(ShapeError):
        mahalanobis_distance(f, g, np.eye(3))


def test_factorized_basic():
    layer = MetricLayer(np.eye(2))
    assert factorized_distance(np.array([1.0, 0]), np.array([0, 1.0]), layer) == 2
    assert factorized_distance(np.ones(2), np.ones(2), layer) == 0
    with pytest.raises(ShapeError):
        factorized_distance(np.ones(2), np.ones(3), layer)


def test_factorized_symmetric(rng):
    layer = MetricLayer(rng.standard_normal((3, 5)))
    for _ in range(20):
        a, b = rng.standard_normal(5), rng.standard_normal(5)
        assert factorized_distance(a, b, layer) == factorized_distance(b, a, layer)


def test_triangle_inequality_on_roots(rng):
    layer = MetricLayer(rng.standard_normal((4, 6)))
    for _ in range(100):
        a, b, c = rng.standard_normal((3, 6))
        d = lambda x, y: np.sqrt(factorized_distance(x, y, layer))
        assert d(a, c) <= d(a, b) + d(b, c) + 1e-10


def test_equivalence_random(rng):
    for _ in range(200):
        m, d = rng.integers(1, 8, size=2)
        layer = MetricLayer(rng.standard_normal((m, d)))
        f1, f2 = rng.standard_normal((2, d))
        assert abs(mahalanobis_distance(f1, f2, reconstruct_M(layer)) - factorized_distance(f1, f2, layer)) <= 1e-10


def test_reconstruct_M():
    np.testing.assert_array_equal(reconstruct_M(MetricLayer(np.eye(3))), np.eye(3))
    np.testing.assert_array_equal(reconstruct_M(MetricLayer(np.array([[1.0, 1.0]]))), [[1, 1], [1, 1]])


def test_reconstruct_M_psd(rng):
    layer = MetricLayer(rng.standard_normal((3, 8)))
    M = reconstruct_M(layer)
    assert np.abs(M - M.T).max() <= 1e-12
    assert min_quadratic_form(M, rng, 1000) >= -1e-12


def test_trace_regularizer(rng):
    assert trace_regularizer(MetricLayer(np.eye(400))) == 400
    assert trace_regularizer(MetricLayer(np.zeros((3, 3)))) == 0
    layer = MetricLayer(rng.standard_normal((6, 9)))
    assert abs(trace_regularizer(layer) - np.trace(layer.L.T @ layer.L)) <= 1e-10
