import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sketchfed import MLP, DataError, LeastSquares, Logistic, Quadratic, ShapeError, loss_and_grad, smoothness_constant
from sketchfed.models import init_weights, power_iteration


def central_difference(spec, w, batch, h=1e-5):
    g = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (loss_and_grad(spec, w + e, batch)[0] - loss_and_grad(spec, w - e, batch)[0]) / (2 * h)
    return g


def random_instance(kind, seed):
    rng = np.random.default_rng(seed)
    if kind == "quadratic":
        M = rng.normal(size=(6, 6))
        spec = Quadratic(M @ M.T + np.eye(6), rng.normal(size=6))
        return spec, rng.normal(size=6), None
    if kind == "least_squares":
        spec = LeastSquares(5)
        return spec, rng.normal(size=5), (rng.normal(size=(7, 5)), rng.normal(size=7))
    if kind == "logistic":
        spec = Logistic(4, 3)
        return spec, rng.normal(size=spec.dim), (rng.normal(size=(9, 4)), rng.integers(0, 3, size=9))
    spec = MLP(4, 5, 3)
    return spec, spec.init_weights(rng) + 0.1 * rng.normal(size=spec.dim), (
        rng.normal(size=(9, 4)),
        rng.integers(0, 3, size=9),
    )


KINDS = ["quadratic", "least_squares", "logistic", "mlp"]


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(kind, seed):
    spec, w, batch = random_instance(kind, seed)
    _, g = loss_and_grad(spec, w, batch)
    fd = central_difference(spec, w, batch)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("kind", ["least_squares", "logistic", "mlp"])
def test_batch_gradient_is_mean_of_example_gradients(kind):
    spec, w, (X, y) = random_instance(kind, 7)
    _, g = loss_and_grad(spec, w, (X, y))
    per = np.mean([loss_and_grad(spec, w, (X[i : i + 1], y[i : i + 1]))[1] for i in range(len(y))], axis=0)
    np.testing.assert_allclose(g, per, rtol=1e-9, atol=1e-12)


def test_quadratic_stationary_point():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    spec = Quadratic(A, np.array([1.0, -1.0]))
    _, g = loss_and_grad(spec, spec.minimizer())
    assert np.linalg.norm(g) <= 1e-12


def test_logistic_zero_weights_loss_is_log_classes():
    spec = Logistic(3, 4)
    X = np.random.default_rng(0).normal(size=(8, 3))
    y = np.arange(8) % 4
    loss, _ = loss_and_grad(spec, np.zeros(spec.dim), (X, y))
    assert loss == pytest.approx(np.log(4), rel=1e-12)


def test_dimension_and_batch_errors():
    spec = Logistic(3, 2)
    with pytest.raises(ShapeError):
        loss_and_grad(spec, np.zeros(spec.dim + 1), (np.zeros((1, 3)), np.zeros(1, int)))
    with pytest.raises(DataError):
        loss_and_grad(spec, np.zeros(spec.dim), (np.zeros((0, 3)), np.zeros(0, int)))
    with pytest.raises(ShapeError):
        Quadratic(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2))


def test_dims():
    assert LeastSquares(7).dim == 7
    assert Logistic(4, 3).dim == 15
    assert MLP(4, 5, 3).dim == 4 * 5 + 5 + 5 * 3 + 3


@pytest.mark.parametrize("A, expected", [(np.eye(3), 1.0), (np.diag([1.0, 4.0]), 4.0)])
def test_smoothness_constant_small_cases(A, expected):
    assert smoothness_constant(Quadratic(A, np.zeros(len(A)))) == pytest.approx(expected, rel=1e-8)


def test_smoothness_constant_matches_eigvalsh():
    rng = np.random.default_rng(3)
    M = rng.normal(size=(32, 32))
    A = M @ M.T / 32
    L = smoothness_constant(Quadratic(A, np.zeros(32)))
    assert L == pytest.approx(np.linalg.eigvalsh(A)[-1], rel=1e-6)


def test_smoothness_constant_least_squares_and_unavailable():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(50, 6))
    assert smoothness_constant(LeastSquares(6), X) == pytest.approx(np.linalg.eigvalsh(X.T @ X / 50)[-1], rel=1e-6)
    assert smoothness_constant(LeastSquares(6)) is None
    assert smoothness_constant(Logistic(3, 2)) is None
    assert smoothness_constant(MLP(3, 4, 2)) is None


def test_power_iteration_zero_matrix():
    assert power_iteration(np.zeros((3, 3))) == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_quadratic_gradient_is_lipschitz(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(5, 5))
    spec = Quadratic(M @ M.T, rng.normal(size=5))
    L = smoothness_constant(spec)
    x, y = rng.normal(size=5), rng.normal(size=5)
    gx = loss_and_grad(spec, x)[1]
    gy = loss_and_grad(spec, y)[1]
    assert np.linalg.norm(gx - gy) <= L * np.linalg.norm(x - y) * (1 + 1e-7)


def test_init_weights():
    assert np.array_equal(init_weights(Logistic(3, 2)), np.zeros(8))
    a = init_weights(MLP(3, 4, 2), np.random.default_rng(0))
    b = init_weights(MLP(3, 4, 2), np.random.default_rng(0))
    assert np.array_equal(a, b) and np.any(a != 0)
    with pytest.raises(ValueError):
        init_weights(MLP(3, 4, 2))


def test_predict_shapes():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(6, 3))
    for spec in (Logistic(3, 4), MLP(3, 5, 4)):
        p = spec.predict(rng.normal(size=spec.dim), X)
        assert p.shape == (6,) and p.min() >= 0 and p.max() < 4
