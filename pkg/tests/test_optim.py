import numpy as np
import pytest

from flowattack.optim import LbfgsParams, NumericError, lbfgs_minimize


def quadratic(center):
    def fun(x):
        d = x - center
        return 0.5 * float(np.dot(d, d)), d
    return fun


def rosenbrock(x):
    a, b = x
    val = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    grad = np.array([-2 * (1 - a) - 400 * a * (b - a * a),
                     200 * (b - a * a)])
    return val, grad


def test_quadratic_solved_in_first_step():
    center = np.array([1.0, -2.0, 3.0, 0.5])
    x0 = np.array([5.0, 5.0, -5.0, 2.0])
    x, trace = lbfgs_minimize(quadratic(center), x0, LbfgsParams(max_steps=3))
    assert np.linalg.norm(x - center) <= 1e-8
    assert len(trace) <= 3


def test_rosenbrock():
    x, trace = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]),
                              LbfgsParams(max_steps=100, grad_tol=1e-10))
    assert np.linalg.norm(x - np.array([1.0, 1.0])) <= 1e-5
    assert len(trace) <= 100


def test_stationary_start_returns_x0():
    x0 = np.array([2.0, -1.0])
    x, trace = lbfgs_minimize(quadratic(x0.copy()), x0, LbfgsParams())
    assert np.array_equal(x, x0)
    assert len(trace) == 0


def test_monotone_descent():
    rng = np.random.default_rng(3)
    mat = rng.normal(size=(6, 6))
    psd = mat @ mat.T + np.eye(6)
    rhs = rng.normal(size=6)

    def fun(x):
        return 0.5 * float(x @ psd @ x) - float(rhs @ x), psd @ x - rhs

    _, trace = lbfgs_minimize(fun, rng.normal(size=6), LbfgsParams(max_steps=30))
    values = [trace.initial_value] + trace.values
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_nonsmooth_objective_descends():
    # kinked objective: |x| + quadratic; optimizer must not oscillate upward
    def fun(x):
        return float(np.sum(np.abs(x))) + 0.5 * float(np.dot(x, x)), \
            np.sign(x) + x

    x, trace = lbfgs_minimize(fun, np.array([3.0, -2.0]),
                              LbfgsParams(max_steps=50))
    values = [trace.initial_value] + trace.values
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert float(np.max(np.abs(x))) < 1.0


def test_history_zero_matches_gradient_descent():
    rng = np.random.default_rng(4)
    mat = rng.normal(size=(4, 4))
    psd = mat @ mat.T + np.eye(4)

    def fun(x):
        return 0.5 * float(x @ psd @ x), psd @ x

    x0 = rng.normal(size=4)
    got, _ = lbfgs_minimize(fun, x0, LbfgsParams(max_steps=5, history=0))

    # hand-rolled gradient descent with the same Armijo backtracking
    x = x0.copy()
    for _ in range(5):
        f, g = fun(x)
        if np.linalg.norm(g) == 0:
            break
        t = 1.0
        while True:
            xn = x - t * g
            fn, _ = fun(xn)
            if fn <= f - 1e-4 * t * float(np.dot(g, g)):
                break
            t *= 0.5
        x = xn
    assert np.allclose(got, x, rtol=0, atol=1e-12)


def test_nonfinite_raises_numeric_error():
    calls = {"n": 0}

    def fun(x):
        calls["n"] += 1
        if calls["n"] > 2:
            return float("nan"), np.zeros_like(x)
        return float(np.sum(x ** 2)), 2 * x

    with pytest.raises(NumericError) as excinfo:
        lbfgs_minimize(fun, np.array([4.0]), LbfgsParams(max_steps=10))
    assert excinfo.value.trace is not None


def test_param_validation():
    with pytest.raises(ValueError):
        LbfgsParams(max_steps=0)
    with pytest.raises(ValueError):
        LbfgsParams(contraction=1.0)
    with pytest.raises(ValueError):
        LbfgsParams(sufficient_decrease=0.0)
    with pytest.raises(ValueError):
        LbfgsParams(grad_tol=-1.0)
