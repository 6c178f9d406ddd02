import numpy as np
import pytest

from oracles import smooth_reference
from secureplan.dynamics import (
    ControlInput,
    ModelParams,
    RobotState,
    defect,
    derivative,
    derivative_jacobians,
    integrate,
    stopping_interval_1d,
)


def test_derivative_examples():
    assert np.allclose(derivative([0, 0, 0, 1, 0], [0, 0]), [1, 0, 0, 0, 0])
    assert np.allclose(derivative([0, 0, np.pi / 2, 1, 0], [0, 0]), [0, 1, 0, 0, 0], atol=1e-15)
    assert np.allclose(derivative([0, 0, 1.3, 0, 0], [1.0, 0]), [0, 0, 0, 1.0, 0])


def test_jacobians_match_finite_differences(rng):
    x, u = rng.normal(size=5), rng.normal(size=2)
    fx, fu = derivative_jacobians(x, u)
    eps = 1e-6
    for k in range(5):
        d = np.zeros(5)
        d[k] = eps
        assert np.allclose(fx[:, k], (derivative(x + d, u) - derivative(x - d, u)) / (2 * eps), atol=1e-8)
    for k in range(2):
        d = np.zeros(2)
        d[k] = eps
        assert np.allclose(fu[:, k], (derivative(x, u + d) - derivative(x, u - d)) / (2 * eps), atol=1e-8)


def test_integrate_straight_line():
    x = integrate(RobotState(0, 0, 0, 1.0), ControlInput(0, 0), 0.1)
    assert (x.x, x.y) == pytest.approx((0.1, 0.0), abs=1e-15)


def test_integrate_constant_acceleration():
    x = RobotState(0, 0, 0)
    for _ in range(10):
        x = integrate(x, ControlInput(1.0, 0), 0.1)
    assert x.v == pytest.approx(1.0, abs=1e-9)
    assert x.x == pytest.approx(0.5, abs=1e-9)


def test_integrate_circle_closes():
    x = RobotState(0, 0, 0, 1.0, 1.0)
    n = 6284
    dt = 2 * np.pi / n
    for _ in range(n):
        x = integrate(x, ControlInput(0, 0), dt)
    assert np.hypot(x.x, x.y) < 1e-5


def test_integrate_wraps_heading_and_clamps_speed():
    m = ModelParams()
    x = RobotState(0, 0, 3.1, 1.95, 1.9)
    for _ in range(20):
        x = integrate(x, ControlInput(1.0, 2.0), 0.05, m)
        assert -np.pi < x.heading <= np.pi
        assert abs(x.v) <= m.v_max and abs(x.omega) <= m.omega_max


def test_speed_reversal_restores_double_integrator():
    x0 = RobotState(0.3, -0.2, 0.4, 0.5, -0.3)
    u = ControlInput(0.7, -1.1)
    x1 = integrate(integrate(x0, u, 0.1), ControlInput(-0.7, 1.1), 0.1)
    assert x1.v == pytest.approx(x0.v, abs=1e-6)
    assert x1.omega == pytest.approx(x0.omega, abs=1e-6)


def test_model_params_validation():
    with pytest.raises(ValueError):
        ModelParams(a_max=0.0)
    with pytest.raises(ValueError):
        ModelParams(v_min=3.0)


def test_defect_examples():
    x_i = np.array([0, 0, 0, 1.0, 0])
    x_j = np.array([0.2, 0, 0, 1.0, 0])
    assert np.allclose(defect(x_i, [0, 0], x_j, [0, 0], 0.2), 0, atol=1e-12)
    assert np.allclose(defect(x_i, [0, 0], x_j + [1e-3, 0, 0, 0, 0], [0, 0], 0.2), [1e-3, 0, 0, 0, 0], atol=1e-15)


def test_defect_is_linear_in_second_state(rng):
    x_i, x_j = rng.normal(size=5), rng.normal(size=5)
    u_i, u_j = rng.normal(size=2), rng.normal(size=2)
    h, eps = 0.1, 1e-6
    fx, _ = derivative_jacobians(x_j, u_j)
    for k in range(5):
        d = np.zeros(5)
        d[k] = eps
        col = (defect(x_i, u_i, x_j + d, u_j, h) - defect(x_i, u_i, x_j - d, u_j, h)) / (2 * eps)
        assert np.allclose(col, np.eye(5)[:, k] - 0.5 * h * fx[:, k], atol=1e-8)


def _max_scaled_defect(K: int, T: float = 4.0) -> tuple[float, float]:
    t = np.linspace(0, T, K)
    X, U = smooth_reference(t)
    h = t[1] - t[0]
    z = defect(X[:-1], U[:-1], X[1:], U[1:], h)
    raw = np.linalg.norm(z, axis=1).max()
    return raw / h, raw


def test_defect_order_two():
    ratios = []
    for K in (21, 41, 81):
        ratios.append(_max_scaled_defect(K))
    for (a, _), (b, _) in zip(ratios, ratios[1:]):
        assert 3.0 <= a / b <= 5.0


def test_stopping_interval_examples():
    assert stopping_interval_1d(0, 0, 1) == (0, 0)
    assert stopping_interval_1d(0, 1, 1) == pytest.approx((0, 0.5))
    assert stopping_interval_1d(2, -2, 1) == pytest.approx((0, 2))
    with pytest.raises(ValueError):
        stopping_interval_1d(0, 1, 0)
