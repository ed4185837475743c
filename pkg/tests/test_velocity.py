import numpy as np
import pytest

from fm4pde.training import VelocityNet
from fm4pde.velocity import (GaussianFlow, LinearOU, TrainedVelocity,
                             endpoint_prediction, evaluate, vjp_endpoint, vjp_euler)


def test_linear_ou_evaluate():
    model = LinearOU(2)
    assert np.allclose(evaluate(model, 0.3, np.array([2.0, -1.0])), [-2.0, 1.0])


def test_linear_ou_dissipativity():
    # <x, u(x)> = -||x||^2, the kappa = 1 instance
    model = LinearOU(3)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.standard_normal(3)
        assert np.dot(x, evaluate(model, 0.5, x)) == pytest.approx(-np.dot(x, x))


def test_gaussian_flow_coefficient():
    gf = GaussianFlow(1, mean=0.0, std=1.0)
    assert gf.coefficient(0.5) == pytest.approx(0.0)
    assert gf.coefficient(0.75) == pytest.approx(0.8)
    assert np.allclose(evaluate(gf, 0.5, np.array([3.0])), [0.0])
    assert np.allclose(evaluate(gf, 0.75, np.array([1.0])), [0.8])


def test_gaussian_flow_matches_conditional_regression():
    # Monte-Carlo regression of E[X1 - X0 | X_t ~ x] under the linear path;
    # the conditional mean is linear in x_t, so a symmetric bin adds no bias
    # and the tolerance only needs to cover the binned-mean standard error.
    rng = np.random.default_rng(1)
    m, s, t = 0.4, 0.7, 0.6
    x1 = m + s * rng.standard_normal(2000000)
    x0 = rng.standard_normal(2000000)
    xt = t * x1 + (1 - t) * x0
    target = x1 - x0
    probe = 0.3
    sel = np.abs(xt - probe) < 0.025
    mc = target[sel].mean()
    se = target[sel].std() / np.sqrt(sel.sum())
    gf = GaussianFlow(1, mean=m, std=s)
    assert evaluate(gf, t, np.array([probe]))[0] == pytest.approx(mc, abs=4 * se)


def test_gaussian_flow_ode_transport():
    # 1000 midpoint steps from 4096 standard-normal draws land on N(m, s^2)
    m, s = 0.5, 0.2
    gf = GaussianFlow(1, mean=m, std=s)
    rng = np.random.default_rng(2)
    x = rng.standard_normal(4096)
    n = 1000
    dt = 1.0 / n
    for k in range(n):
        t = k * dt
        xm = x + 0.5 * dt * (gf.coefficient(t) * (x - t * m) + m)
        tm = t + 0.5 * dt
        x = x + dt * (gf.coefficient(tm) * (xm - tm * m) + m)
    assert abs(x.mean() - m) < 0.05 * s
    assert abs(x.std() - s) < 0.05 * s


def test_endpoint_prediction():
    assert np.allclose(endpoint_prediction(LinearOU(1), 0.5, np.array([2.0])), [1.0])
    assert np.allclose(endpoint_prediction(LinearOU(2), 0.0, np.array([3.0, -3.0])), [0.0, 0.0])
    x = np.array([1.7, -0.3])
    assert np.array_equal(endpoint_prediction(GaussianFlow(2), 1.0, x), x)


def test_endpoint_prediction_exact_linear_ou():
    rng = np.random.default_rng(3)
    model = LinearOU(5)
    for t in (0.0, 0.25, 0.5, 0.99):
        x = rng.standard_normal(5)
        assert np.allclose(endpoint_prediction(model, t, x), t * x, atol=1e-15)


def test_vjp_endpoint():
    # J_t = t I for the LinearOU instance
    out = vjp_endpoint(LinearOU(1), 0.4, np.array([2.0]), np.array([5.0]))
    assert np.allclose(out, [2.0])
    v = np.array([1.0, -2.0])
    assert np.array_equal(vjp_endpoint(GaussianFlow(2), 1.0, np.zeros(2), v), v)


def test_vjp_euler():
    out = vjp_euler(LinearOU(2), 0.5, 0.1, np.zeros(2), np.array([1.0, 1.0]))
    assert np.allclose(out, [0.9, 0.9])
    out = vjp_euler(LinearOU(2), 0.5, 1e-12, np.zeros(2), np.array([1.0, 1.0]))
    assert np.allclose(out, [1.0, 1.0], atol=1e-9)


def test_vjp_linearity_decomposition():
    # vjp_endpoint(v) == v + (1 - t) * model.vjp(v) for every backend
    rng = np.random.default_rng(4)
    net = VelocityNet(3, hidden=(8,), n_time_features=4, seed=1)
    for model in (LinearOU(3), GaussianFlow(3, 0.2, 0.5), TrainedVelocity(net)):
        x = rng.standard_normal(3)
        v = rng.standard_normal(3)
        t = 0.3
        expected = v + (1 - t) * np.asarray(model.vjp(t, x, v))
        assert np.allclose(vjp_endpoint(model, t, x, v), expected)


def test_trained_vjps_match_finite_differences():
    rng = np.random.default_rng(5)
    net = VelocityNet(4, hidden=(8, 8), n_time_features=4, seed=2)
    model = TrainedVelocity(net)
    t, dt, h = 0.37, 0.21, 1e-5
    for _ in range(5):
        x = rng.standard_normal(4)
        v = rng.standard_normal(4)
        g = vjp_endpoint(model, t, x, v)
        fd = np.zeros(4)
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            fd[i] = (v @ endpoint_prediction(model, t, x + e)
                     - v @ endpoint_prediction(model, t, x - e)) / (2 * h)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5
        g = vjp_euler(model, t, dt, x, v)
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            up = x + dt * model.evaluate(t, x + e) + e
            dn = x + dt * model.evaluate(t, x - e) - e
            fd[i] = (v @ up - v @ dn) / (2 * h)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


def test_dimension_and_domain_errors():
    model = LinearOU(3)
    with pytest.raises(ValueError):
        evaluate(model, 0.5, np.zeros(4))
    with pytest.raises(ValueError):
        evaluate(model, 1.5, np.zeros(3))
    with pytest.raises(ValueError):
        vjp_endpoint(model, 0.5, np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        vjp_euler(model, 0.5, 0.0, np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        GaussianFlow(2, std=0.0)
