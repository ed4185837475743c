"""Velocity-field models with endpoint prediction and exact VJPs.

Three backends share one informal protocol: ``dim``, ``evaluate(t, x)`` and
``vjp(t, x, v)`` returning the Jacobian-transpose product of the raw velocity.
The analytic backends exist so that samplers and the convergence harness can
be checked against closed forms; the trained backend wraps a network.
"""

from __future__ import annotations

import numpy as np


class LinearOU:
    """u_t(x) = -x for all t: the exactly solvable dissipative instance.

    Endpoint prediction collapses to Phi_t(x) = t x and the euler/endpoint
    Jacobians are scalar, which makes every sampler quantity computable by
    hand.
    """

    def __init__(self, dim: int):
        self.dim = int(dim)

    def evaluate(self, t, x):
        return -x

    def vjp(self, t, x, v):
        return -v


class GaussianFlow:
    """Exact marginal velocity carrying N(0, I) to N(mean, std^2 I) on the
    linear path.

    With v(t) = t^2 s^2 + (1 - t)^2 the marginal is N(t m, v(t) I) and the
    transporting field is u_t(x) = c(t) (x - t m) + m, c(t) = (t s^2 - (1 - t)) / v(t).
    """

    def __init__(self, dim: int, mean=0.0, std: float = 1.0):
        if std <= 0:
            raise ValueError("std must be positive")
        self.dim = int(dim)
        self.mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (self.dim,)).copy()
        self.std = float(std)

    def coefficient(self, t: float) -> float:
        s2 = self.std * self.std
        return (t * s2 - (1.0 - t)) / (t * t * s2 + (1.0 - t) ** 2)

    def evaluate(self, t, x):
        return self.coefficient(t) * (x - t * self.mean) + self.mean

    def vjp(self, t, x, v):
        return self.coefficient(t) * v


class TrainedVelocity:
    """Wraps a trained network exposing forward(t, x) and vjp_x(t, x, v)."""

    def __init__(self, net):
        self.net = net
        self.dim = net.dim

    def evaluate(self, t, x):
        return self.net.forward(t, x)

    def vjp(self, t, x, v):
        return self.net.vjp_x(t, x, v)


def _check(model, t: float, x: np.ndarray) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ValueError(f"state shape {x.shape} does not match model dim {model.dim}")
    return x


def evaluate(model, t: float, x: np.ndarray) -> np.ndarray:
    """u_t(x); raises on dimension mismatch or non-finite output."""
    x = _check(model, t, x)
    u = np.asarray(model.evaluate(t, x), dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise FloatingPointError(f"velocity produced non-finite values at t={t}")
    return u


def endpoint_prediction(model, t: float, x: np.ndarray) -> np.ndarray:
    """Phi_t(x) = x + (1 - t) u_t(x); returns x unchanged at t = 1."""
    x = _check(model, t, x)
    if t == 1.0:
        return x.copy()
    return x + (1.0 - t) * evaluate(model, t, x)


def vjp_endpoint(model, t: float, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """(I + (1 - t) grad u_t(x))^T v, the endpoint-prediction Jacobian product."""
    x = _check(model, t, x)
    v = np.asarray(cotangent, dtype=np.float64)
    if v.shape != x.shape:
        raise ValueError("cotangent shape does not match state")
    return v + (1.0 - t) * np.asarray(model.vjp(t, x, v), dtype=np.float64)


def vjp_euler(model, t: float, dt: float, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """(I + dt grad u_t(x))^T v, the Euler-predictor Jacobian product."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = _check(model, t, x)
    v = np.asarray(cotangent, dtype=np.float64)
    if v.shape != x.shape:
        raise ValueError("cotangent shape does not match state")
    return v + dt * np.asarray(model.vjp(t, x, v), dtype=np.float64)
