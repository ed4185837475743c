"""Affine conditional-flow schedulers, guidance coefficients, and time grids.

The linear path has alpha_t = t, sigma_t = 1 - t. The score-form guidance
coefficient b_t = (1 - t)/t blows up at t = 0; both mitigations live here:
an eps-stabilized denominator and geometric grids whose steps shrink with t
so that b_t * dt stays bounded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# kind -> (alpha, sigma, alpha_dot, sigma_dot)
_SCHEDULES = {
    "linear": (lambda t: t, lambda t: 1.0 - t, lambda t: 1.0, lambda t: -1.0),
}


@dataclass(frozen=True)
class Scheduler:
    kind: str = "linear"
    eps_stab: float = 1e-3

    def __post_init__(self):
        if self.kind not in _SCHEDULES:
            raise ValueError(f"unknown scheduler kind {self.kind!r}")
        if self.eps_stab < 0:
            raise ValueError("eps_stab must be nonnegative")


def scheduler_eval(sched: Scheduler, t: float):
    """Return (alpha, sigma, alpha_dot, sigma_dot) at time t."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    alpha, sigma, alpha_dot, sigma_dot = _SCHEDULES[sched.kind]
    return alpha(t), sigma(t), alpha_dot(t), sigma_dot(t)


def guidance_coefficients(sched: Scheduler, t: float):
    """Return (a_t, b_t) with the stabilized denominator alpha_t + eps_stab.

    For the linear path this is a_t = 1/(t + eps), b_t = (1 - t)/(t + eps).
    """
    a, s, ad, sd = scheduler_eval(sched, t)
    den = a + sched.eps_stab
    if den <= 0.0:
        raise ValueError("guidance coefficients singular: alpha_t + eps_stab <= 0")
    return ad / den, -(sd * s * a - ad * s * s) / den


class GridViolation(NamedTuple):
    clause: str
    index: int
    detail: str


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing sampling times plus the derived step quantities."""

    times: np.ndarray
    kind: str
    delta_min: float
    t_star: float = 1.0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        object.__setattr__(self, "times", times)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("a grid needs at least two times")
        if np.any(np.diff(times) <= 0):
            raise ValueError("grid times must be strictly increasing")
        if times[0] < 0 or times[-1] > 1 + 1e-12:
            raise ValueError("grid times must lie in [0, 1]")
        if not 0.0 <= self.t_star <= 1.0:
            raise ValueError("t_star must lie in [0, 1]")

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def deltas(self) -> np.ndarray:
        return 1.0 - self.times

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "times": self.times.tolist(),
                           "delta_min": self.delta_min, "t_star": self.t_star},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TimeGrid":
        obj = json.loads(text)
        return cls(times=np.asarray(obj["times"], dtype=np.float64), kind=obj["kind"],
                   delta_min=float(obj["delta_min"]), t_star=float(obj["t_star"]))


def geometric_grid(epsilon: float, t_end: float = 1.0, eta: float = 0.1,
                   t_star: float | None = None) -> TimeGrid:
    """Grid with t_{k+1} = (1 + eta) t_k from epsilon, final node clamped to t_end.

    On the unclamped steps b_t * dt = eta (1 - t) exactly, which keeps the
    guided update bounded despite b_t -> inf as t -> 0.
    """
    if not 0.0 < epsilon < t_end <= 1.0:
        raise ValueError("need 0 < epsilon < t_end <= 1")
    if eta <= 0:
        raise ValueError("eta must be positive")
    times = [epsilon]
    while times[-1] < t_end:
        nxt = (1.0 + eta) * times[-1]
        times.append(t_end if nxt >= t_end else nxt)
    return TimeGrid(np.asarray(times), "geometric", delta_min=1.0 - t_end,
                    t_star=t_end if t_star is None else t_star)


def uniform_grid(t0: float, delta_min: float, n: int, t_star: float = 1.0) -> TimeGrid:
    """N + 1 equally spaced times from t0 to 1 - delta_min."""
    if delta_min <= 0:
        raise ValueError("delta_min must be positive")
    if n < 1:
        raise ValueError("need at least one step")
    if not 0.0 <= t0 < 1.0 - delta_min:
        raise ValueError(f"empty interval: t0={t0}, end={1.0 - delta_min}")
    return TimeGrid(np.linspace(t0, 1.0 - delta_min, n + 1), "uniform",
                    delta_min=delta_min, t_star=t_star)


def hybrid_grid(epsilon: float, eta: float, t_star: float, delta_min: float,
                n_stoch: int) -> TimeGrid:
    """Geometric grid on [epsilon, t_star] stitched to a uniform grid on
    [t_star, 1 - delta_min], with t_star appearing once."""
    if not epsilon < t_star < 1.0 - delta_min:
        raise ValueError("need epsilon < t_star < 1 - delta_min")
    geo = geometric_grid(epsilon, t_end=t_star, eta=eta)
    uni = np.linspace(t_star, 1.0 - delta_min, n_stoch + 1)
    times = np.concatenate([geo.times, uni[1:]])
    return TimeGrid(times, "hybrid", delta_min=delta_min, t_star=t_star)


def validate_grid(grid: TimeGrid, c_delta: float, epsilon0: float) -> list[GridViolation]:
    """Check the stochastic-phase grid assumptions; violations are data, not errors.

    (a) every step is at most epsilon0 / 2,
    (b) steps inside the terminal window t_k >= 1 - epsilon0 satisfy
        dt_k <= c_delta * delta_k,
    (c) the grid stops at or before 1 - delta_min.
    """
    if not 0.0 < c_delta < 0.5:
        raise ValueError("c_delta must lie in (0, 1/2)")
    if epsilon0 <= 0:
        raise ValueError("epsilon0 must be positive")
    out: list[GridViolation] = []
    dts = grid.dts
    deltas = grid.deltas
    if dts.max() > epsilon0 / 2 + 1e-15:
        k = int(np.argmax(dts))
        out.append(GridViolation("a", k, f"dt={dts[k]:.6g} > epsilon0/2={epsilon0 / 2:.6g}"))
    terminal = np.nonzero(grid.times[:-1] >= 1.0 - epsilon0)[0]
    for k in terminal:
        if dts[k] > c_delta * deltas[k] + 1e-15:
            out.append(GridViolation("b", int(k),
                                     f"dt={dts[k]:.6g} > c_delta*delta={c_delta * deltas[k]:.6g}"))
    if grid.times[-1] > 1.0 - grid.delta_min + 1e-12:
        out.append(GridViolation("c", grid.n_steps,
                                 f"t_N={grid.times[-1]:.6g} > 1 - delta_min={1.0 - grid.delta_min:.6g}"))
    return out
