"""Composite guidance losses, their analytic state gradients, and clipping.

The sampling loss is L = zeta_obs * L_obs + zeta_pde * L_pde. Gradients are
exact: the observation term is a scatter, the residual term goes through the
problem's stencil adjoint. No autodiff framework is involved, so these also
serve as the reference the finite-difference tests check against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class ObservationSet:
    """Sparse point observations: sorted unique flat indices plus values.

    ``channels`` records which field channels the indices fall in; coefficient
    observations pose the forward problem, solution observations the inverse.
    """

    def __init__(self, indices, values, channels=(0,)):
        idx = np.asarray(indices, dtype=np.int64).ravel()
        val = np.asarray(values, dtype=np.float64).ravel()
        if idx.size != val.size:
            raise ValueError("indices and values must have equal length")
        order = np.argsort(idx, kind="stable")
        idx, val = idx[order], val[order]
        if idx.size:
            if idx[0] < 0:
                raise ValueError("indices must be nonnegative")
            if np.any(np.diff(idx) == 0):
                raise ValueError("indices must be unique")
        if not np.all(np.isfinite(val)):
            raise ValueError("observation values must be finite")
        self.indices = idx
        self.values = val
        self.channels = tuple(int(c) for c in channels)

    @property
    def n(self) -> int:
        return int(self.indices.size)

    def to_json(self) -> str:
        return json.dumps({"indices": self.indices.tolist(), "values": self.values.tolist(),
                           "channels": list(self.channels)}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ObservationSet":
        obj = json.loads(text)
        return cls(obj["indices"], obj["values"], tuple(obj["channels"]))


@dataclass(frozen=True)
class GuidanceConfig:
    zeta_obs: float = 1.0
    zeta_pde: float = 0.1
    c_zeta: float = 1.0       # adaptive guidance scale for the stochastic sampler
    clip_norm: float = 1e3

    def __post_init__(self):
        if self.zeta_obs < 0 or self.zeta_pde < 0 or self.c_zeta < 0:
            raise ValueError("guidance weights must be nonnegative")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")


def _check_obs(x: np.ndarray, obs: ObservationSet) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if obs.n == 0:
        raise ValueError("empty observation set; disable the term instead")
    if obs.indices[-1] >= x.size:
        raise ValueError(f"observation index {obs.indices[-1]} out of bounds for size {x.size}")
    return x


def observation_loss(x: np.ndarray, obs: ObservationSet) -> float:
    """Mean squared deviation at the observed indices."""
    x = _check_obs(x, obs)
    r = x[obs.indices] - obs.values
    return float(np.dot(r, r) / obs.n)


def observation_loss_grad(x: np.ndarray, obs: ObservationSet) -> np.ndarray:
    """(2/n) P^T (P x - x_obs); zero away from observed indices."""
    x = _check_obs(x, obs)
    g = np.zeros_like(x)
    g[obs.indices] = (2.0 / obs.n) * (x[obs.indices] - obs.values)
    return g


def pde_loss(x: np.ndarray, problem) -> float:
    """Mean squared finite-difference residual over the problem's stencil domain."""
    fields = problem.layout.unflatten(np.asarray(x, dtype=np.float64))
    r = problem.residual(fields)
    return float(np.mean(r * r))


def pde_loss_grad(x: np.ndarray, problem) -> np.ndarray:
    """Exact gradient of pde_loss via the residual stencil adjoint."""
    fields = problem.layout.unflatten(np.asarray(x, dtype=np.float64))
    r = problem.residual(fields)
    grad_fields = problem.residual_adjoint(fields, (2.0 / r.size) * r)
    return grad_fields.ravel()


def composite_gradient(x: np.ndarray, obs, problem, cfg: GuidanceConfig) -> np.ndarray:
    """zeta_obs * grad L_obs + zeta_pde * grad L_pde, skipping zero-weight terms."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    if cfg.zeta_obs > 0 and obs is not None and obs.n > 0:
        g += cfg.zeta_obs * observation_loss_grad(x, obs)
    if cfg.zeta_pde > 0:
        if problem is None:
            raise ValueError("zeta_pde > 0 requires a PDE problem")
        g += cfg.zeta_pde * pde_loss_grad(x, problem)
    return g


def clip_gradient(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """Rescale g onto the ball of radius clip_norm; direction is preserved."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    g = np.asarray(g, dtype=np.float64)
    nrm = float(np.linalg.norm(g))
    if nrm <= clip_norm:
        return g
    return g * (clip_norm / nrm)


def adaptive_zeta(c_zeta: float, delta_k: float) -> float:
    """Adaptive guidance strength zeta_k = c_zeta * delta_k."""
    if not 0.0 <= delta_k <= 1.0:
        raise ValueError("delta_k must lie in [0, 1]")
    return c_zeta * delta_k
