"""Guided sampling: deterministic optimizer, stochastic sampler with
re-initialization, and the hybrid two-phase driver.

One trajectory is strictly sequential; every step emits a diagnostic record.
States live in normalized space. Observation misfit is evaluated directly in
normalized coordinates (observed values are normalized once up front), while
the PDE residual is evaluated on the denormalized field with the affine chain
rule mapping its gradient back.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dataclass_field, replace

import numpy as np

from .fields import flat_statistics, identity_statistics
from .guidance import (GuidanceConfig, ObservationSet, adaptive_zeta, clip_gradient,
                       observation_loss, observation_loss_grad, pde_loss, pde_loss_grad)
from .scheduler import Scheduler, TimeGrid, guidance_coefficients
from .velocity import endpoint_prediction, evaluate, vjp_endpoint, vjp_euler

MODES = ("deterministic", "stochastic", "hybrid")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, t: float):
        super().__init__(f"sampler state became non-finite at step {step} (t={t:.4g})")
        self.step = step


@dataclass(frozen=True)
class SamplerConfig:
    mode: str
    grid: TimeGrid
    guidance: GuidanceConfig = dataclass_field(default_factory=GuidanceConfig)
    scheduler: Scheduler = dataclass_field(default_factory=Scheduler)
    seed: int = 0
    unguided_first_step: bool = False
    endpoint_gradient_only: bool = False   # ablation: skip the predictor VJP

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown sampler mode {self.mode!r}")


@dataclass(frozen=True)
class StepRecord:
    k: int
    t: float
    loss_obs: float
    loss_pde: float
    grad_norm: float
    clipped: bool
    phase: str


@dataclass
class SampleTrace:
    records: list
    final_state: np.ndarray | None = None
    final_endpoint: np.ndarray | None = None

    def column(self, name: str) -> np.ndarray:
        return np.asarray([getattr(r, name) for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "t", "L_obs", "L_pde", "grad_norm", "clipped", "phase"])
            for r in self.records:
                writer.writerow([r.k, repr(r.t), repr(r.loss_obs), repr(r.loss_pde),
                                 int(r.clipped), r.phase])


class _GuidanceContext:
    """Precomputed normalization plumbing shared by every step of one run."""

    def __init__(self, obs, problem, cfg: GuidanceConfig, stats):
        self.problem = problem
        self.cfg = cfg
        if problem is not None:
            layout = problem.layout
            if stats is None:
                stats = identity_statistics(layout.channels)
            self.flat_mean, self.flat_std = flat_statistics(layout, stats)
        else:
            self.flat_mean = self.flat_std = None
        self.obs = obs
        if obs is not None and obs.n > 0 and self.flat_mean is not None:
            norm_vals = (obs.values - self.flat_mean[obs.indices]) / self.flat_std[obs.indices]
            self.obs = ObservationSet(obs.indices, norm_vals, obs.channels)

    def losses_and_grad(self, x: np.ndarray, need_grad: bool = True):
        """Returns (L_obs, L_pde, composite gradient in normalized coords)."""
        l_obs = l_pde = 0.0
        grad = np.zeros_like(x) if need_grad else None
        if self.obs is not None and self.obs.n > 0:
            l_obs = observation_loss(x, self.obs)
            if need_grad and self.cfg.zeta_obs > 0:
                grad += self.cfg.zeta_obs * observation_loss_grad(x, self.obs)
        if self.problem is not None:
            y = x * self.flat_std + self.flat_mean
            l_pde = pde_loss(y, self.problem)
            if need_grad and self.cfg.zeta_pde > 0:
                grad += self.cfg.zeta_pde * (pde_loss_grad(y, self.problem) * self.flat_std)
        return l_obs, l_pde, grad


def _apply_clip(g: np.ndarray, clip_norm: float):
    nrm = float(np.linalg.norm(g))
    return clip_gradient(g, clip_norm), nrm, nrm > clip_norm


def deterministic_step(model, sched: Scheduler, t_k: float, dt_k: float, x_k: np.ndarray,
                       obs, problem, cfg: SamplerConfig, stats=None, k: int = 0,
                       first_step: bool = False, _ctx=None):
    """One guided Euler step; gradient is the exact VJP through the predictor."""
    ctx = _ctx if _ctx is not None else _GuidanceContext(obs, problem, cfg.guidance, stats)
    if cfg.unguided_first_step and first_step:
        b = 0.0
    else:
        b = guidance_coefficients(sched, t_k)[1]
    x_tilde = x_k + dt_k * evaluate(model, t_k, x_k)
    l_obs, l_pde, gbar = ctx.losses_and_grad(x_tilde)
    g = gbar if cfg.endpoint_gradient_only else vjp_euler(model, t_k, dt_k, x_k, gbar)
    g_clip, gnorm, clipped = _apply_clip(g, cfg.guidance.clip_norm)
    x_next = x_tilde - dt_k * b * g_clip
    if not np.all(np.isfinite(x_next)):
        raise DivergenceError(k, t_k)
    return x_next, StepRecord(k, t_k, l_obs, l_pde, gnorm, clipped, "det")


def stochastic_step(model, t_k: float, t_next: float, x_k: np.ndarray, obs, problem,
                    cfg: SamplerConfig, rng: np.random.Generator, stats=None, k: int = 0,
                    _ctx=None):
    """One re-initialization step: endpoint prediction, noisy interpolation at
    t_next, then an adaptive guided correction with strength c_zeta (1 - t_k)."""
    if not 0.0 <= t_k < t_next <= 1.0:
        raise ValueError(f"need 0 <= t_k < t_next <= 1, got ({t_k}, {t_next})")
    ctx = _ctx if _ctx is not None else _GuidanceContext(obs, problem, cfg.guidance, stats)
    xi = rng.standard_normal(x_k.size)
    x_hat = endpoint_prediction(model, t_k, x_k)
    x_tilde = (1.0 - t_next) * xi + t_next * x_hat
    l_obs, l_pde, gbar = ctx.losses_and_grad(x_hat)
    g = gbar if cfg.endpoint_gradient_only else vjp_endpoint(model, t_k, x_k, gbar)
    g_clip, gnorm, clipped = _apply_clip(g, cfg.guidance.clip_norm)
    zeta_k = adaptive_zeta(cfg.guidance.c_zeta, 1.0 - t_k)
    x_next = x_tilde - zeta_k * g_clip
    if not np.all(np.isfinite(x_next)):
        raise DivergenceError(k, t_k)
    return x_next, StepRecord(k, t_k, l_obs, l_pde, gnorm, clipped, "stoch"), x_hat


def sample(model, obs, problem, cfg: SamplerConfig, stats=None):
    """Run the configured sampler from x0 ~ N(0, I) in normalized space.

    Returns (field, trace). For stochastic and hybrid runs the returned field
    is the endpoint prediction of the final state (the quantity the theory
    bounds); the pure deterministic run returns the final state itself. The
    output is denormalized and shaped by the problem layout when a problem is
    given, and left as a flat vector otherwise.
    """
    times = cfg.grid.times
    rng = np.random.default_rng(cfg.seed)
    dim = problem.layout.dim if problem is not None else model.dim
    if dim != model.dim:
        raise ValueError(f"model dim {model.dim} does not match problem dim {dim}")
    ctx = _GuidanceContext(obs, problem, cfg.guidance, stats)
    x = rng.standard_normal(dim)
    records = []
    last_phase = "det" if cfg.mode == "deterministic" else "stoch"
    for k in range(cfg.grid.n_steps):
        t_k, t_next = float(times[k]), float(times[k + 1])
        det = cfg.mode == "deterministic" or (cfg.mode == "hybrid" and t_k < cfg.grid.t_star)
        if det:
            x, rec = deterministic_step(model, cfg.scheduler, t_k, t_next - t_k, x, obs,
                                        problem, cfg, k=k, first_step=(k == 0), _ctx=ctx)
            last_phase = "det"
        else:
            x, rec, _ = stochastic_step(model, t_k, t_next, x, obs, problem, cfg, rng,
                                        k=k, _ctx=ctx)
            last_phase = "stoch"
        records.append(rec)
    trace = SampleTrace(records, final_state=x.copy())
    if last_phase == "stoch":
        out = endpoint_prediction(model, float(times[-1]), x)
        trace.final_endpoint = out.copy()
    else:
        out = x
    if problem is not None:
        layout = problem.layout
        used = stats if stats is not None else identity_statistics(layout.channels)
        flat_mean, flat_std = flat_statistics(layout, used)
        return layout.unflatten(out * flat_std + flat_mean), trace
    return out, trace


def unguided_config(cfg: SamplerConfig) -> SamplerConfig:
    """The same run with every guidance weight zeroed (baseline pairing)."""
    return replace(cfg, guidance=replace(cfg.guidance, zeta_obs=0.0, zeta_pde=0.0,
                                         c_zeta=0.0))
