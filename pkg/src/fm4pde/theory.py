"""Numerical verification harness for the guided-sampler convergence theory.

Every check runs on the exactly solvable instance: velocity u_t(x) = -x and
quadratic loss L(x) = ||x||^2 / 2, for which endpoint prediction is t x, the
backpropagated guidance gradient is t^2 x, and the stochastic recursion has
the scalar closed form x' = delta' xi + t (t' - zeta t) x. The harness checks
scaling laws (contraction exponents, moment uniformity, steady-state floors)
rather than inequality constants the analysis does not pin down.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .guidance import GuidanceConfig, ObservationSet, pde_loss
from .pde import relative_error, sample_observations
from .samplers import (SamplerConfig, deterministic_step, sample, stochastic_step)
from .scheduler import Scheduler, TimeGrid, geometric_grid, uniform_grid, validate_grid
from .velocity import LinearOU, endpoint_prediction


@dataclass(frozen=True)
class TheoryInstance:
    """LinearOU velocity plus quadratic loss, with grid and guidance settings."""

    dim: int = 1
    epsilon: float = 1e-3
    eta: float = 0.05
    delta_min: float = 0.1
    c_zeta: float = 1.0        # adaptive guidance scale
    zeta: float = 0.05         # constant guidance strength
    trials: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.trials < 1:
            raise ValueError("dim and trials must be at least 1")


def quadratic_guidance(dim: int, clip_norm: float = 1e3):
    """Observation set and weights realizing L(x) = ||x||^2 / 2 exactly.

    Observing zeros at every index gives L_obs = ||x||^2 / d, so the weight
    d / 2 makes the composite loss and its gradient match the quadratic.
    """
    obs = ObservationSet(np.arange(dim), np.zeros(dim), channels=(0,))
    cfg = GuidanceConfig(zeta_obs=dim / 2.0, zeta_pde=0.0, c_zeta=1.0,
                         clip_norm=clip_norm)
    return obs, cfg


@dataclass
class CheckRecord:
    name: str
    analytic: float
    empirical: float
    tolerance: float
    passed: bool
    trials: int
    runtime: float
    provenance: str

    def as_dict(self) -> dict:
        return {"name": self.name, "analytic": self.analytic, "empirical": self.empirical,
                "tolerance": self.tolerance, "passed": bool(self.passed),
                "trials": self.trials, "runtime": self.runtime,
                "provenance": self.provenance}


@dataclass
class VerificationReport:
    records: list = dataclass_field(default_factory=list)

    def add(self, *args, **kwargs) -> CheckRecord:
        rec = CheckRecord(*args, **kwargs)
        self.records.append(rec)
        return rec

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.records)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump([r.as_dict() for r in self.records], fh, sort_keys=True, indent=2)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "analytic", "empirical", "tolerance", "passed",
                             "trials", "runtime", "provenance"])
            for r in self.records:
                writer.writerow([r.name, repr(r.analytic), repr(r.empirical),
                                 repr(r.tolerance), int(r.passed), r.trials,
                                 repr(r.runtime), r.provenance])


# ---------------------------------------------------------------------------
# constant-guidance steady state (exact oracle) and the scalar recursion

def steady_state_loss_constant(delta_min: float, zeta: float) -> float:
    """Closed-form steady-state loss of the constant-guidance 1D recursion.

    V_ss = (t_N^2 / 2) delta_min^2 / (1 - (1 - zeta)^2 t_N^4), t_N = 1 - delta_min.
    """
    if not 0.0 < zeta < 1.0:
        raise ValueError("zeta must lie in (0, 1)")
    if not 0.0 < delta_min <= 0.25:
        raise ValueError("delta_min must lie in (0, 1/4]")
    t_n = 1.0 - delta_min
    return 0.5 * t_n**2 * delta_min**2 / (1.0 - (1.0 - zeta) ** 2 * t_n**4)


def second_moment_fixed_point(delta: float, a: float) -> float:
    """Fixed point of W' = delta^2 + a^2 W."""
    if not abs(a) < 1.0:
        raise ValueError("recursion is not contracting")
    return delta**2 / (1.0 - a * a)


def _adaptive_schedule(delta0: float, delta_min: float, c_delta: float = 0.25,
                       terminal_steps: int = 200) -> np.ndarray:
    deltas = [delta0]
    while deltas[-1] > delta_min:
        deltas.append(max((1.0 - c_delta) * deltas[-1], delta_min))
    deltas.extend([delta_min] * terminal_steps)
    return np.asarray(deltas)


def simulate_1d_recursion(instance: TheoryInstance, mode: str = "constant",
                          trials: int | None = None, method: str = "monte_carlo",
                          rng: np.random.Generator | None = None,
                          burn_in: int = 200):
    """Terminal loss V of the exact scalar recursion, Monte Carlo or propagated.

    ``constant``: repeated terminal-level steps with fixed zeta, the regime in
    which the closed-form steady state applies exactly. ``adaptive``: zeta_k =
    c_zeta delta_k along a geometrically decaying delta schedule that parks at
    delta_min. Returns (V, standard_error); the exact propagation has SE 0.
    """
    if mode not in ("constant", "adaptive"):
        raise ValueError(f"unknown recursion mode {mode!r}")
    trials = instance.trials if trials is None else trials
    if trials < 1:
        raise ValueError("trials must be at least 1")
    d_min = instance.delta_min
    t_n = 1.0 - d_min
    if mode == "constant":
        deltas = np.full(burn_in, d_min)
        coeffs = np.full(burn_in, (1.0 - instance.zeta) * t_n**2)
    else:
        sched = _adaptive_schedule(0.5, d_min, terminal_steps=burn_in)
        deltas = sched[1:]
        t_k = 1.0 - sched[:-1]
        t_next = 1.0 - sched[1:]
        coeffs = t_k * (t_next - instance.c_zeta * sched[:-1] * t_k)
    if method == "exact":
        w = 1.0
        for dlt, a in zip(deltas, coeffs):
            w = dlt * dlt + a * a * w
        return 0.5 * t_n**2 * w, 0.0
    rng = np.random.default_rng(instance.seed) if rng is None else rng
    x = rng.standard_normal(trials)
    for dlt, a in zip(deltas, coeffs):
        x = dlt * rng.standard_normal(trials) + a * x
    vals = 0.5 * t_n**2 * x * x
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(trials))


def verify_lower_bound(delta_mins=(0.05, 0.1, 0.2), zeta_fractions=(0.25, 0.5),
                       trials: int = 10**6, seed: int = 0) -> VerificationReport:
    """Monte-Carlo steady state vs the closed form, plus the delta/40 floor."""
    report = VerificationReport()
    rng = np.random.default_rng(seed)
    for d_min in delta_mins:
        for frac in zeta_fractions:
            zeta = frac * d_min
            inst = TheoryInstance(delta_min=d_min, zeta=zeta, trials=trials)
            start = time.perf_counter()
            analytic = steady_state_loss_constant(d_min, zeta)
            emp, se = simulate_1d_recursion(inst, "constant", trials, rng=rng)
            elapsed = time.perf_counter() - start
            report.add(f"steady_state d={d_min:g} zeta={zeta:g}", analytic, emp,
                       3.0 * se, abs(emp - analytic) <= 3.0 * se, trials, elapsed,
                       "closed form vs Monte Carlo, 3 SE")
            report.add(f"floor d={d_min:g} zeta={zeta:g}", d_min / 40.0, analytic,
                       0.0, analytic >= d_min / 40.0, 0, 0.0,
                       "V_ss >= delta_min / 40 for zeta <= delta_min / 2")
    return report


# ---------------------------------------------------------------------------
# deterministic contraction

def run_deterministic_quadratic(epsilon: float, eta: float, dim: int = 1,
                                t_end: float = 0.5, x0_value: float = 3.0):
    """Drive the real deterministic sampler on the exact instance from a fixed
    start; returns the quadratic-loss trace V_k = ||x_k||^2 / 2 at every node."""
    grid = geometric_grid(epsilon, t_end=t_end, eta=eta)
    model = LinearOU(dim)
    obs, gcfg = quadratic_guidance(dim)
    cfg = SamplerConfig("deterministic", grid, guidance=gcfg,
                        scheduler=Scheduler(eps_stab=0.0))
    x = np.full(dim, x0_value)
    losses = [0.5 * float(x @ x)]
    for k in range(grid.n_steps):
        t_k = float(grid.times[k])
        dt = float(grid.times[k + 1] - grid.times[k])
        x, _ = deterministic_step(model, cfg.scheduler, t_k, dt, x, obs, None, cfg, k=k)
        losses.append(0.5 * float(x @ x))
    return grid, np.asarray(losses)


def verify_det_contraction(eps_values, eta: float, instance: TheoryInstance,
                           t_end: float = 0.5) -> tuple[float, VerificationReport]:
    """Fit the Phase-A exit loss against epsilon; theory predicts exponent 2 mu = 2.

    The additive floor is estimated as the loss at the smallest epsilon and
    subtracted before fitting, so only order-of-growth is asserted.
    """
    eps_values = sorted(float(e) for e in eps_values)
    if len(eps_values) < 3:
        raise ValueError("need at least three epsilon values for a slope fit")
    report = VerificationReport()
    start = time.perf_counter()
    exit_losses = {}
    for eps in eps_values:
        grid, losses = run_deterministic_quadratic(eps, eta, instance.dim, t_end)
        exit_losses[eps] = losses[-1]
        # Phase-A descent: with the floor this small the trace should fall at
        # every step; count violations against the recursion's tolerance.
        floor = losses.min()
        rho = 2.0 * grid.dts * (1.0 - grid.times[:-1]) / np.maximum(grid.times[:-1], 1e-12)
        active = losses[:-1] > 2.0 * floor / np.maximum(rho, 1e-12)
        violations = int(np.sum(np.diff(losses)[active] >= 0))
        report.add(f"phaseA_monotone eps={eps:g}", 0.0, float(violations), 0.0,
                   violations == 0, 0, 0.0, "V decreasing while above 2 C~ / rho")
    floor = min(exit_losses.values())
    xs, ys = [], []
    for eps in eps_values[1:]:
        lifted = exit_losses[eps] - floor
        if lifted > 0:
            xs.append(np.log(eps))
            ys.append(np.log(lifted))
    if len(xs) < 2:
        raise ValueError("degenerate contraction fit")
    slope = float(np.polyfit(xs, ys, 1)[0])
    elapsed = time.perf_counter() - start
    report.add("contraction_exponent", 2.0, slope, 0.4, 1.6 <= slope <= 2.4, 0,
               elapsed, "log V vs log eps slope, floor-corrected")
    eta_max = 0.5  # 1 / (2 mu) with mu = 1 for the quadratic loss
    report.add("eta_admissible", eta_max, eta, 0.0, eta < eta_max, 0, 0.0,
               "geometric step parameter below the admissibility bound")
    return slope, report


# ---------------------------------------------------------------------------
# moment bounds (vectorized twin of the stochastic sampler on this instance)

def stochastic_quadratic_moments(grid: TimeGrid, c_zeta: float, dim: int, trials: int,
                                 rng: np.random.Generator, clip_norm: float = 1e3):
    """Per-step E||x||^2 and E||x||^4 across trials for the exact instance.

    Vectorized twin of stochastic_step specialized to LinearOU + quadratic
    loss: endpoint t x, backpropagated gradient t^2 x. Exactness against the
    real sampler is covered by a dedicated equivalence test.
    """
    times = grid.times
    x = rng.standard_normal((trials, dim))
    e2 = np.empty(times.size)
    e4 = np.empty(times.size)

    def record(i):
        sq = np.sum(x * x, axis=1)
        e2[i] = sq.mean()
        e4[i] = (sq * sq).mean()

    record(0)
    for k in range(times.size - 1):
        t_k, t_next = times[k], times[k + 1]
        xi = rng.standard_normal((trials, dim))
        x_hat = t_k * x
        g = t_k * x_hat  # J_t^T grad L(x_hat) = t^2 x
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        scale = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
        x = (1.0 - t_next) * xi + t_next * x_hat - c_zeta * (1.0 - t_k) * g * scale
        record(k + 1)
    return e2, e4


def moment_grid(delta_min: float, c_delta: float = 0.45) -> TimeGrid:
    """Uniform grid to 1 - delta_min that satisfies the refinement assumption."""
    n = max(64, int(np.ceil(3.0 / delta_min)))
    grid = uniform_grid(0.0, delta_min, n)
    if validate_grid(grid, c_delta=c_delta, epsilon0=0.2):
        raise ValueError("moment grid failed its own validation")
    return grid


def verify_moment_bounds(instance: TheoryInstance, delta_min_values, trials: int,
                         ) -> VerificationReport:
    """Sup-over-k second/fourth moments should not grow as delta_min shrinks."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    report = VerificationReport()
    rng = np.random.default_rng(instance.seed)
    sup2, sup4 = {}, {}
    start = time.perf_counter()
    for d_min in delta_min_values:
        grid = moment_grid(d_min)
        e2, e4 = stochastic_quadratic_moments(grid, instance.c_zeta, instance.dim,
                                              trials, rng)
        sup2[d_min] = float(e2.max())
        sup4[d_min] = float(e4.max())
    elapsed = time.perf_counter() - start
    for name, sup in (("second", sup2), ("fourth", sup4)):
        spread = (max(sup.values()) - min(sup.values())) / min(sup.values())
        report.add(f"moment_{name}_spread", 0.0, spread, 0.2, spread < 0.2, trials,
                   elapsed, f"sup_k E||x||^{2 if name == 'second' else 4} across "
                            f"delta_min {sorted(sup)} varies < 20%")
    # Constant-guidance comparison: the terminal second moment is floored by
    # the Appendix steady state.
    d_min = min(delta_min_values)
    zeta = d_min / 2.0
    inst = TheoryInstance(delta_min=d_min, zeta=zeta, trials=trials, seed=instance.seed)
    v_emp, se = simulate_1d_recursion(inst, "constant", trials, rng=rng)
    floor = steady_state_loss_constant(d_min, zeta)
    report.add(f"constant_floor d={d_min:g}", floor, v_emp, 3.0 * se,
               v_emp >= floor - 3.0 * se, trials, 0.0,
               "terminal loss >= steady state within Monte Carlo error")
    return report


def verify_adaptive_scaling(delta_mins=(0.2, 0.1, 0.05), c_zeta: float = 1.0,
                            ) -> tuple[float, VerificationReport]:
    """Terminal loss under adaptive guidance scales linearly with delta_min."""
    report = VerificationReport()
    start = time.perf_counter()
    vals = []
    for d_min in sorted(delta_mins):
        inst = TheoryInstance(delta_min=d_min, c_zeta=c_zeta)
        v, _ = simulate_1d_recursion(inst, "adaptive", method="exact")
        vals.append((d_min, v))
    xs = np.log([v[0] for v in vals])
    ys = np.log([v[1] for v in vals])
    slope = float(np.polyfit(xs, ys, 1)[0])
    elapsed = time.perf_counter() - start
    report.add("adaptive_loss_slope", 1.0, slope, 0.15, abs(slope - 1.0) <= 0.15, 0,
               elapsed, "log V vs log delta_min slope under adaptive guidance")
    return slope, report


# ---------------------------------------------------------------------------
# sampler-mix comparison

MIX_COLUMNS = ("Sampler", "Loss(Coef)", "Loss(Sol)", "ObsLoss(Coef)", "ObsLoss(Sol)",
               "PDELoss")

DEFAULT_MIXES = ((0.0, "det_first"), (0.2, "det_first"), (0.3, "det_first"),
                 (0.2, "stoch_first"), (1.0, "det_first"))


def mix_label(fraction: float, ordering: str) -> str:
    if fraction == 0.0:
        return "Pure S"
    if fraction == 1.0:
        return "Pure D"
    f = f"{fraction:g}"
    g = f"{1.0 - fraction:g}"
    return f"{f}D+{g}S" if ordering == "det_first" else f"{g}S+{f}D"


def _mix_schedule(fraction: float, ordering: str, n_steps: int, epsilon: float,
                  delta_min: float, t_star: float):
    """Times plus per-step phases for one mixing ratio and ordering."""
    if fraction <= 0.0:
        times = np.linspace(0.0, 1.0 - delta_min, n_steps + 1)
        return times, ["stoch"] * n_steps
    if fraction >= 1.0:
        eta = (1.0 / epsilon) ** (1.0 / n_steps) - 1.0
        times = np.minimum(epsilon * (1.0 + eta) ** np.arange(n_steps + 1), 1.0)
        times[-1] = 1.0
        return times, ["det"] * n_steps
    n_det = max(1, round(fraction * n_steps))
    n_other = n_steps - n_det
    if ordering == "det_first":
        eta = (t_star / epsilon) ** (1.0 / n_det) - 1.0
        geo = epsilon * (1.0 + eta) ** np.arange(n_det + 1)
        geo[-1] = t_star
        uni = np.linspace(t_star, 1.0 - delta_min, n_other + 1)
        times = np.concatenate([geo, uni[1:]])
        return times, ["det"] * n_det + ["stoch"] * n_other
    if ordering == "stoch_first":
        uni1 = np.linspace(0.0, t_star, n_other + 1)
        uni2 = np.linspace(t_star, 1.0, n_det + 1)
        times = np.concatenate([uni1, uni2[1:]])
        return times, ["stoch"] * n_other + ["det"] * n_det
    raise ValueError(f"unknown ordering {ordering!r}")


def run_mix(model, obs, problem, guidance: GuidanceConfig, times, phases, seed: int,
            stats=None, scheduler: Scheduler | None = None):
    """Drive the real step functions through an explicit phase schedule."""
    from .samplers import _GuidanceContext  # shared normalization plumbing
    cfg = SamplerConfig("hybrid", TimeGrid(times, "hybrid", delta_min=1.0 - times[-1]
                                           if times[-1] < 1 else 1e-9),
                        guidance=guidance,
                        scheduler=scheduler or Scheduler(eps_stab=1e-3), seed=seed)
    ctx = _GuidanceContext(obs, problem, guidance, stats)
    rng = np.random.default_rng(seed)
    dim = problem.layout.dim if problem is not None else model.dim
    x = rng.standard_normal(dim)
    for k, phase in enumerate(phases):
        t_k, t_next = float(times[k]), float(times[k + 1])
        if phase == "det":
            x, _ = deterministic_step(model, cfg.scheduler, t_k, t_next - t_k, x, obs,
                                      problem, cfg, k=k, first_step=(k == 0), _ctx=ctx)
        else:
            x, _, _ = stochastic_step(model, t_k, t_next, x, obs, problem, cfg, rng,
                                      k=k, _ctx=ctx)
    out = endpoint_prediction(model, float(times[-1]), x) if phases[-1] == "stoch" else x
    if problem is not None:
        from .fields import flat_statistics, identity_statistics
        layout = problem.layout
        used = stats if stats is not None else identity_statistics(layout.channels)
        mean, std = flat_statistics(layout, used)
        return layout.unflatten(out * std + mean)
    return out


def compare_sampler_mixes(model, problem, stats, test_fields, mixes=DEFAULT_MIXES,
                          seeds=range(10), guidance: GuidanceConfig | None = None,
                          n_obs: int = 500, n_steps: int = 200, epsilon: float = 1e-3,
                          delta_min: float = 0.01, t_star: float = 0.5):
    """Replicate the sampler-mix comparison: per-mix medians of field errors,
    per-channel observation MSE, and the residual loss, over matched seeds."""
    guidance = guidance or GuidanceConfig()
    rows = []
    for fraction, ordering in mixes:
        times, phases = _mix_schedule(fraction, ordering, n_steps, epsilon,
                                      delta_min, t_star)
        metrics = {key: [] for key in MIX_COLUMNS[1:]}
        for seed in seeds:
            truth = test_fields[seed % len(test_fields)]
            obs_rng = np.random.default_rng(10_000 + seed)
            obs = sample_observations(truth, n_obs, (problem.coef_channel,), obs_rng)
            pred = run_mix(model, obs, problem, guidance, times, phases, seed, stats)
            coef, sol = problem.coef_channel, problem.sol_channel
            spatial = obs.indices % problem.layout.points
            metrics["Loss(Coef)"].append(relative_error(pred[coef], truth[coef]))
            metrics["Loss(Sol)"].append(relative_error(pred[sol], truth[sol]))
            metrics["ObsLoss(Coef)"].append(float(np.mean(
                (pred[coef].ravel()[spatial] - truth[coef].ravel()[spatial]) ** 2)))
            metrics["ObsLoss(Sol)"].append(float(np.mean(
                (pred[sol].ravel()[spatial] - truth[sol].ravel()[spatial]) ** 2)))
            metrics["PDELoss"].append(pde_loss(pred.ravel(), problem))
        rows.append({"Sampler": mix_label(fraction, ordering),
                     **{key: float(np.median(vals)) for key, vals in metrics.items()}})
    return rows


def mix_rows_to_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MIX_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
