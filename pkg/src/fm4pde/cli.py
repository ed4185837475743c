"""Command-line entry point: reproducible data generation, training, sampling,
and theory verification driven by a JSON config.

Every command is a deterministic function of its config plus on-disk inputs.
Wall-clock timings never enter the numeric artifacts; they go to run.log in
the output directory. Exit codes: 0 success, 1 check failure, 2 config error,
3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pde, theory
from .fields import normalize_field
from .guidance import GuidanceConfig
from .samplers import (DivergenceError, SamplerConfig, sample, unguided_config)
from .scheduler import Scheduler, geometric_grid, hybrid_grid, uniform_grid
from .training import (TrainConfig, TrainingDiverged, VelocityNet, WeightFormatError,
                       load_weights, save_weights, train)
from .velocity import TrainedVelocity

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

# Guidance weights and priors are problem-dependent tuning knobs; these
# defaults were calibrated on the desk-scale grids.
PROBLEM_DEFAULTS = {
    "poisson": {"grf": {"length_scale": 0.15, "variance": 1.0, "mean": 0.0, "binarize": None},
                "zeta_obs": 600.0, "zeta_pde": 0.02},
    "helmholtz": {"grf": {"length_scale": 0.15, "variance": 1.0, "mean": 0.0, "binarize": None},
                  "zeta_obs": 600.0, "zeta_pde": 0.02},
    "darcy": {"grf": {"length_scale": 0.15, "variance": 1.0, "mean": 0.0,
                      "binarize": [4.0, 12.0, 0.5]},
              "zeta_obs": 600.0, "zeta_pde": 0.02},
    "burgers": {"grf": {"length_scale": 0.1, "variance": 0.0144, "mean": 0.0,
                        "binarize": None},
                "zeta_obs": 300.0, "zeta_pde": 1.0},
}


class ConfigError(ValueError):
    pass


def default_config(kind: str = "poisson") -> dict:
    if kind not in PROBLEM_DEFAULTS:
        raise ConfigError(f"problem.kind: unknown kind {kind!r}")
    pdft = PROBLEM_DEFAULTS[kind]
    return {
        "seed": 0,
        "paths": {"data_dir": "data", "model_path": "model.fmw", "output_dir": "out"},
        "problem": {"kind": kind, "size": 32, "nx": 128, "nt": 128, "k": 1.0, "q": 1.0,
                    "nu": 0.01, "horizon": 1.0, "grf": copy.deepcopy(pdft["grf"]),
                    "train_count": 2000, "test_count": 20, "test_scale": 1.5},
        "training": {"batch_size": 64, "steps": 20000, "learning_rate": 1e-3,
                     "beta1": 0.9, "beta2": 0.999, "hidden": [256, 256, 256],
                     "time_features": 16, "augment": True, "resume": False},
        "sampling": {"mode": "stochastic", "task": "forward", "n_observations": 500,
                     "n_steps": 25, "epsilon": 1e-3, "eta": 0.05, "t_star": 0.5,
                     "delta_min": 0.02, "eps_stab": 1e-3,
                     "zeta_obs": pdft["zeta_obs"], "zeta_pde": pdft["zeta_pde"],
                     "c_zeta": 1.0, "clip_norm": 1e3, "unguided_first_step": False,
                     "unguided_baseline": False},
        "verify": {"trials": 1000000, "delta_mins": [0.05, 0.1, 0.2],
                   "zeta_fractions": [0.25, 0.5], "eps_values": [1e-2, 1e-3, 1e-4],
                   "eta": 0.05, "moment_delta_mins": [0.2, 0.1, 0.05, 0.02],
                   "moment_trials": 10000, "moment_dim": 4,
                   "adaptive_delta_mins": [0.2, 0.1, 0.05], "c_zeta": 1.0,
                   "mix_seeds": 10, "mix_steps": 200, "mix_obs": 500},
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(f"{here}: unknown configuration key")
        if isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = _merge(out[key], val, here)
        else:
            out[key] = val
    return out


def _set_dotted(cfg: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"{dotted}: unknown configuration path")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"{dotted}: unknown configuration key")
    try:
        node[keys[-1]] = json.loads(raw)
    except json.JSONDecodeError:
        node[keys[-1]] = raw


def load_config(path: str | None, overrides) -> dict:
    user: dict = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config {path}: {exc}") from exc
    kind = user.get("problem", {}).get("kind", "poisson")
    cfg = _merge(default_config(kind), user)
    for dotted, raw in overrides:
        _set_dotted(cfg, dotted, raw)
    return cfg


def build_problem(cfg: dict) -> pde.PDEProblem:
    prob = cfg["problem"]
    kind = prob["kind"]
    if kind == "poisson":
        return pde.poisson_problem(prob["size"])
    if kind == "helmholtz":
        return pde.helmholtz_problem(prob["size"], prob["k"])
    if kind == "darcy":
        return pde.darcy_problem(prob["size"], prob["q"])
    if kind == "burgers":
        return pde.burgers_problem(prob["nx"], prob["nt"], prob["nu"], prob["horizon"])
    raise ConfigError(f"problem.kind: unknown kind {kind!r}")


def build_sampler_config(cfg: dict, seed: int) -> SamplerConfig:
    smp = cfg["sampling"]
    guidance = GuidanceConfig(zeta_obs=smp["zeta_obs"], zeta_pde=smp["zeta_pde"],
                              c_zeta=smp["c_zeta"], clip_norm=smp["clip_norm"])
    sched = Scheduler(eps_stab=smp["eps_stab"])
    mode = smp["mode"]
    if mode == "deterministic":
        grid = geometric_grid(smp["epsilon"], 1.0, smp["eta"])
    elif mode == "stochastic":
        grid = uniform_grid(0.0, smp["delta_min"], smp["n_steps"])
    elif mode == "hybrid":
        grid = hybrid_grid(smp["epsilon"], smp["eta"], smp["t_star"], smp["delta_min"],
                           smp["n_steps"])
    else:
        raise ConfigError(f"sampling.mode: unknown mode {mode!r}")
    return SamplerConfig(mode, grid, guidance=guidance, scheduler=sched, seed=seed,
                         unguided_first_step=smp["unguided_first_step"])


def _child_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=key).generate_state(1)[0])


def _task_channels(task: str, problem: pde.PDEProblem) -> tuple:
    if task == "forward":
        chans = (problem.coef_channel,)
    elif task == "inverse":
        chans = (problem.sol_channel,)
    elif task == "joint":
        chans = tuple(sorted({problem.coef_channel, problem.sol_channel}))
    else:
        raise ConfigError(f"sampling.task: unknown task {task!r}")
    return tuple(sorted(set(chans)))


def cmd_gen_data(cfg: dict) -> int:
    problem = build_problem(cfg)
    grf = pde.grf_from_dict(cfg["problem"]["grf"])
    out = Path(cfg["paths"]["data_dir"])
    pde.write_dataset(out, problem, grf, cfg["problem"]["train_count"],
                      cfg["problem"]["test_count"], cfg["seed"],
                      cfg["problem"]["test_scale"])
    print(f"dataset {out} hash {pde.dataset_hash(out)}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    data = pde.load_dataset(cfg["paths"]["data_dir"])
    tr = cfg["training"]
    flat = np.stack([normalize_field(f, data["stats"]).ravel() for f in data["train"]])
    model_path = Path(cfg["paths"]["model_path"])
    if tr["resume"] and model_path.exists():
        net = load_weights(model_path)
    else:
        net = VelocityNet(flat.shape[1], tuple(tr["hidden"]), tr["time_features"],
                          seed=cfg["seed"])
    tcfg = TrainConfig(batch_size=tr["batch_size"], steps=tr["steps"],
                       learning_rate=tr["learning_rate"], beta1=tr["beta1"],
                       beta2=tr["beta2"], seed=cfg["seed"])
    augment = pde.symmetry_augmentation(data["problem"]) if tr["augment"] else None
    net, trace = train(net, flat, tcfg, augment=augment)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(net, model_path)
    out_dir = Path(cfg["paths"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "loss_trace.csv", "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i},{repr(v)}\n" for i, v in enumerate(trace))
    print(f"trained {tcfg.steps} steps, final loss {trace[-1]:.6f} -> {model_path}")
    return EXIT_OK


def cmd_sample(cfg: dict) -> int:
    data = pde.load_dataset(cfg["paths"]["data_dir"])
    problem, stats = data["problem"], data["stats"]
    net = load_weights(cfg["paths"]["model_path"])
    if net.dim != problem.layout.dim:
        raise ConfigError("model dimension does not match the dataset problem")
    model = TrainedVelocity(net)
    smp = cfg["sampling"]
    channels = _task_channels(smp["task"], problem)
    out_dir = Path(cfg["paths"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    per_sample = []
    n_eval = min(len(data["test"]), cfg["problem"]["test_count"])
    for i in range(n_eval):
        truth = data["test"][i]
        obs_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg["seed"], spawn_key=(2, i)))
        obs = pde.sample_observations(truth, smp["n_observations"], channels, obs_rng)
        scfg = build_sampler_config(cfg, seed=_child_seed(cfg["seed"], 3, i))
        pred, trace = sample(model, obs, problem, scfg, stats=stats)
        pde.write_field(out_dir / f"pred_{i:05d}.field", pred)
        trace.to_csv(out_dir / f"trace_{i:05d}.csv")
        row = {
            "index": i,
            "rel_error_coef": pde.relative_error(pred[problem.coef_channel],
                                                 truth[problem.coef_channel]),
            "rel_error_sol": pde.relative_error(pred[problem.sol_channel],
                                                truth[problem.sol_channel]),
            "final_L_obs": trace.records[-1].loss_obs,
            "final_L_pde": trace.records[-1].loss_pde,
        }
        if smp["unguided_baseline"]:
            base_cfg = replace(scfg, guidance=unguided_config(scfg).guidance)
            _, base_trace = sample(model, obs, problem, base_cfg, stats=stats)
            row["final_L_obs_unguided"] = base_trace.records[-1].loss_obs
            row["final_L_pde_unguided"] = base_trace.records[-1].loss_pde
        per_sample.append(row)
    metrics = {
        "task": smp["task"],
        "n_observations": smp["n_observations"],
        "samples": per_sample,
        "mean_rel_error_coef": float(np.mean([r["rel_error_coef"] for r in per_sample])),
        "mean_rel_error_sol": float(np.mean([r["rel_error_sol"] for r in per_sample])),
        "median_final_L_obs": float(np.median([r["final_L_obs"] for r in per_sample])),
    }
    if smp["unguided_baseline"]:
        med_base = float(np.median([r["final_L_obs_unguided"] for r in per_sample]))
        metrics["median_final_L_obs_unguided"] = med_base
        metrics["obs_improvement_factor"] = med_base / max(metrics["median_final_L_obs"],
                                                           1e-300)
    (out_dir / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2))
    print(f"sampled {n_eval} test fields: mean rel err "
          f"coef {metrics['mean_rel_error_coef']:.4f} "
          f"sol {metrics['mean_rel_error_sol']:.4f}")
    return EXIT_OK


def _strip_runtimes(report: theory.VerificationReport):
    """Timings go to run.log, not into the numeric artifacts."""
    lines = [f"{r.name}: {r.runtime:.3f}s" for r in report.records]
    for rec in report.records:
        rec.runtime = 0.0
    return lines


def _write_report(report: theory.VerificationReport, out_dir: Path, name: str,
                  log_lines: list) -> None:
    log_lines += _strip_runtimes(report)
    report.to_json(out_dir / f"verify_{name}.json")
    report.to_csv(out_dir / f"verify_{name}.csv")
    for rec in report.records:
        print(f"[{'PASS' if rec.passed else 'FAIL'}] {name}: {rec.name} "
              f"(analytic {rec.analytic:.6g}, empirical {rec.empirical:.6g})")


def cmd_verify(cfg: dict, which: str) -> int:
    ver = cfg["verify"]
    out_dir = Path(cfg["paths"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    ok = True
    log_lines: list[str] = []
    if which in ("lower-bound", "all"):
        report = theory.verify_lower_bound(ver["delta_mins"], ver["zeta_fractions"],
                                           ver["trials"], seed=cfg["seed"])
        _, adaptive = theory.verify_adaptive_scaling(ver["adaptive_delta_mins"],
                                                     ver["c_zeta"])
        report.records.extend(adaptive.records)
        _write_report(report, out_dir, "lower_bound", log_lines)
        ok &= report.all_passed
    if which in ("contraction", "all"):
        inst = theory.TheoryInstance(dim=1, eta=ver["eta"])
        _, report = theory.verify_det_contraction(ver["eps_values"], ver["eta"], inst)
        _write_report(report, out_dir, "contraction", log_lines)
        ok &= report.all_passed
    if which in ("moments", "all"):
        inst = theory.TheoryInstance(dim=ver["moment_dim"], c_zeta=ver["c_zeta"],
                                     seed=cfg["seed"])
        report = theory.verify_moment_bounds(inst, ver["moment_delta_mins"],
                                             ver["moment_trials"])
        _write_report(report, out_dir, "moments", log_lines)
        ok &= report.all_passed
    if which in ("mixes", "all"):
        model_path = Path(cfg["paths"]["model_path"])
        if not model_path.exists():
            raise ConfigError(f"verify mixes needs a trained model at {model_path}")
        data = pde.load_dataset(cfg["paths"]["data_dir"])
        model = TrainedVelocity(load_weights(model_path))
        smp = cfg["sampling"]
        guidance = GuidanceConfig(zeta_obs=smp["zeta_obs"], zeta_pde=smp["zeta_pde"],
                                  c_zeta=smp["c_zeta"], clip_norm=smp["clip_norm"])
        rows = theory.compare_sampler_mixes(model, data["problem"], data["stats"],
                                            data["test"], seeds=range(ver["mix_seeds"]),
                                            guidance=guidance, n_obs=ver["mix_obs"],
                                            n_steps=ver["mix_steps"])
        theory.mix_rows_to_csv(rows, out_dir / "verify_mixes.csv")
        by_label = {r["Sampler"]: r["Loss(Sol)"] for r in rows}
        det_first = [v for k, v in by_label.items() if k.endswith("S") and k != "Pure S"]
        stoch_first = [v for k, v in by_label.items() if k.endswith("D") and k != "Pure D"]
        ordered = (max(det_first) < min(stoch_first) < by_label["Pure D"]
                   and by_label["Pure S"] <= 1.25 * min(det_first)) \
            if det_first and stoch_first else False
        print(f"[{'PASS' if ordered else 'FAIL'}] mixes: qualitative ordering "
              f"PureS <~ D->S < S->D < PureD")
        for row in rows:
            print("  " + ", ".join(f"{k}={row[k]:.4g}" if k != "Sampler" else row[k]
                                   for k in theory.MIX_COLUMNS))
        ok &= ordered
    if log_lines:
        with open(out_dir / "run.log", "a") as fh:
            fh.write("\n".join(log_lines) + "\n")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_report(cfg: dict) -> int:
    out_dir = Path(cfg["paths"]["output_dir"])
    found = False
    for path in sorted(out_dir.glob("verify_*.json")):
        found = True
        records = json.loads(path.read_text())
        print(f"{path.name}:")
        for rec in records:
            print(f"  [{'PASS' if rec['passed'] else 'FAIL'}] {rec['name']}: "
                  f"analytic {rec['analytic']:.6g} empirical {rec['empirical']:.6g}")
    metrics_path = out_dir / "metrics.json"
    if metrics_path.exists():
        found = True
        metrics = json.loads(metrics_path.read_text())
        print(f"metrics.json: task {metrics['task']}, "
              f"mean rel err coef {metrics['mean_rel_error_coef']:.4f}, "
              f"sol {metrics['mean_rel_error_sol']:.4f}")
    if not found:
        print(f"no artifacts found under {out_dir}")
    return EXIT_OK


def _parse_args(argv):
    parser = argparse.ArgumentParser(prog="fm4pde",
                                     description="Guided flow matching for PDE "
                                                 "reconstruction from sparse observations")
    parser.add_argument("--config", default=None, help="JSON config path")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "sample", "report"):
        sub.add_parser(name)
    verify = sub.add_parser("verify")
    verify.add_argument("which", nargs="?", default="all",
                        choices=["lower-bound", "contraction", "moments", "mixes", "all"])
    args, unknown = parser.parse_known_args(argv)
    overrides = []
    i = 0
    while i < len(unknown):
        tok = unknown[i]
        if tok.startswith("--") and "." in tok:
            if "=" in tok:
                dotted, raw = tok[2:].split("=", 1)
            else:
                if i + 1 >= len(unknown):
                    raise ConfigError(f"{tok}: missing value")
                dotted, raw = tok[2:], unknown[i + 1]
                i += 1
            overrides.append((dotted, raw))
        else:
            raise ConfigError(f"unrecognized argument {tok!r}")
        i += 1
    return args, overrides


def main(argv=None) -> int:
    try:
        args, overrides = _parse_args(sys.argv[1:] if argv is None else argv)
        cfg = load_config(args.config, overrides)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "sample":
            return cmd_sample(cfg)
        if args.command == "verify":
            return cmd_verify(cfg, args.which)
        if args.command == "report":
            return cmd_report(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, FileNotFoundError, WeightFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pde.SolverError, pde.StabilityError, DivergenceError, TrainingDiverged,
            FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
