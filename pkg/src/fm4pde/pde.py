"""Problem definitions, finite-difference residuals and solvers, GRF sampling,
observation drawing, metrics, and dataset generation.

Residuals and ground-truth solvers share the same stencils so that guidance
pulls toward the manifold the data actually lives on. Static problems use a
5-point interior stencil with homogeneous Dirichlet boundaries baked into the
fields; Burgers uses forward time differences and central periodic space
stencils on the full space-time grid.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import FieldLayout, channel_statistics, read_field, write_field
from .guidance import ObservationSet

STATIC_KINDS = ("poisson", "helmholtz", "darcy")


class SolverError(RuntimeError):
    """Ground-truth solve failed (singular system or residual check)."""


class StabilityError(RuntimeError):
    """Explicit time marching violated its stability limit."""


@dataclass(frozen=True)
class PDEProblem:
    kind: str
    shape: tuple          # (ny, nx) for static, (nt, nx) for burgers
    h: float              # spatial spacing
    k: float = 0.0        # helmholtz wavenumber (0 -> poisson)
    q: float = 1.0        # darcy constant source
    nu: float = 0.0       # burgers viscosity
    dtau: float = 0.0     # burgers recorded time step
    n_channels: int = 2
    coef_channel: int = 0
    sol_channel: int = 1

    def __post_init__(self):
        if self.kind not in STATIC_KINDS + ("burgers",):
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.h <= 0:
            raise ValueError("spacing must be positive")
        if self.kind == "burgers" and (self.nu <= 0 or self.dtau <= 0):
            raise ValueError("burgers needs positive viscosity and time step")
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))

    @property
    def layout(self) -> FieldLayout:
        return FieldLayout(self.n_channels, self.shape)

    @property
    def residual_points(self) -> int:
        if self.kind == "burgers":
            return (self.shape[0] - 1) * self.shape[1]
        return (self.shape[0] - 2) * (self.shape[1] - 2)

    def residual(self, fields: np.ndarray) -> np.ndarray:
        fields = np.asarray(fields, dtype=np.float64)
        if fields.shape != (self.n_channels, *self.shape):
            raise ValueError(f"field shape {fields.shape} does not conform to problem")
        if self.kind == "burgers":
            return _burgers_residual(fields[self.sol_channel], self.h, self.dtau, self.nu)
        a = fields[self.coef_channel]
        u = fields[self.sol_channel]
        if self.kind == "darcy":
            return _darcy_residual(a, u, self.h, self.q)
        return _helmholtz_residual(a, u, self.h, self.k)

    def residual_adjoint(self, fields: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """(d residual / d fields)^T cotangent, matching residual() exactly."""
        fields = np.asarray(fields, dtype=np.float64)
        cot = np.asarray(cotangent, dtype=np.float64)
        grad = np.zeros_like(fields)
        if self.kind == "burgers":
            grad[self.sol_channel] = _burgers_adjoint(fields[self.sol_channel], cot,
                                                      self.h, self.dtau, self.nu)
            return grad
        a = fields[self.coef_channel]
        u = fields[self.sol_channel]
        if self.kind == "darcy":
            ga, gu = _darcy_adjoint(a, u, cot, self.h)
        else:
            ga, gu = _helmholtz_adjoint(cot, self.h, self.k, self.shape)
        grad[self.coef_channel] = ga
        grad[self.sol_channel] = gu
        return grad


def poisson_problem(n: int = 32) -> PDEProblem:
    return PDEProblem("poisson", (n, n), h=1.0 / (n - 1))


def helmholtz_problem(n: int = 32, k: float = 1.0) -> PDEProblem:
    return PDEProblem("helmholtz", (n, n), h=1.0 / (n - 1), k=k)


def darcy_problem(n: int = 32, q: float = 1.0) -> PDEProblem:
    return PDEProblem("darcy", (n, n), h=1.0 / (n - 1), q=q)


def burgers_problem(nx: int = 128, nt: int = 128, nu: float = 0.01,
                    horizon: float = 1.0) -> PDEProblem:
    return PDEProblem("burgers", (nt, nx), h=1.0 / nx, nu=nu,
                      dtau=horizon / (nt - 1), n_channels=1,
                      coef_channel=0, sol_channel=0)


def problem_to_dict(problem: PDEProblem) -> dict:
    return {"kind": problem.kind, "shape": list(problem.shape), "h": problem.h,
            "k": problem.k, "q": problem.q, "nu": problem.nu, "dtau": problem.dtau,
            "n_channels": problem.n_channels, "coef_channel": problem.coef_channel,
            "sol_channel": problem.sol_channel}


def problem_from_dict(obj: dict) -> PDEProblem:
    return PDEProblem(kind=obj["kind"], shape=tuple(obj["shape"]), h=obj["h"],
                      k=obj["k"], q=obj["q"], nu=obj["nu"], dtau=obj["dtau"],
                      n_channels=obj["n_channels"], coef_channel=obj["coef_channel"],
                      sol_channel=obj["sol_channel"])


# ---------------------------------------------------------------------------
# residual stencils and their adjoints

def _helmholtz_residual(a, u, h, k):
    lap = (u[2:, 1:-1] + u[:-2, 1:-1] + u[1:-1, 2:] + u[1:-1, :-2]
           - 4.0 * u[1:-1, 1:-1]) / h**2
    return lap + k * k * u[1:-1, 1:-1] - a[1:-1, 1:-1]


def _helmholtz_adjoint(cot, h, k, shape):
    ga = np.zeros(shape)
    gu = np.zeros(shape)
    ga[1:-1, 1:-1] = -cot
    gu[1:-1, 1:-1] += cot * (k * k - 4.0 / h**2)
    w = cot / h**2
    gu[2:, 1:-1] += w
    gu[:-2, 1:-1] += w
    gu[1:-1, 2:] += w
    gu[1:-1, :-2] += w
    return ga, gu


def _darcy_faces(a):
    aC = a[1:-1, 1:-1]
    return (0.5 * (aC + a[1:-1, 2:]), 0.5 * (aC + a[1:-1, :-2]),
            0.5 * (aC + a[2:, 1:-1]), 0.5 * (aC + a[:-2, 1:-1]))


def _darcy_residual(a, u, h, q):
    aE, aW, aN, aS = _darcy_faces(a)
    uC = u[1:-1, 1:-1]
    flux = (aE * (u[1:-1, 2:] - uC) + aW * (u[1:-1, :-2] - uC)
            + aN * (u[2:, 1:-1] - uC) + aS * (u[:-2, 1:-1] - uC))
    return -flux / h**2 - q


def _darcy_adjoint(a, u, cot, h):
    aE, aW, aN, aS = _darcy_faces(a)
    uC = u[1:-1, 1:-1]
    wE = u[1:-1, 2:] - uC
    wW = u[1:-1, :-2] - uC
    wN = u[2:, 1:-1] - uC
    wS = u[:-2, 1:-1] - uC
    c = cot / h**2
    gu = np.zeros_like(u)
    gu[1:-1, 1:-1] += c * (aE + aW + aN + aS)
    gu[1:-1, 2:] -= c * aE
    gu[1:-1, :-2] -= c * aW
    gu[2:, 1:-1] -= c * aN
    gu[:-2, 1:-1] -= c * aS
    ga = np.zeros_like(a)
    half = 0.5 * c
    ga[1:-1, 1:-1] -= half * (wE + wW + wN + wS)
    ga[1:-1, 2:] -= half * wE
    ga[1:-1, :-2] -= half * wW
    ga[2:, 1:-1] -= half * wN
    ga[:-2, 1:-1] -= half * wS
    return ga, gu


def _burgers_residual(u, h, dtau, nu):
    un = u[:-1]
    ux = (np.roll(un, -1, axis=1) - np.roll(un, 1, axis=1)) / (2.0 * h)
    uxx = (np.roll(un, -1, axis=1) - 2.0 * un + np.roll(un, 1, axis=1)) / h**2
    return (u[1:] - un) / dtau + un * ux - nu * uxx


def _burgers_adjoint(u, cot, h, dtau, nu):
    un = u[:-1]
    ux = (np.roll(un, -1, axis=1) - np.roll(un, 1, axis=1)) / (2.0 * h)
    gu = np.zeros_like(u)
    gu[1:] += cot / dtau
    gu[:-1] += cot * (-1.0 / dtau + ux + 2.0 * nu / h**2)
    wplus = un / (2.0 * h) - nu / h**2      # dF/du[tau, j+1]
    wminus = -un / (2.0 * h) - nu / h**2    # dF/du[tau, j-1]
    gu[:-1] += np.roll(cot * wplus, 1, axis=1)
    gu[:-1] += np.roll(cot * wminus, -1, axis=1)
    return gu


# ---------------------------------------------------------------------------
# ground-truth solvers

@lru_cache(maxsize=8)
def _static_factorization(n: int, h: float, k: float):
    # (Delta_h + k^2 I) on the Dirichlet interior; coefficient-independent,
    # so one factorization serves a whole dataset.
    ni = n - 2
    t = sp.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(ni, ni)) / h**2
    eye = sp.identity(ni)
    op = sp.kron(eye, t) + sp.kron(t, eye) + k * k * sp.identity(ni * ni)
    return spla.splu(op.tocsc())


def _assemble_darcy(a: np.ndarray, h: float) -> sp.csc_matrix:
    ni = a.shape[0] - 2
    aE, aW, aN, aS = _darcy_faces(a)
    idx = np.arange(ni * ni).reshape(ni, ni)
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [((aE + aW + aN + aS) / h**2).ravel()]
    for face, r, c in ((aE, idx[:, :-1], idx[:, 1:]), (aW, idx[:, 1:], idx[:, :-1]),
                       (aN, idx[:-1, :], idx[1:, :]), (aS, idx[1:, :], idx[:-1, :])):
        sel = (slice(None), slice(None, -1)) if face is aE else \
              (slice(None), slice(1, None)) if face is aW else \
              (slice(None, -1), slice(None)) if face is aN else (slice(1, None), slice(None))
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append((-face[sel] / h**2).ravel())
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(ni * ni, ni * ni))
    return mat.tocsc()


def solve_static(a: np.ndarray, problem: PDEProblem) -> np.ndarray:
    """Direct sparse solve of the discretized operator, homogeneous Dirichlet."""
    if problem.kind not in STATIC_KINDS:
        raise ValueError(f"solve_static does not handle {problem.kind!r}")
    a = np.asarray(a, dtype=np.float64)
    if a.shape != problem.shape:
        raise ValueError("coefficient shape does not match problem grid")
    n = problem.shape[0]
    ni = n - 2
    u = np.zeros_like(a)
    if problem.kind == "darcy":
        if np.any(a <= 0):
            raise SolverError("darcy coefficient must be positive")
        rhs = np.full(ni * ni, problem.q)
        sol = spla.spsolve(_assemble_darcy(a, problem.h), rhs)
    else:
        rhs = a[1:-1, 1:-1].ravel()
        sol = _static_factorization(n, problem.h, problem.k).solve(rhs)
    if not np.all(np.isfinite(sol)):
        raise SolverError(f"{problem.kind} solve produced non-finite values")
    u[1:-1, 1:-1] = sol.reshape(ni, ni)
    resid = problem.residual(np.stack([a, u]))
    scale = max(1.0, float(np.max(np.abs(rhs))) if rhs.size else 1.0)
    if np.max(np.abs(resid)) > 1e-8 * scale:
        raise SolverError(f"{problem.kind} solve failed the residual check "
                          f"(max |f| = {np.max(np.abs(resid)):.3e})")
    return u


def solve_burgers(u0: np.ndarray, nu: float, steps: int, horizon: float = 1.0) -> np.ndarray:
    """Explicit periodic time marching; rows of the result are time slices.

    The recorded grid uses dtau = horizon / steps. Internally each recorded
    step is subdivided so both the advective and the diffusive stability
    limits hold; dtau itself only has to satisfy the advective CFL.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    if u0.ndim != 1:
        raise ValueError("u0 must be one-dimensional")
    if steps < 1:
        raise ValueError("need at least one step")
    nx = u0.size
    h = 1.0 / nx
    dtau = horizon / steps
    traj = np.empty((steps + 1, nx))
    traj[0] = u0
    u = u0.copy()
    for step in range(steps):
        umax = float(np.max(np.abs(u)))
        if umax * dtau / h > 1.0:
            raise StabilityError(f"advective CFL {umax * dtau / h:.3f} > 1 at step {step}")
        nsub = max(1, int(np.ceil(4.0 * nu * dtau / h**2)),
                   int(np.ceil(4.0 * umax * dtau / h)))
        sub = dtau / nsub
        for _ in range(nsub):
            up = np.roll(u, -1)
            um = np.roll(u, 1)
            u = u + sub * (nu * (up - 2.0 * u + um) / h**2 - u * (up - um) / (2.0 * h))
        if not np.all(np.isfinite(u)):
            raise StabilityError(f"marching diverged at step {step}")
        traj[step + 1] = u
    return traj


# ---------------------------------------------------------------------------
# Gaussian random fields, observations, metrics

@dataclass(frozen=True)
class GRFParams:
    length_scale: float
    variance: float = 1.0
    mean: float = 0.0
    binarize: tuple | None = None   # (low_value, high_value, quantile)

    def __post_init__(self):
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")
        if self.variance < 0:
            raise ValueError("variance must be nonnegative")
        if self.binarize is not None and len(self.binarize) != 3:
            raise ValueError("binarize must be (low, high, quantile)")


def _grf(shape: tuple, params: GRFParams, rng: np.random.Generator) -> np.ndarray:
    # Spectral synthesis: shape white noise by the square root of the
    # squared-exponential spectrum, then rescale to the exact point variance.
    freqs = np.meshgrid(*[np.fft.fftfreq(n, d=1.0 / n) for n in shape], indexing="ij")
    k2 = sum(f * f for f in freqs)
    amp = np.exp(-(np.pi**2) * params.length_scale**2 * k2)
    noise = rng.standard_normal(shape)
    field = np.real(np.fft.ifftn(np.fft.fftn(noise) * amp))
    var_now = float(np.sum(amp * amp)) / field.size
    field = field * np.sqrt(params.variance / var_now) + params.mean
    if params.binarize is not None:
        low, high, quantile = params.binarize
        thresh = np.quantile(field, quantile)
        field = np.where(field >= thresh, float(high), float(low))
    return field


def sample_grf(params: GRFParams, problem: PDEProblem, rng: np.random.Generator) -> np.ndarray:
    """Stationary GRF coefficient field (static) or initial state (burgers)."""
    shape = (problem.shape[1],) if problem.kind == "burgers" else problem.shape
    return _grf(shape, params, rng)


def sample_observations(field: np.ndarray, n: int, channels, rng: np.random.Generator,
                        ) -> ObservationSet:
    """Draw n distinct uniform observation points within the masked channels."""
    field = np.asarray(field, dtype=np.float64)
    points = int(np.prod(field.shape[1:]))
    eligible = np.concatenate([np.arange(c * points, (c + 1) * points) for c in channels])
    if n < 1:
        raise ValueError("need at least one observation")
    if n > eligible.size:
        raise ValueError(f"requested {n} observations from {eligible.size} eligible points")
    idx = np.sort(rng.choice(eligible, size=n, replace=False))
    return ObservationSet(idx, field.ravel()[idx], channels=tuple(channels))


def symmetry_augmentation(problem: PDEProblem):
    """Batch augmenter applying the problem's exact distribution symmetries.

    Static problems on the square: the dihedral group (isotropic GRF prior,
    D4-invariant operators, symmetric boundary). Burgers: space reflection
    with sign flip, a symmetry of the periodic equation and the zero-mean
    prior. Operates on flattened (B, dim) batches.
    """
    layout = problem.layout

    if problem.kind == "burgers":
        def augment(flat_batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
            b = flat_batch.reshape(-1, layout.channels, *layout.shape)
            flip = rng.integers(0, 2, size=b.shape[0]).astype(bool)
            out = b.copy()
            out[flip] = -out[flip][:, :, :, ::-1]
            return out.reshape(flat_batch.shape)
        return augment

    def augment(flat_batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        b = flat_batch.reshape(-1, layout.channels, *layout.shape)
        rot = rng.integers(0, 4, size=b.shape[0])
        flip = rng.integers(0, 2, size=b.shape[0])
        out = np.empty_like(b)
        for j in range(b.shape[0]):
            f = np.rot90(b[j], k=int(rot[j]), axes=(1, 2))
            if flip[j]:
                f = f[:, ::-1, :]
            out[j] = f
        return out.reshape(flat_batch.shape)
    return augment


def relative_error(pred: np.ndarray, truth: np.ndarray) -> float:
    """Scale-covariant L2 relative error ||pred - truth|| / ||truth||."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    denom = float(np.linalg.norm(truth))
    if denom == 0.0:
        raise ValueError("relative error undefined for zero truth")
    return float(np.linalg.norm(pred - truth) / denom)


# ---------------------------------------------------------------------------
# dataset generation

def _sample_rng(seed: int, namespace: int, index: int) -> np.random.Generator:
    # Stream derived from (seed, split, sample index): stable under parallelism.
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(namespace, index)))


def _generate_one(args) -> np.ndarray:
    problem_dict, grf, seed, namespace, index = args
    problem = problem_from_dict(problem_dict)
    rng = _sample_rng(seed, namespace, index)
    if problem.kind == "burgers":
        u0 = sample_grf(grf, problem, rng)
        steps = problem.shape[0] - 1
        traj = solve_burgers(u0, problem.nu, steps, horizon=problem.dtau * steps)
        return traj[None]
    a = sample_grf(grf, problem, rng)
    try:
        u = solve_static(a, problem)
    except SolverError as exc:
        raise SolverError(f"sample {index}: {exc}") from exc
    return np.stack([a, u])


def generate_dataset(problem: PDEProblem, grf: GRFParams, count: int, seed: int,
                     namespace: int = 0) -> list[np.ndarray]:
    """Paired fields with per-sample RNG streams derived from (seed, index)."""
    if count < 1:
        raise ValueError("count must be at least 1")
    jobs = [(problem_to_dict(problem), grf, int(seed), namespace, i) for i in range(count)]
    workers = int(os.environ.get("FM4PDE_THREADS", "1"))
    if workers > 1 and count >= 4 * workers:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_generate_one, jobs, chunksize=8))
    return [_generate_one(job) for job in jobs]


def write_dataset(out_dir, problem: PDEProblem, grf: GRFParams, train_count: int,
                  test_count: int, seed: int, test_scale: float = 1.5) -> dict:
    """Generate, normalize-stat, and persist a train/test dataset plus manifest.

    The test split draws from a smoother prior (length scale scaled by
    test_scale); normalization statistics always come from the train split.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = generate_dataset(problem, grf, train_count, seed, namespace=0)
    test_grf = replace(grf, length_scale=grf.length_scale * test_scale)
    test = generate_dataset(problem, test_grf, test_count, seed, namespace=1)
    mean, std = channel_statistics(train)
    manifest = {
        "problem": problem_to_dict(problem),
        "grf": grf_to_dict(grf),
        "test_grf": grf_to_dict(test_grf),
        "normalization": {"mean": mean.tolist(), "std": std.tolist()},
        "seed": int(seed),
        "train_files": [f"train_{i:05d}.field" for i in range(train_count)],
        "test_files": [f"test_{i:05d}.field" for i in range(test_count)],
    }
    for name, field in zip(manifest["train_files"], train):
        write_field(out_dir / name, field)
    for name, field in zip(manifest["test_files"], test):
        write_field(out_dir / name, field)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return manifest


def grf_to_dict(grf: GRFParams) -> dict:
    return {"length_scale": grf.length_scale, "variance": grf.variance,
            "mean": grf.mean, "binarize": list(grf.binarize) if grf.binarize else None}


def grf_from_dict(obj: dict) -> GRFParams:
    binarize = tuple(obj["binarize"]) if obj.get("binarize") else None
    return GRFParams(length_scale=obj["length_scale"], variance=obj["variance"],
                     mean=obj["mean"], binarize=binarize)


def load_dataset(data_dir) -> dict:
    """Read a dataset directory back into problem, splits, and statistics."""
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    problem = problem_from_dict(manifest["problem"])
    train = [read_field(data_dir / name) for name in manifest["train_files"]]
    test = [read_field(data_dir / name) for name in manifest["test_files"]]
    stats = (np.asarray(manifest["normalization"]["mean"]),
             np.asarray(manifest["normalization"]["std"]))
    return {"problem": problem, "train": train, "test": test, "stats": stats,
            "manifest": manifest}


def dataset_hash(data_dir) -> str:
    """SHA-256 over the manifest and all field files, in manifest order."""
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    digest = hashlib.sha256()
    digest.update(json.dumps(manifest, sort_keys=True).encode())
    for name in manifest["train_files"] + manifest["test_files"]:
        digest.update((data_dir / name).read_bytes())
    return digest.hexdigest()
