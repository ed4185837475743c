"""Conditional flow matching training for a fully-connected velocity network.

The network is a plain MLP over the flattened state plus sinusoidal time
features, with exact reverse-mode gradients written out by hand. Training
regresses the linear-path conditional velocity x1 - x0 at interpolated states
with Adam updates; everything is deterministic given the seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

WEIGHT_MAGIC = b"FM4PDEW1"
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class WeightFormatError(ValueError):
    """A weight file failed magic, header, or size validation."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


def gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def gelu_grad(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def time_features(t, n_features: int = 16) -> np.ndarray:
    """Sinusoidal embedding of t: sin/cos at octave-spaced half-period
    frequencies. The base pair is (sin pi t, cos pi t), so t = 0 and t = 1
    get distinct embeddings; integer frequencies would alias the endpoints."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 2.0 ** np.arange(n_features // 2)
    arg = np.pi * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class VelocityNet:
    """MLP velocity field u_t(x): input (x, time features), output dim(x).

    With the default endpoint head the MLP predicts a terminal-state estimate
    and the velocity is (head - x) / (1 - t + kappa). The endpoint map stays
    bounded and varies mildly in t, whereas a raw velocity head must realize
    maps whose gain spikes near t = 0 on strongly correlated data; appended
    time features condition too weakly for that, and training stalls.
    """

    def __init__(self, dim: int, hidden=(256, 256, 256), n_time_features: int = 16,
                 seed: int = 0, head: str = "endpoint", kappa: float = 0.25):
        if n_time_features % 2 != 0:
            raise ValueError("n_time_features must be even")
        if head not in ("endpoint", "velocity"):
            raise ValueError(f"unknown head {head!r}")
        if head == "endpoint" and kappa <= 0:
            raise ValueError("endpoint head needs kappa > 0")
        self.dim = int(dim)
        self.hidden = tuple(int(w) for w in hidden)
        self.n_time_features = int(n_time_features)
        self.head = head
        self.kappa = float(kappa)
        widths = [self.dim + self.n_time_features, *self.hidden, self.dim]
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            scale = np.sqrt(2.0 / fan_in)
            if i == len(widths) - 2:
                scale *= 0.1  # gentle initial velocity field
            self.weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
            self.biases.append(np.zeros(fan_out))

    @property
    def widths(self) -> list[int]:
        return [self.dim + self.n_time_features, *self.hidden, self.dim]

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    # forward / backward -----------------------------------------------------

    def _forward(self, t: np.ndarray, x: np.ndarray):
        h = np.concatenate([x, time_features(t, self.n_time_features)], axis=1)
        cache = [h]
        gates = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if i < len(self.weights) - 1:
                # keep the CDF gate so the backward pass reuses the erf
                phi = 0.5 * (1.0 + erf(z / _SQRT2))
                gates.append((z, phi))
                h = z * phi
                cache.append(h)
            else:
                h = z
        if self.head == "endpoint":
            denom = (1.0 - np.asarray(t) + self.kappa)[:, None]
            out = (h - x) / denom
        else:
            denom = None
            out = h
        return out, (cache, gates, denom)

    def _backward(self, cache_gates, delta: np.ndarray, need_param_grads: bool = True,
                  need_input_grad: bool = True):
        cache, gates, denom = cache_gates
        if denom is not None:
            delta = delta / denom  # cotangent through the endpoint rescaling
        direct = -delta if denom is not None else None
        grads = [None] * (2 * len(self.weights)) if need_param_grads else None
        for i in range(len(self.weights) - 1, -1, -1):
            if need_param_grads:
                grads[2 * i] = cache[i].T @ delta
                grads[2 * i + 1] = delta.sum(axis=0)
            if i == 0 and not need_input_grad:
                return grads, None
            delta = delta @ self.weights[i].T
            if i > 0:
                z, phi = gates[i - 1]
                delta = delta * (phi + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z))
        if direct is not None:
            # d u / d x picks up the -I / (1 - t + kappa) term of the head
            delta = delta.copy()
            delta[:, :self.dim] += direct
        return grads, delta

    def forward(self, t, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        tb = np.full(xb.shape[0], t) if np.isscalar(t) or np.ndim(t) == 0 else np.asarray(t)
        out, _ = self._forward(tb, xb)
        return out[0] if single else out

    def vjp_x(self, t, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """(grad_x u_t(x))^T v via exact reverse mode through the network."""
        x = np.asarray(x, dtype=np.float64)
        v = np.asarray(cotangent, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        vb = v[None, :] if single else v
        tb = np.full(xb.shape[0], t) if np.isscalar(t) or np.ndim(t) == 0 else np.asarray(t)
        _, cache_gates = self._forward(tb, xb)
        _, dinput = self._backward(cache_gates, vb, need_param_grads=False)
        dx = dinput[:, :self.dim]  # time-feature columns are not differentiated
        return dx[0] if single else dx


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int = 20000
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.steps + 1, 1) < 1 or self.learning_rate <= 0:
            raise ValueError("train config values must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("moment decays must lie in (0, 1)")


def cfm_loss(net: VelocityNet, batch: np.ndarray, rng: np.random.Generator,
             need_grads: bool = True):
    """Conditional flow matching loss on one batch, plus parameter gradients.

    Draws t ~ U(0,1) and x0 ~ N(0,I) per sample, forms x_t = t x1 + (1-t) x0,
    and regresses the conditional target x1 - x0 (the linear-path velocity
    (x1 - x)/(1 - t) evaluated on the path). Loss is ||pred - target||^2 / d
    averaged over the batch.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise ValueError("batch must be (B, d) with B >= 1")
    bsz, d = batch.shape
    t = rng.uniform(0.0, 1.0, size=bsz)
    x0 = rng.standard_normal((bsz, d))
    xt = t[:, None] * batch + (1.0 - t[:, None]) * x0
    target = batch - x0
    pred, cache_gates = net._forward(t, xt)
    diff = pred - target
    loss = float(np.sum(diff * diff) / (bsz * d))
    if not need_grads:
        return loss, None
    grads, _ = net._backward(cache_gates, (2.0 / (bsz * d)) * diff,
                             need_input_grad=False)
    return loss, grads


def train(net: VelocityNet, dataset: np.ndarray, cfg: TrainConfig, augment=None):
    """Adam-driven CFM training; returns the trained net and the loss trace.

    ``augment``, when given, maps a flattened (B, d) batch plus the training
    RNG to an equivalent batch (exact symmetry transforms of the data
    distribution); it runs before the conditional draw every step.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.ndim != 2 or dataset.shape[1] != net.dim:
        raise ValueError("dataset must be (N, d) matching the network dim")
    rng = np.random.default_rng(cfg.seed)
    params = net.parameters()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    scratch = [np.empty_like(p) for p in params]
    trace = np.empty(cfg.steps)
    for step in range(cfg.steps):
        idx = rng.integers(0, dataset.shape[0], size=cfg.batch_size)
        batch = dataset[idx]
        if augment is not None:
            batch = augment(batch, rng)
        loss, grads = cfm_loss(net, batch, rng)
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss)
        trace[step] = loss
        bc1 = 1.0 - cfg.beta1 ** (step + 1)
        bc2 = 1.0 - cfg.beta2 ** (step + 1)
        for p, g, mi, vi, s in zip(params, grads, m, v, scratch):
            # in-place Adam; the scratch buffer keeps the loop allocation-free
            np.multiply(mi, cfg.beta1, out=mi)
            np.multiply(g, 1.0 - cfg.beta1, out=s)
            mi += s
            np.multiply(vi, cfg.beta2, out=vi)
            np.multiply(g, g, out=s)
            s *= 1.0 - cfg.beta2
            vi += s
            np.sqrt(vi, out=s)
            s *= 1.0 / np.sqrt(bc2)
            s += 1e-8
            np.divide(mi, s, out=s)
            s *= cfg.learning_rate / bc1
            p -= s
    return net, trace


# ---------------------------------------------------------------------------
# weight serialization

def save_weights(net: VelocityNet, path) -> None:
    header = json.dumps({"dim": net.dim, "hidden": list(net.hidden),
                         "time_features": net.n_time_features, "head": net.head,
                         "kappa": net.kappa}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for w, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_weights(path) -> VelocityNet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:8] != WEIGHT_MAGIC:
        raise WeightFormatError(f"{path}: bad or missing magic bytes")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise WeightFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
        net = VelocityNet(header["dim"], tuple(header["hidden"]), header["time_features"],
                          head=header.get("head", "velocity"),
                          kappa=header.get("kappa", 0.25))
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise WeightFormatError(f"{path}: malformed header: {exc}") from exc
    expected = sum(w.size + b.size for w, b in zip(net.weights, net.biases))
    payload = raw[12 + hlen:]
    if len(payload) != 8 * expected:
        raise WeightFormatError(f"{path}: expected {expected} weights, "
                                f"found {len(payload) // 8}")
    flat = np.frombuffer(payload, dtype="<f8")
    offset = 0
    for w, b in zip(net.weights, net.biases):
        w[...] = flat[offset:offset + w.size].reshape(w.shape)
        offset += w.size
        b[...] = flat[offset:offset + b.size]
        offset += b.size
    return net
