"""Feed-forward interpolator from gate parameters to acceleration pulses.

Layout of the network (row-vector convention, ``x @ W + b``)::

    theta -> scale to [-1, 1] -> [Linear -> tanh] * n_hidden
          -> Linear (readout) -> bound * tanh          (bounded accelerations)
          -> Linear (calibration, identity at init)    (final layer)

The calibration layer is frozen during pretraining and fidelity training so
the bounded output is exactly the pulse.  It exists so that a linear channel
mix of the output, which is what a control transfer matrix does, can be
absorbed exactly into the last layer's weights (see :mod:`gatefam.calibration`).
"""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .quantum import ControlSystem, GateFamily
from .trajectory import fidelities, fidelity_and_gradient_batch

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class InterpolatorNetwork:
    """MLP mapping a parameter vector to a (channels, T) acceleration matrix."""

    def __init__(self, input_dim: int, channels: int, T: int, accel_bound: float,
                 lower: Sequence[float], upper: Sequence[float], hidden: Sequence[int] = (128, 128, 128),
                 seed: int = 0, readout_gain: float = 0.1):
        if accel_bound <= 0:
            raise ValueError("accel_bound must be positive")
        self.input_dim = int(input_dim)
        self.channels = int(channels)
        self.T = int(T)
        self.accel_bound = float(accel_bound)
        self.lower = np.asarray(lower, dtype=float).reshape(self.input_dim)
        self.upper = np.asarray(upper, dtype=float).reshape(self.input_dim)
        if np.any(self.upper <= self.lower):
            raise ValueError("empty parameter domain")
        self.hidden = tuple(int(h) for h in hidden)
        rng = np.random.default_rng(seed)
        sizes = (self.input_dim,) + self.hidden
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            # Glorot normal
            self.weights.append(rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), (n_in, n_out)))
            self.biases.append(np.zeros(n_out))
        n_out = self.output_dim
        self.weights.append(readout_gain * rng.normal(0.0, np.sqrt(2.0 / (sizes[-1] + n_out)), (sizes[-1], n_out)))
        self.biases.append(np.zeros(n_out))
        self.weights.append(np.eye(n_out))
        self.biases.append(np.zeros(n_out))

    @classmethod
    def for_family(cls, family: GateFamily, sys: ControlSystem, T: int, **kw) -> "InterpolatorNetwork":
        return cls(family.param_count, sys.n_channels, T, sys.acceleration_bound, family.lower(), family.upper(), **kw)

    @property
    def output_dim(self) -> int:
        return self.channels * self.T

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def final_layer(self) -> int:
        return self.n_layers - 1

    def copy(self) -> "InterpolatorNetwork":
        return copy.deepcopy(self)

    def scale(self, theta) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        return 2.0 * (theta - self.lower) / (self.upper - self.lower) - 1.0

    def check_domain(self, theta, tol: float = 1e-9):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if theta.shape[-1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} parameters, got {theta.shape[-1]}")
        if np.any(theta < self.lower - tol) or np.any(theta > self.upper + tol) or not np.all(np.isfinite(theta)):
            raise ValueError("parameters outside the trained domain")

    def _forward(self, theta):
        """Forward pass keeping every layer's input for backprop."""
        h = self.scale(theta)
        acts = [h]
        for W, b in zip(self.weights[:-2], self.biases[:-2]):
            h = np.tanh(h @ W + b)
            acts.append(h)
        z = h @ self.weights[-2] + self.biases[-2]
        y = self.accel_bound * np.tanh(z)
        acts.append(y)
        out = y @ self.weights[-1] + self.biases[-1]
        return out, acts

    def forward(self, theta, check: bool = True) -> np.ndarray:
        """Accelerations for one parameter vector (channels, T) or a batch (B, channels, T)."""
        arr = np.asarray(theta, dtype=float)
        single = arr.ndim <= 1
        if check:
            self.check_domain(arr)
        out, _ = self._forward(arr)
        out = out.reshape(-1, self.channels, self.T)
        return out[0] if single else out

    __call__ = forward

    def backward(self, theta, grad_out) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Gradients of sum(grad_out * forward(theta)) with respect to all weights and biases."""
        out, acts = self._forward(theta)
        g = np.asarray(grad_out, dtype=float).reshape(out.shape)
        gw = [None] * self.n_layers
        gb = [None] * self.n_layers
        y = acts[-1]
        gw[-1] = y.T @ g
        gb[-1] = g.sum(0)
        g = g @ self.weights[-1].T
        # y = bound * tanh(z)
        g = g * (self.accel_bound - y**2 / self.accel_bound)
        h = acts[-2]
        gw[-2] = h.T @ g
        gb[-2] = g.sum(0)
        g = g @ self.weights[-2].T
        for layer in range(self.n_layers - 3, -1, -1):
            h_out = acts[layer + 1]
            g = g * (1.0 - h_out**2)
            gw[layer] = acts[layer].T @ g
            gb[layer] = g.sum(0)
            g = g @ self.weights[layer].T
        return gw, gb

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def frozen_hash(self) -> str:
        """Digest of every layer except the final one."""
        h = hashlib.sha256()
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h.update(np.ascontiguousarray(W).tobytes())
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "input_dim": self.input_dim,
            "channels": self.channels,
            "T": self.T,
            "accel_bound": self.accel_bound,
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "hidden": list(self.hidden),
            "layers": [{"shape": list(W.shape), "weight": W.tolist(), "bias": b.tolist()}
                       for W, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InterpolatorNetwork":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported weights schema version {data.get('schema_version')}")
        net = cls.__new__(cls)
        net.input_dim = int(data["input_dim"])
        net.channels = int(data["channels"])
        net.T = int(data["T"])
        net.accel_bound = float(data["accel_bound"])
        net.lower = np.asarray(data["lower"], dtype=float)
        net.upper = np.asarray(data["upper"], dtype=float)
        net.hidden = tuple(data["hidden"])
        net.weights, net.biases = [], []
        for layer in data["layers"]:
            W = np.asarray(layer["weight"], dtype=float).reshape(layer["shape"])
            net.weights.append(W)
            net.biases.append(np.asarray(layer["bias"], dtype=float).reshape(W.shape[1]))
        return net


class Adam:
    """Adam over a fixed list of arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _select(net: InterpolatorNetwork, layers: Sequence[int]):
    params = []
    for i in layers:
        params += [net.weights[i], net.biases[i]]
    return params


def _grads(gw, gb, layers: Sequence[int]):
    out = []
    for i in layers:
        out += [gw[i], gb[i]]
    return out


def body_layers(net: InterpolatorNetwork) -> list[int]:
    """Layers updated by pretraining and fidelity training (all but the final one)."""
    return list(range(net.n_layers - 1))


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainDataset:
    params: np.ndarray
    accels: np.ndarray
    dt: float
    sys: Optional[ControlSystem] = None

    def __post_init__(self):
        self.params = np.atleast_2d(np.asarray(self.params, dtype=float))
        self.accels = np.asarray(self.accels, dtype=float)
        if len(self.params) == 0:
            raise ValueError("empty dataset")
        if len(self.params) != len(self.accels):
            raise ValueError("params and accels lengths differ")
        if self.sys is not None and np.any(np.abs(self.accels) > self.sys.acceleration_bound * (1 + 1e-9)):
            raise ValueError("dataset accelerations exceed the bound")


@dataclass
class PretrainOptions:
    learning_rate: float = 1e-3
    max_iters: int = 20000
    mse_tol: float = 1e-6
    batch_size: Optional[int] = None  # None: full batch
    seed: int = 0
    log_every: int = 1000


def masked_mse(net: InterpolatorNetwork, out: np.ndarray, target: np.ndarray):
    """Bound-normalized MSE over the first T-2 knots, and its gradient.

    The last two accelerations never reach the controls, so they carry no
    information and are left out of the loss.
    """
    T = net.T
    diff = (out.reshape(-1, net.channels, T) - target.reshape(-1, net.channels, T)) / net.accel_bound
    diff[..., T - 2:] = 0.0
    n = diff.shape[0] * net.channels * (T - 2)
    loss = float(np.sum(diff**2)) / n
    grad = 2.0 * diff / (n * net.accel_bound)
    return loss, grad.reshape(out.shape)


def fit_mse(net: InterpolatorNetwork, params, targets, layers: Sequence[int], lr: float, max_iters: int,
            tol: float, batch_size=None, rng=None, grad_tol: float = 0.0, log_every: int = 0):
    """Adam on the masked MSE over the given layers; returns the loss trace.

    Stops when the loss drops below ``tol`` or the squared norm of the
    gradient drops below ``grad_tol``.
    """
    params = np.atleast_2d(params)
    targets = np.asarray(targets, dtype=float).reshape(len(params), -1)
    opt = Adam(_select(net, layers), lr=lr)
    rng = rng or np.random.default_rng(0)
    trace = []
    n = len(params)
    for it in range(max_iters):
        idx = slice(None) if batch_size is None or batch_size >= n else rng.choice(n, batch_size, replace=False)
        out, _ = net._forward(params[idx])
        loss, g = masked_mse(net, out, targets[idx])
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at iteration {it}")
        trace.append(loss)
        if loss < tol:
            break
        gw, gb = net.backward(params[idx], g)
        grads = _grads(gw, gb, layers)
        if grad_tol > 0 and sum(float(np.sum(x * x)) for x in grads) < grad_tol:
            break
        opt.step(grads)
        if log_every and it % log_every == 0:
            log.debug("mse iteration %d: %.3e", it, loss)
    return trace


def pretrain(net: InterpolatorNetwork, data: PretrainDataset, opts: Optional[PretrainOptions] = None):
    """Fit the network to reference pulses by MSE; returns (net, loss trace)."""
    opts = opts or PretrainOptions()
    net.check_domain(data.params)
    trace = fit_mse(net, data.params, data.accels, body_layers(net), opts.learning_rate, opts.max_iters,
                    opts.mse_tol, opts.batch_size, np.random.default_rng(opts.seed), log_every=opts.log_every)
    return net, trace


# ---------------------------------------------------------------------------
# fidelity training


@dataclass
class TrainingConfig:
    epoch_samples: int = 500
    batch_size: int = 50
    l1_weight: float = 0.0
    learning_rate: float = 1e-4
    max_epochs: int = 100
    threshold_fidelity: float = 0.9999
    rng_seed: int = 0
    importance_sampling: bool = False
    importance_pool: int = 5000

    def __post_init__(self):
        if self.batch_size <= 0 or self.epoch_samples <= 0:
            raise ValueError("batch_size and epoch_samples must be positive")
        if self.epoch_samples % self.batch_size:
            raise ValueError("epoch_samples must be divisible by batch_size")
        if self.l1_weight < 0:
            raise ValueError("l1_weight must be nonnegative")


@dataclass
class TrainingHistory:
    test_fidelity: list = field(default_factory=list)
    test_infidelity_std: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    mean_abs_accel: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(test_fidelity=self.test_fidelity, test_infidelity_std=self.test_infidelity_std,
                    train_loss=self.train_loss, mean_abs_accel=self.mean_abs_accel)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingHistory":
        return cls(**{k: list(d.get(k, [])) for k in ("test_fidelity", "test_infidelity_std", "train_loss",
                                                       "mean_abs_accel")})

    def __len__(self):
        return len(self.test_fidelity)


def sample_params(family: GateFamily, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(family.lower(), family.upper(), size=(n, family.param_count))


def default_test_params(family: GateFamily, rng: Optional[np.random.Generator] = None, n_random: int = 4500,
                        grid: int = 64) -> np.ndarray:
    """4500 uniform random points for one parameter, a grid x grid lattice for two."""
    if family.param_count == 1:
        rng = rng or np.random.default_rng(12345)
        return sample_params(family, n_random, rng)
    if family.param_count == 2:
        axes = [np.linspace(lo, hi, grid) for lo, hi in zip(family.lower(), family.upper())]
        a, b = np.meshgrid(*axes, indexing="ij")
        return np.stack([a.ravel(), b.ravel()], axis=1)
    raise ValueError("test sets are defined for one- and two-parameter families")


def loss_and_grad(net: InterpolatorNetwork, family: GateFamily, sys: ControlSystem, dt: float, params,
                  l1_weight: float = 0.0, layers: Optional[Sequence[int]] = None):
    """Batch loss sum_j (1 - F_j) + l1 * |a_j|_1 and its gradient for the given layers."""
    layers = body_layers(net) if layers is None else layers
    out, _ = net._forward(params)
    accel = out.reshape(-1, net.channels, net.T)
    fid, gacc = fidelity_and_gradient_batch(sys, accel, dt, family.batch(params))
    loss = float(np.sum(1.0 - fid) + l1_weight * np.sum(np.abs(accel)))
    gout = -gacc + l1_weight * np.sign(accel)
    gw, gb = net.backward(params, gout.reshape(out.shape))
    return loss, _grads(gw, gb, layers), fid


def evaluate(net: InterpolatorNetwork, family: GateFamily, sys: ControlSystem, dt: float, test_params):
    """Mean and std of 1 - F over the test points, plus the per-point infidelities."""
    test_params = np.atleast_2d(np.asarray(test_params, dtype=float))
    if test_params.size == 0:
        raise ValueError("empty test set")
    accel = net.forward(test_params)
    inf = 1.0 - fidelities(sys, accel, dt, family.batch(test_params))
    return float(np.mean(inf)), float(np.std(inf)), inf


def train(net: InterpolatorNetwork, family: GateFamily, sys: ControlSystem, dt: float, cfg: TrainingConfig,
          test_params=None, callback: Optional[Callable[[int, float], None]] = None):
    """Fidelity training in random minibatches; returns (net, history).

    Each epoch draws ``cfg.epoch_samples`` fresh parameters uniformly from the
    domain.  With ``importance_sampling`` the draw is instead weighted by the
    current infidelity over a random candidate pool.
    """
    hist = TrainingHistory()
    if cfg.max_epochs <= 0:
        return net, hist
    rng = np.random.default_rng(cfg.rng_seed)
    if test_params is None:
        test_params = default_test_params(family)
    layers = body_layers(net)
    opt = Adam(_select(net, layers), lr=cfg.learning_rate)
    for epoch in range(cfg.max_epochs):
        if cfg.importance_sampling:
            pool = sample_params(family, cfg.importance_pool, rng)
            _, _, inf = evaluate(net, family, sys, dt, pool)
            w = np.maximum(inf, 1e-12)
            params = pool[rng.choice(len(pool), cfg.epoch_samples, p=w / w.sum())]
        else:
            params = sample_params(family, cfg.epoch_samples, rng)
        total = 0.0
        for s in range(0, cfg.epoch_samples, cfg.batch_size):
            loss, grads, _ = loss_and_grad(net, family, sys, dt, params[s:s + cfg.batch_size], cfg.l1_weight,
                                           layers)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch + 1}")
            opt.step(grads)
            total += loss
        mean_inf, std_inf, _ = evaluate(net, family, sys, dt, test_params)
        hist.train_loss.append(total / cfg.epoch_samples)
        hist.test_fidelity.append(1.0 - mean_inf)
        hist.test_infidelity_std.append(std_inf)
        hist.mean_abs_accel.append(float(np.mean(np.abs(net.forward(params[: cfg.batch_size])))))
        log.info("epoch %d: test fidelity %.6f", epoch + 1, 1.0 - mean_inf)
        if callback is not None:
            callback(epoch + 1, 1.0 - mean_inf)
        if 1.0 - mean_inf >= cfg.threshold_fidelity:
            break
    return net, hist


def epochs_to_threshold(history, threshold: float = 0.9999) -> Optional[int]:
    """1-based index of the first epoch whose test fidelity reaches the threshold."""
    fids = history.test_fidelity if isinstance(history, TrainingHistory) else list(history)
    if len(fids) == 0:
        raise ValueError("empty history")
    for i, f in enumerate(fids):
        if f >= threshold:
            return i + 1
    return None
