"""Linear control-line distortion and recalibration of a trained interpolator.

A transfer matrix ``M`` mixes the control channels at every knot,
``ctrl' = M @ ctrl``.  Because the double integration acts on each channel
separately, the same ``M`` applied to the accelerations gives the distorted
accelerations, which is how distorted pulses are evaluated here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .network import InterpolatorNetwork, default_test_params, fit_mse
from .quantum import ControlSystem, GateFamily
from .trajectory import controls_to_accelerations, fidelities, integrate_accelerations

log = logging.getLogger(__name__)

MAX_CONDITION = 1e4


@dataclass
class TransferMatrix:
    M: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        if self.M.ndim != 2 or self.M.shape[0] != self.M.shape[1]:
            raise ValueError("transfer matrix must be square")
        if not np.all(np.isfinite(self.M)) or np.linalg.cond(self.M) >= MAX_CONDITION:
            raise ValueError("transfer matrix is singular or ill-conditioned")

    @property
    def channels(self) -> int:
        return self.M.shape[0]

    def inverse(self) -> "TransferMatrix":
        return TransferMatrix(np.linalg.inv(self.M), self.sigma)


def _matrix(Tm) -> np.ndarray:
    return Tm.M if isinstance(Tm, TransferMatrix) else TransferMatrix(Tm).M


def sample_transfer(channels: int, sigma: float, seed=None, max_tries: int = 100) -> TransferMatrix:
    """Draw M = I + N with N_ij ~ Normal(0, sigma), resampling ill-conditioned draws."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if channels < 1:
        raise ValueError("need at least one channel")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        M = np.eye(channels) + sigma * rng.standard_normal((channels, channels))
        if np.linalg.cond(M) < MAX_CONDITION:
            return TransferMatrix(M, sigma)
    raise RuntimeError(f"no well-conditioned transfer matrix in {max_tries} draws")


def distort(Tm, ctrl) -> np.ndarray:
    """Apply the channel mix at every knot; works on (channels, T) or (B, channels, T)."""
    M = _matrix(Tm)
    ctrl = np.asarray(ctrl, dtype=float)
    if ctrl.ndim < 2 or ctrl.shape[-2] != M.shape[0]:
        raise ValueError(f"expected {M.shape[0]} channels, got shape {ctrl.shape}")
    return np.einsum("ij,...jt->...it", M, ctrl)


def calibrated_pulse(Tm, net: InterpolatorNetwork, theta, dt: float) -> np.ndarray:
    """Controls M^-1 ctrl(theta), which the distortion maps back onto the network's pulse."""
    M = _matrix(Tm)
    _, ctrl = integrate_accelerations(net.forward(theta), dt)
    return distort(np.linalg.inv(M), ctrl)


def evaluate_distorted(net: InterpolatorNetwork, Tm, family: GateFamily, sys: ControlSystem, dt: float,
                       test_params=None):
    """Mean and std of 1 - F when every network pulse passes through the distortion."""
    if test_params is None:
        test_params = default_test_params(family)
    test_params = np.atleast_2d(np.asarray(test_params, dtype=float))
    accel = distort(Tm, net.forward(test_params))
    inf = 1.0 - fidelities(sys, accel, dt, family.batch(test_params))
    return float(np.mean(inf)), float(np.std(inf)), inf


@dataclass
class CalibrationRun:
    frozen_hash: str
    grad_threshold: float
    visited_params: list = field(default_factory=list)
    test_infidelity: list = field(default_factory=list)
    initial_infidelity: float = float("nan")
    iterations: list = field(default_factory=list)

    @property
    def test_fidelity(self) -> list:
        return [1.0 - x for x in self.test_infidelity]

    def points_to_fidelity(self, threshold: float) -> Optional[int]:
        """Number of calibrated points after which the mean fidelity first reaches the threshold."""
        for k, f in enumerate(self.test_fidelity):
            if f >= threshold:
                return k + 1
        return None

    def to_dict(self) -> dict:
        return dict(frozen_hash=self.frozen_hash, grad_threshold=self.grad_threshold,
                    visited_params=[list(map(float, p)) for p in self.visited_params],
                    test_infidelity=self.test_infidelity, initial_infidelity=self.initial_infidelity,
                    iterations=self.iterations)


def default_sequence(family: GateFamily, n: int) -> np.ndarray:
    """n reference parameters on a uniform grid, visited in grid order.

    For two parameters the grid is ceil(sqrt(n)) per axis, truncated to n.
    """
    if family.param_count == 1:
        return np.linspace(family.lower()[0], family.upper()[0], n)[:, None]
    k = int(np.ceil(n ** (1.0 / family.param_count)))
    axes = [np.linspace(lo, hi, k) for lo, hi in zip(family.lower(), family.upper())]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, family.param_count)
    return grid[:n]


def transfer_learn(net: InterpolatorNetwork, Tm, family: GateFamily, sys: ControlSystem, dt: float,
                   param_sequence, grad_threshold: float = 1e-8, lr: float = 1e-3, max_iters: int = 5000,
                   test_params=None):
    """Refit the final layer to calibrated pulses one reference point at a time.

    Every new point is added to the set of visited points and the final
    layer is fit by MSE on all of them until the squared gradient norm drops
    below ``grad_threshold``.  The threshold refers to the per-pulse loss,
    the bound-normalized squared error summed over channels and knots and
    averaged over points.  The body of the network never changes.
    Returns (net, CalibrationRun); the input network is not modified.
    """
    M = _matrix(Tm)
    if M.shape[0] != net.channels:
        raise ValueError("transfer matrix does not match the network's channels")
    reference = net
    net = net.copy()
    if test_params is None:
        test_params = default_test_params(family)
    run = CalibrationRun(net.frozen_hash(), grad_threshold)
    run.initial_infidelity = evaluate_distorted(net, M, family, sys, dt, test_params)[0]
    params = np.atleast_2d(np.asarray(param_sequence, dtype=float))
    net.check_domain(params)
    targets = []
    # fit_mse averages over every output entry as well; rescale to per-pulse units
    per_pulse = net.channels * (net.T - 2)
    grad_tol = grad_threshold / per_pulse**2
    for k, theta in enumerate(params):
        targets.append(controls_to_accelerations(calibrated_pulse(M, reference, theta, dt), dt))
        trace = fit_mse(net, params[: k + 1], np.stack(targets), [net.final_layer], lr, max_iters, 0.0,
                        grad_tol=grad_tol)
        if not np.isfinite(trace[-1]):
            raise FloatingPointError("transfer learning diverged")
        run.visited_params.append(theta.copy())
        run.iterations.append(len(trace))
        run.test_infidelity.append(evaluate_distorted(net, M, family, sys, dt, test_params)[0])
        log.info("calibration point %d: distorted test infidelity %.3e", k + 1, run.test_infidelity[-1])
    if net.frozen_hash() != run.frozen_hash:
        raise RuntimeError("frozen layers changed during transfer learning")
    return net, run


def exact_last_layer_correction(net: InterpolatorNetwork, Tm) -> InterpolatorNetwork:
    """Fold M^-1 into the final layer so that every output becomes M^-1 times the old one.

    In row convention the output is ``y @ W + b`` with channel-major
    flattening, so the new weights are ``W @ kron(M^-1, I_T).T``.  The
    corrected pulses can exceed the acceleration bound slightly.
    """
    M = _matrix(Tm)
    if M.shape[0] != net.channels:
        raise ValueError("transfer matrix does not match the network's channels")
    P = np.kron(np.linalg.inv(M), np.eye(net.T)).T
    out = net.copy()
    out.weights[-1] = net.weights[-1] @ P
    out.biases[-1] = net.biases[-1] @ P
    return out
