"""Augmented trajectories: accelerations -> controls -> unitaries.

Controls are obtained from piecewise-constant accelerations by two forward
Euler steps.  ``ctrl[:, 0] = 0`` comes from the initial condition and the
initial velocity is solved in closed form so that ``ctrl[:, -1] = 0``.  The
whole map accel -> (vel, ctrl) is linear and identical for every channel,
so it is stored as a pair of T x T matrices.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .quantum import (
    ControlSystem,
    dagger,
    expm,
    expm_batch,
    gate_fidelity,
    propagator_derivative_kernel,
)


@dataclass
class AugmentedTrajectory:
    """Knot values of one pulse.  Arrays are (channels, T); ``unitaries`` is (T+1, d, d)."""

    dt: np.ndarray
    accel: np.ndarray
    vel: np.ndarray
    ctrl: np.ndarray
    unitaries: np.ndarray

    @property
    def T(self) -> int:
        return self.accel.shape[1]

    @property
    def duration(self) -> float:
        return float(np.sum(self.dt))

    @classmethod
    def from_accel(cls, sys: ControlSystem, accel, dt) -> "AugmentedTrajectory":
        accel = np.asarray(accel, dtype=float)
        dt = _as_dt(dt, accel.shape[1])
        vel, ctrl = integrate_accelerations(accel, dt)
        return cls(dt, accel, vel, ctrl, rollout(sys, ctrl, dt))

    def copy(self) -> "AugmentedTrajectory":
        return AugmentedTrajectory(*(np.array(a, copy=True) for a in
                                     (self.dt, self.accel, self.vel, self.ctrl, self.unitaries)))


def _as_dt(dt, T: int) -> np.ndarray:
    dt = np.asarray(dt, dtype=float)
    if dt.ndim == 0:
        dt = np.full(T, float(dt))
    if dt.shape != (T,):
        raise ValueError(f"dt must be a scalar or have length {T}")
    if np.any(dt <= 0) or not np.all(np.isfinite(dt)):
        raise ValueError("timesteps must be positive and finite")
    return dt


def integration_matrices(dt) -> tuple[np.ndarray, np.ndarray]:
    """Linear maps (Vm, Cm) with vel = accel @ Vm.T and ctrl = accel @ Cm.T."""
    dt = np.asarray(dt, dtype=float)
    if dt.ndim != 1 or len(dt) < 2:
        raise ValueError("need at least two knots")
    if np.any(dt <= 0):
        raise ValueError("timesteps must be positive")
    if np.all(dt == dt[0]):
        vm, cm = _uniform_matrices(len(dt))
        return vm * dt[0], cm * dt[0] ** 2
    return _matrices(dt)


@lru_cache(maxsize=32)
def _uniform_matrices_cached(T: int):
    vm, cm = _matrices(np.ones(T))
    vm.setflags(write=False)
    cm.setflags(write=False)
    return vm, cm


def _uniform_matrices(T: int):
    return _uniform_matrices_cached(T)


def _matrices(dt: np.ndarray):
    T = len(dt)
    t = np.concatenate([[0.0], np.cumsum(dt)])  # knot times t_0 .. t_T
    idx = np.arange(T)
    lower = idx[:, None] > idx[None, :]  # s < t
    # K[t, s] = dt_s (t_t - t_{s+1}) for s < t: contribution of accel_s to ctrl_t at vel_0 = 0
    k = np.where(lower, dt[None, :] * (t[:T, None] - t[None, 1:T + 1]), 0.0)
    total = t[T - 1]
    v0 = -k[T - 1] / total  # row: vel_0 as a function of accel
    cm = k + np.outer(t[:T], v0)
    cm[0] = 0.0
    cm[T - 1] = 0.0
    vm = np.where(lower, dt[None, :], 0.0) + v0[None, :]
    return vm, cm


def integrate_accelerations(accel, dt) -> tuple[np.ndarray, np.ndarray]:
    accel = np.asarray(accel, dtype=float)
    dt = _as_dt(dt, accel.shape[-1])
    vm, cm = integration_matrices(dt)
    return accel @ vm.T, accel @ cm.T


def controls_to_accelerations(ctrl, dt) -> np.ndarray:
    """Undo the double integration on the observable knots.

    Only ``accel[:, :T-2]`` influence the controls; the last two columns are
    returned as zero.
    """
    ctrl = np.asarray(ctrl, dtype=float)
    dt = _as_dt(dt, ctrl.shape[-1])
    vel = np.diff(ctrl, axis=-1) / dt[:-1]
    accel = np.zeros_like(ctrl)
    accel[..., :-2] = np.diff(vel, axis=-1) / dt[:-2]
    return accel


def rollout(sys: ControlSystem, ctrl, dt) -> np.ndarray:
    """Unitaries U_0 = I, U_{t+1} = exp(-i H(ctrl_t) dt_t) U_t; returns (T+1, d, d)."""
    ctrl = np.asarray(ctrl, dtype=float)
    if not np.all(np.isfinite(ctrl)):
        raise ValueError("controls must be finite")
    dt = _as_dt(dt, ctrl.shape[-1])
    props = np.stack([expm(h, s) for h, s in zip(sys.hamiltonians(ctrl), dt)])
    return _chain(props)


def _chain(props: np.ndarray) -> np.ndarray:
    """Cumulative products U_{t+1} = P_t U_t over axis -3 of (..., T, d, d)."""
    T, d = props.shape[-3], props.shape[-1]
    out = np.empty(props.shape[:-3] + (T + 1, d, d), dtype=complex)
    out[..., 0, :, :] = np.eye(d)
    for t in range(T):
        out[..., t + 1, :, :] = props[..., t, :, :] @ out[..., t, :, :]
    return out


def final_unitaries(sys: ControlSystem, ctrl: np.ndarray, dt) -> np.ndarray:
    """Final propagators for a batch of control matrices (B, channels, T) -> (B, d, d)."""
    ctrl = np.asarray(ctrl, dtype=float)
    T = ctrl.shape[-1]
    dt = _as_dt(dt, T)
    props = expm_batch(sys.hamiltonians(ctrl), dt)
    u = np.broadcast_to(np.eye(sys.dim, dtype=complex), props.shape[:-3] + (sys.dim, sys.dim))
    for t in range(T):
        u = props[..., t, :, :] @ u
    return u


def propagator_gradients(sys: ControlSystem, ctrl: np.ndarray, dt, left: np.ndarray):
    """Contract propagator derivatives with weights.

    For generators H_t = H(ctrl_t) with eigen-decomposition V diag(w) V^dagger,
    returns g[..., j, t] = Tr(left_t dP_t/dctrl_{jt}) (complex) together with
    the propagators and eigensystem.  ``left`` has shape (..., T, d, d).
    """
    hs = sys.hamiltonians(ctrl)
    w, v = np.linalg.eigh(hs)
    dt = np.asarray(dt, dtype=float)
    gamma = propagator_derivative_kernel(w, dt)
    ph = np.exp(-1j * w * dt[..., None])
    props = (v * ph[..., None, :]) @ dagger(v)
    vh = dagger(v)
    m = vh @ left @ v  # (..., T, d, d)
    # K_j = V^dagger H_j V  -> (..., T, J, d, d)
    kj = np.einsum("...tak,jab,...tbl->...tjkl", np.conj(v), sys.control_stack, v)
    g = np.einsum("...tlk,...tkl,...tjkl->...jt", m, gamma, kj)
    return g, props, (w, v, hs)


def fidelity_and_gradient_batch(sys: ControlSystem, accel: np.ndarray, dt, targets: np.ndarray,
                                with_dt: bool = False):
    """Fidelities and d(fidelity)/d(accel) for a batch (B, channels, T).

    ``dt`` is shared by the batch.  With ``with_dt`` the derivative with
    respect to a common scaling of all timesteps (d/d(dt) for a uniform grid)
    is returned as a third value.
    """
    accel = np.asarray(accel, dtype=float)
    T = accel.shape[-1]
    dt = _as_dt(dt, T)
    vm, cm = integration_matrices(dt)
    ctrl = accel @ cm.T
    d = sys.dim
    hs = sys.hamiltonians(ctrl)
    w, v = np.linalg.eigh(hs)
    ph = np.exp(-1j * w * dt[:, None])
    props = (v * ph[..., None, :]) @ dagger(v)
    us = _chain(props)  # (B, T+1, d, d)
    gdag = dagger(np.asarray(targets))
    overlap = np.einsum("...ab,...ba->...", gdag, us[..., T, :, :])  # Tr(G^dag U_T)
    fid = np.abs(overlap) / d
    # backward: B_{t+1} = G^dag P_{T-1} ... P_{t+1}
    back = np.empty_like(us[..., 1:, :, :])
    b = gdag
    for t in range(T - 1, -1, -1):
        back[..., t, :, :] = b
        b = b @ props[..., t, :, :]
    left = us[..., :T, :, :] @ back  # C_t = U_t B_{t+1};  dw = Tr(C_t dP_t)
    gamma = propagator_derivative_kernel(w, dt)
    m = dagger(v) @ left @ v
    kj = np.einsum("...tak,jab,...tbl->...tjkl", np.conj(v), sys.control_stack, v)
    dw = np.einsum("...tlk,...tkl,...tjkl->...jt", m, gamma, kj)
    phase = np.conj(overlap) / np.maximum(np.abs(overlap), 1e-300)
    gctrl = np.real(phase[..., None, None] * dw) / d
    gaccel = gctrl @ cm
    if not with_dt:
        return fid, gaccel
    # uniform grid: ctrl scales as dt^2, each step also depends on dt directly
    dprop = np.einsum("...tab,...tba->...t", left, -1j * hs @ props)
    gdt_direct = np.real(phase[..., None] * dprop).sum(-1) / d
    gdt_ctrl = np.sum(gctrl * ctrl, axis=(-1, -2)) * 2.0 / dt[0]
    return fid, gaccel, gdt_direct + gdt_ctrl


def fidelity_and_gradient(sys: ControlSystem, accel, dt, target):
    """Fidelity of the pulse generated by ``accel`` and its exact gradient."""
    accel = np.asarray(accel, dtype=float)
    fid, grad = fidelity_and_gradient_batch(sys, accel[None], dt, np.asarray(target)[None])
    return float(fid[0]), grad[0]


def fidelities(sys: ControlSystem, accel: np.ndarray, dt, targets: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Batched fidelity of accelerations (B, channels, T) against targets (B, d, d)."""
    accel = np.asarray(accel, dtype=float)
    dt = _as_dt(dt, accel.shape[-1])
    _, cm = integration_matrices(dt)
    out = np.empty(len(accel))
    for s in range(0, len(accel), chunk):
        ctrl = accel[s:s + chunk] @ cm.T
        out[s:s + chunk] = gate_fidelity(final_unitaries(sys, ctrl, dt), targets[s:s + chunk])
    return out


# ---------------------------------------------------------------------------
# Magnus diagnostics


def _uniform_step(dt, T: int) -> float:
    dt = _as_dt(dt, T)
    if not np.allclose(dt, dt[0], rtol=0, atol=1e-15):
        raise ValueError("Magnus diagnostics assume a uniform time grid")
    return float(dt[0])


def magnus_effective_hamiltonian(sys: ControlSystem, ctrl, dt) -> np.ndarray:
    """First two Magnus terms of the generator with U_T ~ exp(-i H_eff T dt)."""
    ctrl = np.asarray(ctrl, dtype=float)
    T = ctrl.shape[-1]
    step = _uniform_step(dt, T)
    hs = sys.hamiltonians(ctrl)
    h1 = hs.mean(axis=0)
    # sum_{t' < t} H_{t'} accumulated
    prefix = np.cumsum(hs, axis=0) - hs
    comm = hs @ prefix - prefix @ hs
    h2 = (-0.5j * step / T) * comm.sum(axis=0)
    return h1 + h2


def rz_magnus_residuals(ctrl_x, ctrl_y, dt, theta: float) -> tuple[np.ndarray, float]:
    """Necessary small-control conditions for R_Z(theta) from X/Y drives.

    r1 holds the control areas (first Magnus term must vanish); r2 is the
    mismatch between theta/2 and the Z rotation produced by the second term,
    dt^2 * sum_t sum_{t'<=t} (x_t y_t' - x_t' y_t).
    """
    x = np.asarray(ctrl_x, dtype=float)
    y = np.asarray(ctrl_y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("control vectors must be 1-D and of equal length")
    step = _uniform_step(dt, len(x))
    r1 = np.array([x.sum(), y.sum()])
    cx = np.cumsum(x)
    cy = np.cumsum(y)
    nested = float(np.sum(x * cy - y * cx))
    return r1, 0.5 * theta - step**2 * nested
