"""Direct-collocation pulse synthesis.

The decision variables of each subproblem are the piecewise-constant
accelerations and the unitaries at every knot.  Controls and velocities are
linear functions of the accelerations (see :mod:`gatefam.trajectory`), so the
amplitude limits are linear inequalities and the acceleration limits are box
bounds.  The unitary dynamics ``U_{t+1} - exp(-i H(a_t) dt) U_t = 0`` enter as
equality constraints and are only satisfied at convergence.

Everything is solved with a Powell-Hestenes-Rockafellar augmented Lagrangian;
the inner minimization is scipy's L-BFGS-B, which projects onto the
acceleration box (and the timestep interval for minimum-time problems).
Solves run in two phases: collocation until the dynamics defects are small,
then a polish in which the unitaries are eliminated by rollout.


Three templates are provided: the smooth pulse problem (infidelity plus a
smoothness regularizer), the direct-sum problem (many subproblems coupled by
pairwise distances on a graph, fidelity as a constraint) and the minimum time
problem (shared timestep as a variable, fidelity as a constraint).
``synthesize_references`` chains them: one smooth pulse per grid node, then a
coordinated direct-sum solve anchored at those pulses.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .quantum import (
    ControlSystem,
    GateFamily,
    dagger,
    expm_batch,
    gate_fidelity,
    geodesic,
    propagator_derivative_kernel,
)
from .trajectory import AugmentedTrajectory, _chain, controls_to_accelerations, integration_matrices, rollout

log = logging.getLogger(__name__)


class EdgeMode(str, Enum):
    CONTROL = "CONTROL"
    ACCELERATION = "ACCELERATION"
    UNITARY = "UNITARY"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return None


class SolverError(RuntimeError):
    pass


class InfeasibleError(SolverError):
    pass


@dataclass
class SolverOptions:
    max_outer: int = 30
    max_inner: int = 500
    collocation_outer: int = 8
    switch_defect: float = 1e-6
    polish_mu_cap: float = 1e4
    polish_mu_max: float = 1e6
    polish_variables: str = "auto"  # "accel", "ctrl" or "auto"
    acceptable_kkt_tol: float = 1e-5
    stall_outer: int = 5
    kkt_tol: float = 1e-6
    defect_tol: float = 1e-8
    bound_tol: float = 1e-6
    fidelity_margin: float = 1e-7  # aim this far above a fidelity floor so it holds strictly
    mu0: float = 1e3
    mu_growth: float = 10.0
    mu_max: float = 1e10
    jitter: float = 0.01
    seed: int = 0
    unitary_init: str = "geodesic"  # or "rollout"
    max_duration: float = 50.0
    time_limit: Optional[float] = None
    callback: Optional[Callable[[dict], None]] = None


@dataclass
class SmoothPulseProblem:
    sys: ControlSystem
    target: np.ndarray
    T: int = 51
    dt_init: float = 0.2
    reg_weight: float = 1e-3
    amplitude_bound: Optional[float] = None
    acceleration_bound: Optional[float] = None
    mintime: bool = False
    fidelity_constraint: Optional[float] = None
    dt_min: float = 1e-3

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=complex)
        if self.reg_weight < 0:
            raise ValueError("regularization weight must be nonnegative")
        if self.T < 3:
            raise ValueError("need at least three knots")
        if self.dt_init <= 0:
            raise ValueError("dt_init must be positive")
        if self.target.shape != (self.sys.dim, self.sys.dim):
            raise ValueError("target dimension does not match the system")
        if not np.allclose(dagger(self.target) @ self.target, np.eye(self.sys.dim), atol=1e-10):
            raise ValueError("target is not unitary")
        if self.amplitude_bound is None:
            self.amplitude_bound = self.sys.amplitude_bound
        if self.acceleration_bound is None:
            self.acceleration_bound = self.sys.acceleration_bound
        if self.amplitude_bound <= 0 or self.acceleration_bound <= 0:
            raise InfeasibleError("bounds must be strictly positive")


@dataclass
class DirectSumProblem:
    subproblems: Sequence[SmoothPulseProblem]
    edges: Sequence[tuple] = ()
    edge_mode: EdgeMode = EdgeMode.ACCELERATION
    edge_weight: float = 1.0
    offsets: Optional[Sequence[AugmentedTrajectory]] = None
    offset_weight: float = 0.0
    fidelity_tol: float = 1e-4

    def __post_init__(self):
        self.edge_mode = EdgeMode(self.edge_mode)
        n = len(self.subproblems)
        if n == 0:
            raise ValueError("direct sum needs at least one subproblem")
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ValueError(f"edge ({i}, {j}) does not join two distinct subproblems")
        first = self.subproblems[0]
        for p in self.subproblems:
            if p.T != first.T or p.sys.n_channels != first.sys.n_channels or p.sys.dim != first.sys.dim:
                raise ValueError("all subproblems must share knot count, channels and dimension")
            if p.dt_init != first.dt_init:
                raise ValueError("all subproblems must share the time grid")
        if self.edge_weight < 0 or self.offset_weight < 0:
            raise ValueError("weights must be nonnegative")


@dataclass
class SolveResult:
    trajectories: list
    converged: bool
    fidelities: np.ndarray
    objective: float
    regularizer: float
    max_defect: float
    kkt_residual: float
    iterations: int
    trace: list = field(default_factory=list)
    wall_time: float = 0.0
    status: str = "nonconverged"

    @property
    def trajectory(self) -> AugmentedTrajectory:
        return self.trajectories[0]

    @property
    def infidelities(self) -> np.ndarray:
        return 1.0 - self.fidelities

    @property
    def duration(self) -> float:
        return self.trajectories[0].duration


def _sq_change(z, z0) -> float:
    """|z|^2 - |z0|^2 computed without cancellation."""
    return float(np.sum(np.real(np.conj(z - z0) * (z + z0))))


class _AugmentedLagrangian:
    """Augmented Lagrangian for N stacked subproblems on one shared time grid.

    Collocation form (``reduced=False``): the variables are the accelerations
    and the unitaries at knots 1..T, tied together by defect constraints; the
    amplitude limits are penalized and the acceleration limits are boxes.

    Reduced form (``reduced=True``): the unitaries are rolled out, U-dependent
    terms are differentiated with an adjoint sweep, and the variables are the
    interior control values.  Double integration makes the control a badly
    scaled function of the acceleration, so this swap is what lets the inner
    solver reach tight stationarity; the amplitude limits become boxes and the
    acceleration limits are penalized.  The last two accelerations do not
    reach the controls and are held at zero in this form.
    """

    def __init__(self, sys, targets, T, dt, amp, acc, *, fidelity_weight=0.0, fidelity_floor=None,
                 reg_weight=0.0, edges=(), edge_mode=EdgeMode.ACCELERATION, edge_weight=0.0,
                 offsets=None, offset_weight=0.0, time_weight=0.0, dt_bounds=None, reduced=False,
                 param="ctrl"):
        self.sys = sys
        self.targets = np.asarray(targets, dtype=complex)
        self.N = len(self.targets)
        self.T = T
        self.k = sys.n_channels
        self.d = sys.dim
        self.dt0 = float(dt)
        self.amp = float(amp)
        self.acc = float(acc)
        self.wF = float(fidelity_weight)
        self.fid_floor = fidelity_floor
        self.r = float(reg_weight)
        self.edges = np.array(edges, dtype=int).reshape(-1, 2)
        self.mode = EdgeMode(edge_mode)
        self.Re = float(edge_weight)
        self.offsets = offsets
        self.R0 = float(offset_weight)
        self.wT = float(time_weight)
        self.free_dt = dt_bounds is not None
        self.dt_bounds = dt_bounds
        self.reduced = reduced
        # collocation always works on accelerations
        self.param = param if reduced else "accel"
        if self.param not in ("accel", "ctrl"):
            raise ValueError(f"unknown parameterization {param!r}")
        self.by_ctrl = self.param == "ctrl"
        ones = np.ones(T)
        vm1, cm1 = integration_matrices(ones)
        self.vm1 = np.array(vm1)
        self.cm1 = np.array(cm1)
        # interior controls -> accelerations at unit step (trailing two are zero)
        self.am1 = controls_to_accelerations(np.eye(T)[1:-1], ones).T
        self.n_var = self.N * self.k * (T - 2 if self.by_ctrl else T)
        self.n_u = 0 if reduced else self.N * T * self.d * self.d
        self.size = self.n_var + 2 * self.n_u + (1 if self.free_dt else 0)
        self.lam_dyn = np.zeros((self.N, T, self.d, self.d), dtype=complex)
        # box-type penalties: amplitude (collocation) or acceleration (reduced)
        self.lam_box = np.zeros((2, self.N, self.k, T))
        self.lam_fid = np.zeros(self.N)
        self.mu = 1.0
        self._kj_stack = sys.control_stack
        self.anchor = None

    # -- packing ----------------------------------------------------------
    def pack(self, accel, us=None, dt=None):
        dt = self.dt0 if dt is None else dt
        accel = np.asarray(accel, dtype=float)
        if self.by_ctrl:
            parts = [(accel @ (self.cm1 * dt**2).T)[..., 1:-1].ravel()]
        else:
            parts = [accel.ravel()]
        if not self.reduced:
            parts += [us[:, 1:].real.ravel(), us[:, 1:].imag.ravel()]
        if self.free_dt:
            parts.append([dt])
        return np.concatenate(parts)

    def unpack(self, x):
        """Accelerations, unitaries (None in reduced form) and timestep."""
        N, T, k, d = self.N, self.T, self.k, self.d
        dt = float(x[-1]) if self.free_dt else self.dt0
        if self.by_ctrl:
            accel = x[:self.n_var].reshape(N, k, T - 2) @ self.am1.T / dt**2
        else:
            accel = x[:self.n_var].reshape(N, k, T)
        if self.reduced:
            return accel, None, dt
        re = x[self.n_var:self.n_var + self.n_u].reshape(N, T, d, d)
        im = x[self.n_var + self.n_u:self.n_var + 2 * self.n_u].reshape(N, T, d, d)
        us = np.empty((N, T + 1, d, d), dtype=complex)
        us[:, 0] = np.eye(d)
        us[:, 1:] = re + 1j * im
        return accel, us, dt

    def bounds(self):
        lim = self.amp if self.by_ctrl else self.acc
        b = [(-lim, lim)] * self.n_var + [(None, None)] * (2 * self.n_u)
        if self.free_dt:
            b.append(self.dt_bounds)
        return b

    # -- evaluation -------------------------------------------------------
    def _state(self, x):
        dt = float(x[-1]) if self.free_dt else self.dt0
        accel, us, _ = self.unpack(x)
        if self.by_ctrl:
            ctrl = np.zeros((self.N, self.k, self.T))
            ctrl[..., 1:-1] = x[:self.n_var].reshape(self.N, self.k, self.T - 2)
        else:
            ctrl = accel @ self.cm1.T * dt**2
        vel = accel @ self.vm1.T * dt
        hs = self.sys.hamiltonians(ctrl)
        w, v = np.linalg.eigh(hs)
        ph = np.exp(-1j * w * dt)
        props = (v * ph[..., None, :]) @ dagger(v)
        if self.reduced:
            us = _chain(props)
            defect = np.zeros((self.N, self.T, self.d, self.d), dtype=complex)
        else:
            defect = us[:, 1:] - props @ us[:, :-1]
        overlap = np.einsum("nab,nab->n", np.conj(self.targets), us[:, -1])
        fid = np.abs(overlap) / self.d
        return dict(accel=accel, us=us, dt=dt, ctrl=ctrl, vel=vel, hs=hs, w=w, v=v,
                    props=props, defect=defect, overlap=overlap, fid=fid)

    def _boxed(self, st):
        """The quantity whose limits are penalized rather than boxed."""
        return (st["accel"], self.acc) if self.by_ctrl else (st["ctrl"], self.amp)

    def constraint_violation(self, st):
        dyn = float(np.max(np.abs(st["defect"]), initial=0.0))
        amp = float(np.max(np.abs(st["ctrl"]) - self.amp, initial=0.0))
        amp = max(amp, float(np.max(np.abs(st["accel"]) - self.acc, initial=0.0)))
        fid = 0.0
        if self.fid_floor is not None:
            fid = float(np.max(self.fid_floor - st["fid"], initial=0.0))
        return dyn, max(amp, 0.0), max(fid, 0.0)

    def _edge_vars(self, st):
        if self.mode is EdgeMode.ACCELERATION:
            return st["accel"]
        if self.mode is EdgeMode.CONTROL:
            return st["ctrl"]
        return st["us"]

    def objective_terms(self, st):
        """Objective pieces, constraint terms excluded."""
        out = {}
        accel, ctrl, vel, dt = st["accel"], st["ctrl"], st["vel"], st["dt"]
        out["infidelity"] = float(np.sum(1.0 - st["fid"]))
        out["regularizer"] = 0.5 * self.r * dt * float(np.sum(ctrl**2) + np.sum(vel**2) + np.sum(accel**2))
        out["edges"] = 0.0
        if len(self.edges) and self.Re > 0:
            xi = self._edge_vars(st)
            diff = xi[self.edges[:, 0]] - xi[self.edges[:, 1]]
            out["edges"] = 0.5 * self.Re * float(np.sum(np.abs(diff) ** 2))
        out["offsets"] = 0.0
        if self.offsets is not None and self.R0 > 0:
            diff = self._edge_vars(st) - self.offsets
            out["offsets"] = 0.5 * self.R0 * float(np.sum(np.abs(diff) ** 2))
        out["duration"] = self.T * dt
        out["objective"] = (self.wF * out["infidelity"] + out["regularizer"] + out["edges"] + out["offsets"]
                            + self.wT * out["duration"])
        return out

    def _trace_derivative(self, st, left):
        """Re Tr(left_t dP_t/dctrl_jt) for every channel and knot -> (N, k, T)."""
        v = st["v"]
        gamma = propagator_derivative_kernel(st["w"], np.full(st["w"].shape[:-1], st["dt"]))
        m = dagger(v) @ left @ v
        kj = np.einsum("ntak,jab,ntbl->ntjkl", np.conj(v), self._kj_stack, v)
        return np.real(np.einsum("ntlk,ntkl,ntjkl->njt", m, gamma, kj))

    def __call__(self, x):
        st = self._state(x)
        accel, us, dt, ctrl, vel = st["accel"], st["us"], st["dt"], st["ctrl"], st["vel"]
        props = st["props"]
        mu = self.mu
        # partial derivatives, treating accel, vel, ctrl, U and dt as independent
        g_acc = np.zeros_like(accel)
        g_vel = np.zeros_like(vel)
        g_ctrl = np.zeros_like(ctrl)
        g_us = np.zeros_like(us)
        g_dt = 0.0
        val = 0.0

        # fidelity, in the objective and/or as a floor constraint on U_T
        phase = st["overlap"] / np.maximum(np.abs(st["overlap"]), 1e-300)
        dfid = self.targets * phase[:, None, None] / self.d
        coef = np.full(self.N, -self.wF)
        val += self.wF * float(np.sum(1.0 - st["fid"]))
        if self.fid_floor is not None:
            shifted = np.maximum(0.0, self.lam_fid + mu * (self.fid_floor - st["fid"]))
            val += float(np.sum(shifted**2 - self.lam_fid**2)) / (2 * mu)
            coef = coef - shifted
        g_us[:, -1] += coef[:, None, None] * dfid

        # smoothness regularizer 1/2 r dt (|a|^2 + |da|^2 + |dda|^2)
        if self.r > 0:
            sq = float(np.sum(ctrl**2) + np.sum(vel**2) + np.sum(accel**2))
            if self.anchor is None:
                val += 0.5 * self.r * dt * sq
            else:
                a0 = self.anchor
                dsq = sum(_sq_change(z, a0[key]) for z, key in ((ctrl, "ctrl"), (vel, "vel"), (accel, "accel")))
                val += 0.5 * self.r * (dt * dsq + (dt - a0["dt"]) * a0["sq"])
            g_ctrl += self.r * dt * ctrl
            g_vel += self.r * dt * vel
            g_acc += self.r * dt * accel
            g_dt += 0.5 * self.r * sq

        # graph coupling and offsets on the selected variables
        has_edges = len(self.edges) and self.Re > 0
        has_offsets = self.offsets is not None and self.R0 > 0
        if has_edges or has_offsets:
            xi = self._edge_vars(st)
            gx = np.zeros_like(xi)
            if has_edges:
                i, j = self.edges[:, 0], self.edges[:, 1]
                diff = xi[i] - xi[j]
                if self.anchor is None:
                    val += 0.5 * self.Re * float(np.sum(np.abs(diff) ** 2))
                else:
                    val += 0.5 * self.Re * _sq_change(diff, self.anchor["edges"])
                np.add.at(gx, i, self.Re * diff)
                np.add.at(gx, j, -self.Re * diff)
            if has_offsets:
                diff = xi - self.offsets
                if self.anchor is None:
                    val += 0.5 * self.R0 * float(np.sum(np.abs(diff) ** 2))
                else:
                    val += 0.5 * self.R0 * _sq_change(diff, self.anchor["offsets"])
                gx += self.R0 * diff
            if self.mode is EdgeMode.ACCELERATION:
                g_acc += gx
            elif self.mode is EdgeMode.CONTROL:
                g_ctrl += gx
            else:
                g_us += gx

        if self.wT > 0:
            val += self.wT * self.T * (dt if self.anchor is None else dt - self.anchor["dt"])
            g_dt += self.wT * self.T

        # |q| <= lim as two one-sided constraints
        q, lim = self._boxed(st)
        up = np.maximum(0.0, self.lam_box[0] + mu * (q - lim))
        lo = np.maximum(0.0, self.lam_box[1] + mu * (-q - lim))
        val += float(np.sum(up**2 - self.lam_box[0] ** 2) + np.sum(lo**2 - self.lam_box[1] ** 2)) / (2 * mu)
        if self.by_ctrl:
            g_acc += up - lo
        else:
            g_ctrl += up - lo

        if self.reduced:
            # adjoint sweep: adj_t = g_t + P_t^dag adj_{t+1}
            left = np.empty_like(props)
            adj = g_us[:, -1]
            for t in range(self.T - 1, -1, -1):
                left[:, t] = us[:, t] @ dagger(adj)
                adj = g_us[:, t] + dagger(props[:, t]) @ adj
            sign = 1.0
        else:
            lam = self.lam_dyn + mu * st["defect"]
            val += float(np.sum(np.real(np.conj(self.lam_dyn) * st["defect"]))) + 0.5 * mu * float(
                np.sum(np.abs(st["defect"]) ** 2))
            g_us[:, 1:] += lam
            g_us[:, :-1] -= dagger(props) @ lam
            left = us[:, :-1] @ dagger(lam)
            sign = -1.0
        # Re Tr(adj^dag dP U) = Re Tr(U adj^dag dP)
        g_ctrl += sign * self._trace_derivative(st, left)
        if self.free_dt:
            g_dt += sign * float(np.real(np.einsum("ntab,ntba->", left, -1j * st["hs"] @ props)))

        # chain rule to the decision variables
        if self.by_ctrl:
            # accel = c A / dt^2, vel = accel Vm1 dt, ctrl = c
            g_acc_tot = g_acc + g_vel @ self.vm1 * dt
            g_var = g_ctrl[..., 1:-1] + g_acc_tot @ self.am1 / dt**2
            g_dt += -2.0 * float(np.sum(g_acc_tot * accel)) / dt + float(np.sum(g_vel * vel)) / dt
        else:
            # vel = accel Vm1 dt, ctrl = accel Cm1 dt^2
            g_var = g_acc + g_vel @ self.vm1 * dt + g_ctrl @ self.cm1 * dt**2
            g_dt += float(np.sum(g_vel * vel)) / dt + 2.0 * float(np.sum(g_ctrl * ctrl)) / dt
        grad = [g_var.ravel()]
        if not self.reduced:
            grad += [g_us[:, 1:].real.ravel(), g_us[:, 1:].imag.ravel()]
        if self.free_dt:
            grad.append([g_dt])
        return val, np.concatenate(grad)

    def set_anchor(self, x):
        """Report quadratic terms relative to their values at ``x``.

        Large edge and offset sums otherwise swamp the tiny decreases the
        line search must resolve near a tight stationarity tolerance.
        """
        self.anchor = None
        st = self._state(x)
        a0 = dict(ctrl=st["ctrl"], vel=st["vel"], accel=st["accel"], dt=st["dt"])
        a0["sq"] = float(np.sum(st["ctrl"] ** 2) + np.sum(st["vel"] ** 2) + np.sum(st["accel"] ** 2))
        xi = self._edge_vars(st)
        a0["edges"] = xi[self.edges[:, 0]] - xi[self.edges[:, 1]] if len(self.edges) else None
        a0["offsets"] = xi - self.offsets if self.offsets is not None else None
        self.anchor = a0

    def update_multipliers(self, st, x=None):
        mu = self.mu
        if not self.reduced:
            self.lam_dyn = self.lam_dyn + mu * st["defect"]
        q, lim = self._boxed(st)
        self.lam_box[0] = np.maximum(0.0, self.lam_box[0] + mu * (q - lim))
        self.lam_box[1] = np.maximum(0.0, self.lam_box[1] + mu * (-q - lim))
        if self.fid_floor is not None:
            first_order = np.maximum(0.0, self.lam_fid + mu * (self.fid_floor - st["fid"]))
            if self.reduced and x is not None:
                # near-active floors: least-squares estimate from stationarity
                est = self._fidelity_multiplier_estimate(x)
                active = st["fid"] <= self.fid_floor + 1e-6
                first_order = np.where(active, est, first_order)
            self.lam_fid = first_order

    def _fidelity_multiplier_estimate(self, x):
        """lam_j minimizing |grad(rest)_j - lam_j grad(F_j)| over variables off their bounds."""
        saved = (self.fid_floor, self.wF, self.r, self.Re, self.R0, self.wT, self.lam_box, self.mu)
        try:
            self.fid_floor = None
            _, g_rest = self(x)
            # gradient of sum_j F_j alone
            self.wF, self.r, self.Re, self.R0, self.wT = -1.0, 0.0, 0.0, 0.0, 0.0
            self.lam_box = np.zeros_like(saved[6])
            self.mu = 1e-300
            _, g_fid = self(x)
        finally:
            (self.fid_floor, self.wF, self.r, self.Re, self.R0, self.wT, self.lam_box, self.mu) = saved
        bounds = self.bounds()
        lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
        hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])
        free = (x > lo + 1e-12) & (x < hi - 1e-12)
        shape = (self.N, -1)
        gr = np.where(free, g_rest, 0.0)[:self.n_var].reshape(shape)
        gf = np.where(free, g_fid, 0.0)[:self.n_var].reshape(shape)
        num = np.sum(gr * gf, axis=1)
        den = np.sum(gf * gf, axis=1)
        if self.free_dt:
            # the shared timestep couples the subproblems; only exact for N = 1
            num = num + (g_rest[-1] * g_fid[-1] if free[-1] else 0.0) / self.N
            den = den + (g_fid[-1] ** 2 if free[-1] else 0.0) / self.N
        return np.maximum(0.0, num / np.maximum(den, 1e-300))

    def projected_gradient(self, x, g):
        bounds = self.bounds()
        lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
        hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])
        return float(np.max(np.abs(np.clip(x - g, lo, hi) - x), initial=0.0))


def _run(prob: _AugmentedLagrangian, x0: np.ndarray, opts: SolverOptions, *, max_outer: int,
         stop_defect: float, tol_fid: float = 0.0, phase: str = "", start: float = None,
         mu_max: float = np.inf):
    """Outer augmented-Lagrangian loop; returns (x, status, kkt, iterations, trace).

    ``status`` is "converged" (feasible, stationarity below kkt_tol),
    "acceptable" (feasible, stationarity stalled below acceptable_kkt_tol) or
    "nonconverged".  The best feasible iterate is returned when there is one.
    """
    start = time.perf_counter() if start is None else start
    bounds = prob.bounds()
    lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
    hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])
    x = np.clip(x0, lo, hi)
    trace = []
    prev_viol = np.inf
    status = "nonconverged"
    kkt = np.inf
    best = None  # (kkt, x, outer) of the best feasible iterate
    outer = 0
    for outer in range(1, max_outer + 1):
        prob.set_anchor(x)
        res = minimize(prob, x, jac=True, method="L-BFGS-B", bounds=bounds,
                       options=dict(maxiter=opts.max_inner, gtol=opts.kkt_tol * 0.1, ftol=0.0, maxcor=20, maxls=60))
        x = res.x
        st = prob._state(x)
        dyn, amp, fid = prob.constraint_violation(st)
        viol = max(dyn, amp, fid)
        terms = prob.objective_terms(st)
        # gradient at the old multipliers = Lagrangian gradient at the new ones
        kkt = prob.projected_gradient(x, res.jac)
        prob.update_multipliers(st, x)
        rec = dict(phase=phase, iteration=outer, objective=terms["objective"], edges=terms["edges"],
                   infidelity=(1.0 - st["fid"]).tolist(), constraint_violation=viol, defect=dyn,
                   amplitude_violation=amp, fidelity_violation=fid, kkt=kkt, mu=prob.mu,
                   inner_iterations=int(res.nit), inner_status=str(res.message),
                   duration=float(prob.T * st["dt"]), elapsed=time.perf_counter() - start)
        trace.append(rec)
        log.debug("%s outer %d: obj %.4e viol %.2e kkt %.2e mu %.1e", phase, outer, terms["objective"], viol, kkt,
                  prob.mu)
        if opts.callback is not None:
            opts.callback(rec)
        feasible = dyn < stop_defect and amp < opts.bound_tol and fid <= tol_fid
        if feasible:
            if kkt < opts.kkt_tol:
                status = "converged"
                best = None
                break
            if best is None or kkt < best[0]:
                best = (kkt, x.copy(), outer)
            # rounding in the fidelity limits how small the stationarity can get
            if best[0] < opts.acceptable_kkt_tol and outer - best[2] >= opts.stall_outer:
                break
        if not prob.reduced and dyn < stop_defect and amp < opts.bound_tol:
            break
        if opts.time_limit is not None and time.perf_counter() - start > opts.time_limit:
            break
        if viol > opts.bound_tol and viol > 0.25 * prev_viol:
            prob.mu = min(prob.mu * opts.mu_growth, mu_max)
        prev_viol = viol
    if best is not None:
        kkt, x = best[0], best[1]
        if kkt < opts.acceptable_kkt_tol:
            status = "acceptable"
    return x, status, kkt, outer, trace


def _solve(kwargs: dict, accel: np.ndarray, us: np.ndarray, dt: float, opts: SolverOptions, tol_fid: float,
           param: str = "ctrl"):
    """Collocation phase followed by a polish with the dynamics eliminated."""
    start = time.perf_counter()
    colloc = _AugmentedLagrangian(**kwargs, reduced=False)
    colloc.mu = opts.mu0
    trace = []
    outer_total = 0
    if opts.collocation_outer > 0:
        x, _, _, outer, tr = _run(colloc, colloc.pack(accel, us, dt), opts, max_outer=opts.collocation_outer,
                                  stop_defect=opts.switch_defect, tol_fid=tol_fid, phase="collocation",
                                  start=start, mu_max=opts.mu_max)
        trace += tr
        outer_total += outer
        accel, _, dt = colloc.unpack(x)
    red = _AugmentedLagrangian(**kwargs, reduced=True, param=param)
    red.lam_fid = colloc.lam_fid.copy()
    if param == "accel":
        red.lam_box = colloc.lam_box.copy()
    red.mu = min(max(colloc.mu, opts.mu0), opts.polish_mu_cap)
    x, status, kkt, outer, tr = _run(red, red.pack(accel, None, dt), opts, max_outer=opts.max_outer,
                                   stop_defect=np.inf, tol_fid=tol_fid, phase="polish", start=start,
                                   mu_max=opts.polish_mu_max)
    trace += tr
    outer_total += outer
    return red, x, status, kkt, outer_total, trace, time.perf_counter() - start


def _initial_state(sys, targets, T, dt, inits, opts, acc_bound):
    """Stacked starting accelerations and unitaries for N subproblems."""
    N = len(targets)
    rng = np.random.default_rng(opts.seed)
    cm = integration_matrices(np.full(T, dt))[1]
    accel = np.empty((N, sys.n_channels, T))
    us = np.empty((N, T + 1, sys.dim, sys.dim), dtype=complex)
    for n in range(N):
        init = inits[n] if inits is not None else None
        if init is not None:
            accel[n] = np.clip(init.accel, -acc_bound, acc_bound)
            us[n] = rollout(sys, accel[n] @ cm.T, dt)
        else:
            accel[n] = np.clip(opts.jitter * rng.standard_normal((sys.n_channels, T)), -acc_bound, acc_bound)
            if opts.unitary_init == "geodesic":
                us[n] = geodesic(targets[n], T + 1)
            else:
                us[n] = rollout(sys, accel[n] @ cm.T, dt)
    return accel, us


def _finish(prob: _AugmentedLagrangian, x, status, kkt, outer, trace, wall, tol_fid=None):
    accel, _, dt = prob.unpack(x)
    dts = np.full(prob.T, dt)
    trajs = [AugmentedTrajectory.from_accel(prob.sys, accel[n].copy(), dts) for n in range(prob.N)]
    fids = np.array([gate_fidelity(tr.unitaries[-1], g) for tr, g in zip(trajs, prob.targets)])
    terms = prob.objective_terms(prob._state(x))
    max_def = max(dynamics_residual(prob.sys, tr) for tr in trajs)
    if tol_fid is not None and np.any(fids < tol_fid):
        status = "nonconverged"
    if np.any(np.abs(np.stack([t.ctrl for t in trajs])) > prob.amp * (1 + 1e-6)):
        status = "nonconverged"
    if np.any(np.abs(np.stack([t.accel for t in trajs])) > prob.acc * (1 + 1e-6)):
        status = "nonconverged"
    return SolveResult(trajs, status == "converged", fids, terms["objective"], terms["regularizer"], max_def, kkt,
                       outer, trace, wall, status)


def dynamics_residual(sys: ControlSystem, tr: AugmentedTrajectory) -> float:
    """max_t |U_{t+1} - exp(-i H(a_t) dt_t) U_t|."""
    props = expm_batch(sys.hamiltonians(tr.ctrl), tr.dt)
    return float(np.max(np.abs(tr.unitaries[1:] - props @ tr.unitaries[:-1])))


# ---------------------------------------------------------------------------
# templates


def _inner_floor(floor, opts):
    return None if floor is None else min(floor + opts.fidelity_margin, 1.0)


def solve_smooth_pulse(p: SmoothPulseProblem, init: Optional[AugmentedTrajectory] = None,
                       opts: Optional[SolverOptions] = None) -> SolveResult:
    """Minimize infidelity plus r * sum_t dt (|a|^2 + |da|^2 + |dda|^2) under bounds."""
    opts = opts or SolverOptions()
    if p.mintime:
        return solve_mintime(p, init, opts)
    floor = p.fidelity_constraint
    targets = p.target[None]
    kw = dict(sys=p.sys, targets=targets, T=p.T, dt=p.dt_init, amp=p.amplitude_bound, acc=p.acceleration_bound,
              fidelity_weight=1.0, fidelity_floor=_inner_floor(floor, opts), reg_weight=p.reg_weight)
    accel, us = _initial_state(p.sys, targets, p.T, p.dt_init, None if init is None else [init],
                               opts, p.acceleration_bound)
    out = _solve(kw, accel, us, p.dt_init, opts, tol_fid=opts.fidelity_margin)
    return _finish(*out, tol_fid=floor)


def _direct_sum_setup(p: DirectSumProblem, inits, opts: SolverOptions):
    first = p.subproblems[0]
    targets = np.stack([s.target for s in p.subproblems])
    offsets = None
    if p.offsets is not None and p.offset_weight > 0:
        if p.edge_mode is EdgeMode.ACCELERATION:
            offsets = np.stack([z.accel for z in p.offsets])
        elif p.edge_mode is EdgeMode.CONTROL:
            offsets = np.stack([z.ctrl for z in p.offsets])
        else:
            offsets = np.stack([z.unitaries for z in p.offsets])
    floor = 1.0 - p.fidelity_tol
    kw = dict(sys=first.sys, targets=targets, T=first.T, dt=first.dt_init, amp=first.amplitude_bound,
              acc=first.acceleration_bound, fidelity_floor=_inner_floor(floor, opts), edges=p.edges, edge_mode=p.edge_mode,
              edge_weight=p.edge_weight, offsets=offsets, offset_weight=p.offset_weight)
    accel, us = _initial_state(first.sys, targets, first.T, first.dt_init, inits, opts, first.acceleration_bound)
    return kw, accel, us, floor


def solve_direct_sum(p: DirectSumProblem, inits: Optional[Sequence[AugmentedTrajectory]] = None,
                     opts: Optional[SolverOptions] = None) -> SolveResult:
    """Coordinated solve of all subproblems with fidelity as a constraint."""
    opts = opts or SolverOptions()
    kw, accel, us, floor = _direct_sum_setup(p, inits, opts)
    # the acceleration coupling is well scaled only in acceleration variables
    param = opts.polish_variables
    if param == "auto":
        param = "accel" if p.edge_mode is EdgeMode.ACCELERATION and len(p.edges) else "ctrl"
    out = _solve(kw, accel, us, p.subproblems[0].dt_init, opts, tol_fid=opts.fidelity_margin, param=param)
    return _finish(*out, tol_fid=floor)


def direct_sum_objective(p: DirectSumProblem, inits: Optional[Sequence[AugmentedTrajectory]] = None,
                         opts: Optional[SolverOptions] = None, reduced: bool = False):
    """Augmented Lagrangian of a direct-sum problem as ``(f, x0)``.

    ``f(x)`` returns the value and gradient that the inner solver sees;
    ``x0`` is the packed starting point.  Meant for profiling.
    """
    opts = opts or SolverOptions()
    kw, accel, us, _ = _direct_sum_setup(p, inits, opts)
    prob = _AugmentedLagrangian(**kw, reduced=reduced, param="accel")
    prob.mu = opts.mu0
    x0 = prob.pack(accel, None if reduced else us, p.subproblems[0].dt_init)
    prob.set_anchor(x0)
    return prob, x0


def solve_mintime(p: SmoothPulseProblem, init: Optional[AugmentedTrajectory] = None,
                  opts: Optional[SolverOptions] = None, time_weight: float = 1.0) -> SolveResult:
    """Minimize the duration T * dt subject to fidelity, dynamics and bounds.

    ``init`` should be a feasible trajectory on a uniform grid; without one,
    a smooth pulse problem at ``p.dt_init`` is solved first.
    """
    opts = opts or SolverOptions()
    floor = 0.9999 if p.fidelity_constraint is None else p.fidelity_constraint
    if init is None:
        sp = SmoothPulseProblem(p.sys, p.target, p.T, p.dt_init, p.reg_weight, p.amplitude_bound,
                                p.acceleration_bound, fidelity_constraint=floor)
        res0 = solve_smooth_pulse(sp, None, opts)
        if np.any(res0.fidelities < floor - 1e-9):
            raise InfeasibleError(f"no feasible pulse at duration {p.T * p.dt_init:.3f} ns")
        init = res0.trajectory
    dt0 = float(init.dt[0])
    if not np.allclose(init.dt, dt0):
        raise ValueError("minimum-time initialization must be on a uniform grid")
    if gate_fidelity(init.unitaries[-1], p.target) < floor - 1e-9:
        raise InfeasibleError("initial trajectory does not satisfy the fidelity constraint")
    dt_max = max(opts.max_duration / p.T, dt0)
    targets = p.target[None]
    kw = dict(sys=p.sys, targets=targets, T=p.T, dt=dt0, amp=p.amplitude_bound, acc=p.acceleration_bound,
              fidelity_floor=_inner_floor(floor, opts), reg_weight=p.reg_weight * 1e-3, time_weight=time_weight,
              dt_bounds=(p.dt_min, dt_max))
    # the initial guess is already dynamically feasible, skip straight to the polish
    mopts = dataclasses.replace(opts, collocation_outer=0)
    # time-optimal pulses ride the acceleration limits, which are exact boxes only in accel variables
    param = "accel" if opts.polish_variables == "auto" else opts.polish_variables
    out = _solve(kw, init.accel[None], None, dt0, mopts, tol_fid=opts.fidelity_margin, param=param)
    return _finish(*out, tol_fid=floor)


@dataclass
class ReferenceSet:
    params: list
    edges: list
    references: list
    result: SolveResult

    @property
    def accelerations(self) -> np.ndarray:
        return np.stack([z.accel for z in self.result.trajectories])


# offset weight and node initialization per family
_SYNTHESIS_DEFAULTS = {"RZ": (10.0, "continuation"), "U2": (0.1, "independent")}


def synthesis_defaults(family: GateFamily) -> tuple[float, str]:
    """Offset weight and node initialization suited to the family.

    On the R_Z chain a strong pull toward the per-node solutions keeps the
    identity end at zero control.  Elsewhere strong offsets keep neighbours
    apart (and stall the two-qubit solve), so they are weak.  U2 switches
    solution branch along lines inside its domain; continuation would drag one
    branch across them, so its nodes start independently.
    """
    return _SYNTHESIS_DEFAULTS.get(family.name, (0.1, "continuation"))


def synthesize_references(family: GateFamily, sys: ControlSystem, counts, T: int = 51, dt: float = 0.2,
                          reg_weight: float = 1e-3, edge_mode: EdgeMode | str = EdgeMode.ACCELERATION,
                          edge_weight: float = 1.0, offset_weight: Optional[float] = None,
                          fidelity_tol: float = 1e-4, opts: Optional[SolverOptions] = None,
                          progress: Optional[Callable] = None, init: Optional[str] = None) -> ReferenceSet:
    """Smooth pulse per grid node, then one coordinated direct-sum solve.

    With ``init="continuation"`` nodes are visited in grid order and each one
    starts from the solution of its nearest solved neighbour plus jitter, so
    neighbouring references sit on the same solution branch.  With
    ``init="independent"`` every node starts from the same seeded jitter and
    its own geodesic, so each settles on its nearest branch.  The per-node
    solutions double as offsets that anchor the coordinated solve.
    ``offset_weight`` and ``init`` default per family, see ``synthesis_defaults``.
    """
    auto_weight, auto_init = synthesis_defaults(family)
    offset_weight = auto_weight if offset_weight is None else offset_weight
    init = init or auto_init
    if init not in ("continuation", "independent"):
        raise ValueError(f"unknown init {init!r}")
    opts = opts or SolverOptions()
    params, edges = make_reference_grid(family, counts)
    rng = np.random.default_rng(opts.seed)
    subs = [SmoothPulseProblem(sys, family(p), T, dt, reg_weight)
            for p in params]
    refs = []
    span = np.array([hi - lo for lo, hi in family.domain])
    for n, sp in enumerate(subs):
        start = None
        if refs and init == "continuation":
            near = int(np.argmin([np.sum(((params[n] - params[m]) / span) ** 2) for m in range(n)]))
            accel = refs[near].accel + opts.jitter * rng.standard_normal(refs[near].accel.shape)
            start = AugmentedTrajectory.from_accel(sys, accel, np.full(T, dt))
        refs.append(solve_smooth_pulse(sp, start, opts).trajectory)
        if progress is not None:
            progress("node", n)
    dp = DirectSumProblem(subs, edges, edge_mode, edge_weight, refs if offset_weight > 0 else None, offset_weight,
                          fidelity_tol)
    res = solve_direct_sum(dp, refs, dataclasses.replace(opts, collocation_outer=0))
    if progress is not None:
        progress("direct_sum", res.status)
    return ReferenceSet(params, edges, refs, res)


# ---------------------------------------------------------------------------
# graph helpers


def edge_distance(zi: AugmentedTrajectory, zj: AugmentedTrajectory, mode: EdgeMode | str) -> float:
    """Squared distance between two trajectories in the chosen variables."""
    mode = EdgeMode(mode)
    attr = {EdgeMode.CONTROL: "ctrl", EdgeMode.ACCELERATION: "accel", EdgeMode.UNITARY: "unitaries"}[mode]
    a, b = getattr(zi, attr), getattr(zj, attr)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum(np.abs(a - b) ** 2))


def total_edge_distance(trajs: Sequence[AugmentedTrajectory], edges, mode) -> float:
    return sum(edge_distance(trajs[i], trajs[j], mode) for i, j in edges)


def make_reference_grid(family: GateFamily, counts: Sequence[int] | int):
    """Uniform lattice over the family's domain and its nearest-neighbour edges."""
    counts = [counts] * family.param_count if np.isscalar(counts) else list(counts)
    if len(counts) != family.param_count:
        raise ValueError("one grid count per parameter")
    if any(c < 2 for c in counts):
        raise ValueError("grid counts must be at least 2")
    axes = [np.linspace(lo, hi, c) for (lo, hi), c in zip(family.domain, counts)]
    params = [np.array(p) for p in itertools.product(*axes)]
    index = {idx: n for n, idx in enumerate(itertools.product(*[range(c) for c in counts]))}
    edges = []
    for idx, n in index.items():
        for ax in range(len(counts)):
            nb = list(idx)
            nb[ax] += 1
            if nb[ax] < counts[ax]:
                edges.append((n, index[tuple(nb)]))
    return params, edges


def lie_algebra_dimension(sys: ControlSystem, tol: float = 1e-9) -> int:
    """Dimension of the real Lie algebra generated by i*H_0 and i*H_j."""
    gens = [1j * h for h in (sys.drift, *sys.controls) if np.max(np.abs(h)) > 0]
    basis = []

    def add(m):
        vec = np.concatenate([m.real.ravel(), m.imag.ravel()])
        if basis:
            mat = np.array(basis)
            vec = vec - mat.T @ (mat @ vec)
        n = np.linalg.norm(vec)
        if n > tol:
            basis.append(vec / n)
            return True
        return False

    frontier = [g for g in gens if add(g)]
    elements = list(frontier)
    while frontier:
        new = []
        for a in frontier:
            for b in elements:
                c = a @ b - b @ a
                if add(c):
                    new.append(c)
        elements.extend(new)
        frontier = new
    return len(basis)
