import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gatefam.quantum import expm, gate_fidelity, is_unitary, pauli, single_qubit_system, two_qubit_system, unitary_log
from gatefam.trajectory import (
    AugmentedTrajectory,
    controls_to_accelerations,
    fidelities,
    fidelity_and_gradient,
    fidelity_and_gradient_batch,
    integrate_accelerations,
    magnus_effective_hamiltonian,
    rollout,
    rz_magnus_residuals,
)

from conftest import random_unitary


def euler_loop(accel, dt):
    """Forward-Euler double integration by explicit recurrence, vel_0 fixed by ctrl_{T-1} = 0."""
    accel = np.asarray(accel, dtype=float)
    k, T = accel.shape

    def run(v0, a):
        vel = np.zeros((k, T))
        ctrl = np.zeros((k, T))
        vel[:, 0] = v0
        for t in range(T - 1):
            ctrl[:, t + 1] = ctrl[:, t] + vel[:, t] * dt[t]
            vel[:, t + 1] = vel[:, t] + a[:, t] * dt[t]
        return vel, ctrl

    _, c0 = run(np.zeros(k), accel)
    v0 = -c0[:, -1] / np.sum(dt[:-1])
    return run(v0, accel)


@pytest.mark.parametrize("uniform", [True, False])
def test_integration_matches_recurrence(rng, uniform):
    T = 30
    dt = np.full(T, 0.2) if uniform else rng.uniform(0.05, 0.4, T)
    accel = rng.uniform(-1, 1, (3, T))
    vel, ctrl = integrate_accelerations(accel, dt)
    vel_ref, ctrl_ref = euler_loop(accel, dt)
    assert np.max(np.abs(ctrl - ctrl_ref)) < 1e-10
    assert np.max(np.abs(vel - vel_ref)) < 1e-10


def test_integration_examples():
    T = 21
    vel, ctrl = integrate_accelerations(np.zeros((2, T)), 0.2)
    assert not vel.any() and not ctrl.any()
    # accelerate, brake through the middle, accelerate back: velocity is antisymmetric
    a = np.zeros((1, T))
    a[0, :5], a[0, 5:15], a[0, 15:19] = 1.0, -1.0, 1.0
    vel, c = integrate_accelerations(a, 0.2)
    # closed-form double sum with vel_0 = 0: c_k = dt^2 sum_{s<k} sum_{t<s} a_t
    k = np.arange(T)
    ref = 0.04 * np.array([sum(a[0, :s].sum() for s in range(n)) for n in k])
    assert np.allclose(c[0], ref, atol=1e-14) and abs(vel[0, 0]) < 1e-14
    assert abs(c[0, -1]) < 1e-14
    assert np.allclose(c[0, 1:], c[0, 1:][::-1], atol=1e-14)
    assert np.argmax(c[0]) in (T // 2, T // 2 + 1)
    with pytest.raises(ValueError):
        integrate_accelerations(np.zeros((1, 5)), [0.1, 0.1, -0.1, 0.1, 0.1])


@given(st.integers(0, 2**31), st.integers(3, 60))
def test_endpoints_pinned(seed, T):
    rng = np.random.default_rng(seed)
    accel = rng.uniform(-5, 5, (2, T))
    _, ctrl = integrate_accelerations(accel, rng.uniform(0.01, 1.0))
    assert np.all(ctrl[:, 0] == 0.0)
    assert np.max(np.abs(ctrl[:, -1])) < 1e-12 * max(1.0, np.max(np.abs(ctrl)))


@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_integration_linear(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((2, 2, 15))
    dt = rng.uniform(0.1, 0.3, 15)
    lhs = integrate_accelerations(alpha * A + beta * B, dt)
    ra, rb = integrate_accelerations(A, dt), integrate_accelerations(B, dt)
    for l, a, b in zip(lhs, ra, rb):
        assert np.allclose(l, alpha * a + beta * b, atol=1e-12)


def test_controls_to_accelerations_inverts_on_observable_knots(rng):
    T = 25
    accel = rng.uniform(-1, 1, (2, T))
    _, ctrl = integrate_accelerations(accel, 0.2)
    back = controls_to_accelerations(ctrl, 0.2)
    assert np.allclose(back[:, :-2], accel[:, :-2], atol=1e-10)
    _, ctrl2 = integrate_accelerations(back, 0.2)
    assert np.allclose(ctrl2, ctrl, atol=1e-12)


def test_rollout_examples():
    s = single_qubit_system()
    us = rollout(s, np.zeros((2, 10)), 0.1)
    assert np.allclose(us, np.eye(2))
    T, dt = 10, 0.1
    c = np.pi / 4 / (T * dt)
    ctrl = np.zeros((2, T))
    ctrl[0] = c
    assert np.allclose(rollout(s, ctrl, dt)[-1], expm(pauli("X"), np.pi / 4), atol=1e-12)


def test_rollout_composition(rng):
    s = two_qubit_system()
    T, k, dt = 20, 8, 0.15
    ctrl = rng.uniform(-1, 1, (5, T))
    full = rollout(s, ctrl, dt)
    head = rollout(s, ctrl[:, :k], dt)
    tail = rollout(s, ctrl[:, k:], dt)
    assert np.allclose(tail[-1] @ head[-1], full[-1], atol=1e-10)
    assert all(is_unitary(u) for u in full)


def test_augmented_trajectory_invariants(rng):
    s = single_qubit_system()
    tr = AugmentedTrajectory.from_accel(s, rng.uniform(-1, 1, (2, 30)), 0.2)
    assert np.allclose(tr.unitaries[0], np.eye(2))
    assert tr.T == 30 and np.isclose(tr.duration, 6.0)
    assert np.all(tr.ctrl[:, 0] == 0) and np.allclose(tr.ctrl[:, -1], 0, atol=1e-13)


def _fd_grad(sys, accel, dt, g, h=1e-5):
    out = np.zeros_like(accel)
    for idx in np.ndindex(*accel.shape):
        e = np.zeros_like(accel)
        e[idx] = h
        out[idx] = (fidelity_and_gradient(sys, accel + e, dt, g)[0]
                    - fidelity_and_gradient(sys, accel - e, dt, g)[0]) / (2 * h)
    return out


def test_gradient_at_optimum_is_zero():
    s = single_qubit_system()
    f, g = fidelity_and_gradient(s, np.zeros((2, 12)), 0.2, np.eye(2))
    assert np.isclose(f, 1.0) and np.allclose(g, 0)


@pytest.mark.parametrize("qubits,T", [(1, 10), (2, 10)])
def test_gradient_matches_finite_differences(rng, qubits, T):
    s = single_qubit_system() if qubits == 1 else two_qubit_system()
    accel = rng.uniform(-1, 1, (s.n_channels, T))
    g = random_unitary(rng, s.dim)
    f, grad = fidelity_and_gradient(s, accel, 0.3, g)
    fd = _fd_grad(s, accel, 0.3, g)
    assert np.isclose(f, gate_fidelity(rollout(s, integrate_accelerations(accel, 0.3)[1], 0.3)[-1], g))
    assert np.max(np.abs(grad - fd)) / np.max(np.abs(fd)) < 1e-6


def test_batch_fidelities_agree(rng):
    s = two_qubit_system()
    accel = rng.uniform(-1, 1, (4, s.n_channels, 15))
    targets = np.stack([random_unitary(rng, 4) for _ in range(4)])
    f1, _ = fidelity_and_gradient_batch(s, accel, 0.2, targets)
    f2 = fidelities(s, accel, 0.2, targets, chunk=3)
    assert np.allclose(f1, f2, atol=1e-12)


def test_dt_derivative(rng):
    s = single_qubit_system()
    accel = rng.uniform(-1, 1, (1, 2, 12))
    g = random_unitary(rng, 2)[None]
    _, _, gdt = fidelity_and_gradient_batch(s, accel, 0.25, g, with_dt=True)
    h = 1e-6
    fp, _ = fidelity_and_gradient_batch(s, accel, 0.25 + h, g)
    fm, _ = fidelity_and_gradient_batch(s, accel, 0.25 - h, g)
    assert np.isclose(gdt[0], (fp[0] - fm[0]) / (2 * h), rtol=1e-6, atol=1e-9)


def test_magnus_examples(rng):
    s = single_qubit_system()
    assert np.allclose(magnus_effective_hamiltonian(s, np.zeros((2, 10)), 0.1), 0)
    ctrl = np.tile([[0.3], [-0.2]], (1, 10))
    h = magnus_effective_hamiltonian(s, ctrl, 0.1)
    assert np.allclose(h, 0.3 * pauli("X") - 0.2 * pauli("Y"), atol=1e-15)
    with pytest.raises(ValueError):
        magnus_effective_hamiltonian(s, ctrl, np.linspace(0.1, 0.2, 10))


def test_rz_residual_examples():
    r1, r2 = rz_magnus_residuals(np.zeros(10), np.zeros(10), 0.1, 0.0)
    assert np.allclose(r1, 0) and r2 == 0
    _, r2 = rz_magnus_residuals(np.zeros(10), np.zeros(10), 0.1, np.pi)
    assert np.isclose(r2, np.pi / 2)


def test_constant_control_rescaling_identity():
    # a_j = theta c_j / (T dt) reproduces exp(-i theta H(c)) for every theta
    s = two_qubit_system()
    c = np.array([0.3, -0.1, 0.2, 0.05, 0.4])
    T, dt = 25, 0.2
    h = sum(cj * hj for cj, hj in zip(c, s.controls))
    for theta in (0.1, 1.0, 2.5):
        ctrl = np.tile((theta * c / (T * dt))[:, None], (1, T))
        assert np.max(np.abs(rollout(s, ctrl, dt)[-1] - expm(h, theta))) < 1e-10


@pytest.mark.parametrize("qubits", [1, 2])
def test_magnus_third_order_error(qubits):
    s = single_qubit_system() if qubits == 1 else two_qubit_system()
    c = np.random.default_rng(5).uniform(-1, 1, (s.n_channels, 20))
    T, dt = 20, 0.1
    err = []
    for eps in (0.5, 0.25, 0.125):
        ctrl = eps * c
        k = unitary_log(rollout(s, ctrl, dt)[-1])
        err.append(np.linalg.norm(k - T * dt * magnus_effective_hamiltonian(s, ctrl, dt)))
    assert all(a / b >= 6 for a, b in zip(err, err[1:]))


def test_rz_residual_sign_convention():
    # the second-order Z angle of a small pulse matches the rolled-out rotation
    s = single_qubit_system()
    rng = np.random.default_rng(2)
    ctrl = 0.05 * rng.standard_normal((2, 30))
    ctrl -= ctrl.mean(axis=1, keepdims=True)
    k = unitary_log(rollout(s, ctrl, 0.2)[-1])
    theta = np.real(np.trace(k @ pauli("Z")))
    r1, r2 = rz_magnus_residuals(ctrl[0], ctrl[1], 0.2, theta)
    assert np.allclose(r1, 0, atol=1e-12)
    assert abs(r2) < 1e-3 * abs(theta)
