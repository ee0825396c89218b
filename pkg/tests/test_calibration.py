import numpy as np
import pytest

from gatefam.calibration import (
    TransferMatrix,
    calibrated_pulse,
    default_sequence,
    distort,
    evaluate_distorted,
    exact_last_layer_correction,
    sample_transfer,
    transfer_learn,
)
from gatefam.network import InterpolatorNetwork, evaluate
from gatefam.quantum import gate_family, single_qubit_system
from gatefam.trajectory import integrate_accelerations, rollout

S1 = single_qubit_system()
RZ = gate_family("RZ")
U2 = gate_family("U2")


def net_for(fam=RZ, T=20, seed=0):
    return InterpolatorNetwork.for_family(fam, S1, T, hidden=(16, 16), seed=seed, readout_gain=2.0)


def test_sample_transfer():
    assert np.array_equal(sample_transfer(3, 0.0, 1).M, np.eye(3))
    Ms = [sample_transfer(2, 0.1, s).M for s in range(200)]
    off = np.abs([M[0, 1] for M in Ms])
    # three sigma holds for 99.7% of draws
    assert np.mean(off < 0.3) >= 0.97
    assert 0.05 < np.std([M[0, 1] for M in Ms]) < 0.15
    M = Ms[0]
    assert np.allclose(M @ np.linalg.inv(M), np.eye(2), atol=1e-12)
    assert np.array_equal(sample_transfer(2, 0.1, 5).M, sample_transfer(2, 0.1, 5).M)
    with pytest.raises(ValueError):
        sample_transfer(2, -0.1, 0)
    with pytest.raises(ValueError):
        TransferMatrix(np.zeros((2, 2)))


def test_distort_examples(rng):
    ctrl = rng.standard_normal((2, 15))
    assert np.array_equal(distort(np.eye(2), ctrl), ctrl)
    assert not distort(sample_transfer(2, 0.1, 0), np.zeros((2, 5))).any()
    Tm = sample_transfer(2, 0.1, 3)
    assert np.allclose(distort(Tm.inverse(), distort(Tm, ctrl)), ctrl, atol=1e-12)
    with pytest.raises(ValueError):
        distort(Tm, np.zeros((3, 5)))


def test_calibrated_pulse_undoes_distortion():
    net = net_for()
    Tm = sample_transfer(2, 0.1, 4)
    theta = [2.0]
    _, ctrl = integrate_accelerations(net.forward(theta), 0.2)
    cal = calibrated_pulse(Tm, net, theta, 0.2)
    assert np.allclose(calibrated_pulse(np.eye(2), net, theta, 0.2), ctrl)
    u_dist = rollout(S1, distort(Tm, cal), 0.2)
    u_orig = rollout(S1, ctrl, 0.2)
    assert np.max(np.abs(u_dist - u_orig)) < 1e-10


def test_exact_correction_restores_statistics():
    net = net_for(U2)
    Tm = sample_transfer(2, 0.1, 7)
    params = np.random.default_rng(0).uniform(0, 2 * np.pi, (200, 2))
    base = evaluate(net, U2, S1, 0.2, params)
    fixed = exact_last_layer_correction(net, Tm)
    m, s, per = evaluate_distorted(fixed, Tm, U2, S1, 0.2, params)
    assert abs(m - base[0]) < 1e-10 and abs(s - base[1]) < 1e-10
    assert np.max(np.abs(per - base[2])) < 1e-10
    assert fixed.frozen_hash() == net.frozen_hash()
    ident = exact_last_layer_correction(net, np.eye(2))
    assert np.allclose(ident.weights[-1], net.weights[-1])


def test_exact_correction_composition_and_involution():
    net = net_for()
    T1, T2 = sample_transfer(2, 0.1, 1), sample_transfer(2, 0.1, 2)
    seq = exact_last_layer_correction(exact_last_layer_correction(net, T1), T2)
    # each correction multiplies the current output by its inverse, so the
    # sequence is the correction for the product T1 T2
    once = exact_last_layer_correction(net, T1.M @ T2.M)
    theta = np.linspace(0, 6, 7)[:, None]
    assert np.allclose(seq.forward(theta), once.forward(theta), atol=1e-12)
    back = exact_last_layer_correction(exact_last_layer_correction(net, T1), T1.inverse())
    assert np.allclose(back.forward(theta), net.forward(theta), atol=1e-12)


def test_transfer_learn_identity_is_flat():
    net = net_for()
    test = np.linspace(0, 6, 30)[:, None]
    out, run = transfer_learn(net, np.eye(2), RZ, S1, 0.2, default_sequence(RZ, 3), test_params=test)
    base = evaluate(net, RZ, S1, 0.2, test)[0]
    assert np.allclose(run.test_infidelity, base, atol=1e-12)
    assert np.allclose(out.weights[-1], net.weights[-1])


def test_transfer_learn_freezes_body_and_improves():
    net = net_for(T=20, seed=3)
    Tm = sample_transfer(2, 0.2, 11)
    test = np.linspace(0, 2 * np.pi, 60)[:, None]
    # target is the network's own pulse, so the distortion is the only error
    fixed = exact_last_layer_correction(net, Tm)
    out, run = transfer_learn(net, Tm, RZ, S1, 0.2, default_sequence(RZ, 8), grad_threshold=1e-10,
                              test_params=test)
    assert out.frozen_hash() == net.frozen_hash() == run.frozen_hash
    assert all(np.array_equal(a, b) for a, b in zip(out.weights[:-1], net.weights[:-1]))
    assert not np.array_equal(out.weights[-1], net.weights[-1])
    assert len(run.test_infidelity) == 8
    # on the visited points the distorted output reproduces the original pulse
    seq = default_sequence(RZ, 8)
    want = integrate_accelerations(net.forward(seq), 0.2)[1]
    got = distort(Tm, integrate_accelerations(out.forward(seq), 0.2)[1])
    raw = distort(Tm, want)
    assert np.max(np.abs(got - want)) < 1e-2 * np.max(np.abs(raw - want))


def test_default_sequence():
    s = default_sequence(RZ, 5)
    assert np.allclose(s[:, 0], np.linspace(0, 2 * np.pi, 5))
    s2 = default_sequence(U2, 10)
    assert s2.shape == (10, 2) and np.all((s2 >= 0) & (s2 <= 2 * np.pi))
