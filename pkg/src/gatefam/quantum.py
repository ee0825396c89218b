"""Dense operators, propagators, gate families and gate fidelity.

Everything here works on small dense complex matrices (d <= 4).  Batched
helpers accept arrays with arbitrary leading dimensions, ``(..., d, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

TWO_PI = 2.0 * np.pi

_PAULI = {
    "I": np.array([[1, 0], [0, 1]], dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def pauli(axis: str) -> np.ndarray:
    try:
        return _PAULI[axis.upper()].copy()
    except (KeyError, AttributeError):
        raise ValueError(f"unknown Pauli axis {axis!r}; expected one of I, X, Y, Z") from None


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("kron operands must be finite")
    return np.kron(a, b)


def dagger(m: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(m, -1, -2))


def is_hermitian(h: np.ndarray, tol: float = 1e-12) -> bool:
    return bool(np.max(np.abs(h - dagger(h)), initial=0.0) <= tol)


def is_unitary(u: np.ndarray, tol: float = 1e-10) -> bool:
    d = u.shape[-1]
    err = dagger(u) @ u - np.eye(d)
    return bool(np.max(np.abs(err), initial=0.0) < tol)


def _expm_pauli(h: np.ndarray, dt) -> np.ndarray:
    """Closed-form exp(-i h dt) for 2x2 Hermitian ``h`` (batched)."""
    c0 = 0.5 * (h[..., 0, 0] + h[..., 1, 1]).real
    hx = h[..., 0, 1].real
    hy = -h[..., 0, 1].imag
    hz = 0.5 * (h[..., 0, 0] - h[..., 1, 1]).real
    dt = np.asarray(dt, dtype=float)
    norm = np.sqrt(hx**2 + hy**2 + hz**2)
    phi = norm * dt
    cos = np.cos(phi)
    # sin(phi)/norm * dt, finite at norm == 0
    sinc = dt * np.sinc(phi / np.pi)
    phase = np.exp(-1j * c0 * dt)
    out = np.empty(np.broadcast_shapes(h.shape, np.shape(phi) + (2, 2)), dtype=complex)
    out[..., 0, 0] = phase * (cos - 1j * sinc * hz)
    out[..., 1, 1] = phase * (cos + 1j * sinc * hz)
    out[..., 0, 1] = phase * (-1j * sinc * (hx - 1j * hy))
    out[..., 1, 0] = phase * (-1j * sinc * (hx + 1j * hy))
    return out


def expm(h: np.ndarray, dt: float, tol: float = 1e-12) -> np.ndarray:
    """Return the propagator exp(-i h dt).

    2x2 generators use the Pauli closed form; anything larger goes through
    scipy's scaling-and-squaring Pade routine.
    """
    h = np.asarray(h, dtype=complex)
    if h.ndim < 2 or h.shape[-1] != h.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {h.shape}")
    if not is_hermitian(h, tol * max(1.0, float(np.max(np.abs(h), initial=0.0)))):
        raise ValueError("generator is not Hermitian")
    if not np.isfinite(dt):
        raise ValueError("dt must be finite")
    if h.shape[-1] == 2:
        return _expm_pauli(h, dt)
    return scipy.linalg.expm(-1j * dt * h)


def expm_batch(h: np.ndarray, dt) -> np.ndarray:
    """Propagators for a stack of Hermitian generators, no validation.

    ``dt`` broadcasts against the leading dimensions of ``h``.
    """
    if h.shape[-1] == 2:
        return _expm_pauli(h, dt)
    w, v = np.linalg.eigh(h)
    ph = np.exp(-1j * w * np.asarray(dt, dtype=float)[..., None])
    return (v * ph[..., None, :]) @ dagger(v)


def propagator_derivative_kernel(w: np.ndarray, dt) -> np.ndarray:
    """Divided differences of f(x) = exp(-i x dt) on the eigenvalues ``w``.

    For H = V diag(w) V^dagger, the directional derivative of exp(-i H dt)
    along E is V (Gamma * (V^dagger E V)) V^dagger with Gamma returned here.
    """
    dt = np.asarray(dt, dtype=float)[..., None, None]
    half_gap = 0.5 * (w[..., :, None] - w[..., None, :]) * dt
    mean = 0.5 * (w[..., :, None] + w[..., None, :])
    # (f(a) - f(b)) / (a - b) written without the division, exact at a == b
    return -1j * dt * np.exp(-1j * mean * dt) * np.sinc(half_gap / np.pi)


def gate_fidelity(u: np.ndarray, g: np.ndarray) -> float:
    """Normalized trace overlap |Tr(U^dagger G)| / d."""
    u = np.asarray(u)
    g = np.asarray(g)
    if u.shape != g.shape or u.shape[-1] != u.shape[-2]:
        raise ValueError(f"dimension mismatch: {u.shape} vs {g.shape}")
    d = u.shape[-1]
    return np.abs(np.einsum("...ij,...ij->...", np.conj(u), g)) / d


def heisenberg_observable(unitaries: Sequence[np.ndarray], obs: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Expectation <psi| U_t^dagger O U_t |psi> for each unitary in the list."""
    us = np.asarray(unitaries, dtype=complex)
    psi = np.asarray(psi, dtype=complex).reshape(-1)
    obs = np.asarray(obs, dtype=complex)
    if us.shape[-1] != psi.shape[0] or obs.shape != us.shape[-2:]:
        raise ValueError("inconsistent dimensions between unitaries, observable and state")
    states = us @ psi
    vals = np.einsum("ti,ij,tj->t", np.conj(states), obs, states)
    return vals.real


# ---------------------------------------------------------------------------
# Control systems


@dataclass(frozen=True)
class ControlSystem:
    drift: np.ndarray
    controls: tuple
    channel_names: tuple
    amplitude_bound: float = 1.0
    acceleration_bound: float = 1.0

    def __post_init__(self):
        d = self.drift.shape[0]
        for h in (self.drift, *self.controls):
            if h.shape != (d, d):
                raise ValueError("all operators must share one dimension")
            if not is_hermitian(h):
                raise ValueError("control system operators must be Hermitian")
        if len(self.channel_names) != len(self.controls):
            raise ValueError("one channel name per control operator")
        if self.amplitude_bound <= 0 or self.acceleration_bound <= 0:
            raise ValueError("bounds must be strictly positive")

    @property
    def dim(self) -> int:
        return self.drift.shape[0]

    @property
    def n_channels(self) -> int:
        return len(self.controls)

    @property
    def control_stack(self) -> np.ndarray:
        return np.stack(self.controls)

    def hamiltonians(self, ctrl: np.ndarray) -> np.ndarray:
        """Generators for controls shaped (..., channels, T) -> (..., T, d, d)."""
        ctrl = np.asarray(ctrl, dtype=float)
        return self.drift + np.einsum("...jt,jab->...tab", ctrl, self.control_stack)


def build_hamiltonian(sys: ControlSystem, a: Sequence[float]) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != (sys.n_channels,):
        raise ValueError(f"expected {sys.n_channels} control values, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("control values must be finite")
    return sys.drift + np.tensordot(a, sys.control_stack, axes=1)


def iswap_coupling() -> np.ndarray:
    x, y = pauli("X"), pauli("Y")
    return 0.5 * (kron(x, x) + kron(y, y))


def single_qubit_system(amplitude_bound: float = 1.0, acceleration_bound: float = 1.0) -> ControlSystem:
    """One qubit driven on X and Y, no drift."""
    return ControlSystem(
        drift=np.zeros((2, 2), dtype=complex),
        controls=(pauli("X"), pauli("Y")),
        channel_names=("X", "Y"),
        amplitude_bound=amplitude_bound,
        acceleration_bound=acceleration_bound,
    )


def two_qubit_system(amplitude_bound: float = 1.0, acceleration_bound: float = 1.0) -> ControlSystem:
    """Two qubits with local X/Y drives and a tunable iSWAP coupling."""
    i2, x, y = pauli("I"), pauli("X"), pauli("Y")
    return ControlSystem(
        drift=np.zeros((4, 4), dtype=complex),
        controls=(kron(x, i2), kron(y, i2), kron(i2, x), kron(i2, y), iswap_coupling()),
        channel_names=("X1", "Y1", "X2", "Y2", "iSWAP12"),
        amplitude_bound=amplitude_bound,
        acceleration_bound=acceleration_bound,
    )


def make_system(qubits: int, amplitude_bound: float = 1.0, acceleration_bound: float = 1.0) -> ControlSystem:
    if qubits == 1:
        return single_qubit_system(amplitude_bound, acceleration_bound)
    if qubits == 2:
        return two_qubit_system(amplitude_bound, acceleration_bound)
    raise ValueError("only 1- and 2-qubit systems are modelled")


# ---------------------------------------------------------------------------
# Gate families


def rz(theta: float) -> np.ndarray:
    return np.diag([np.exp(-0.5j * theta), np.exp(0.5j * theta)])


def ry(phi: float) -> np.ndarray:
    c, s = np.cos(phi / 2), np.sin(phi / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


def rx(phi: float) -> np.ndarray:
    c, s = np.cos(phi / 2), np.sin(phi / 2)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)


def u2(theta: float, phi: float) -> np.ndarray:
    return np.array(
        [[1.0, -np.exp(1j * phi)], [np.exp(1j * theta), np.exp(1j * (theta + phi))]],
        dtype=complex,
    ) / np.sqrt(2.0)


_XY_MINUS_YX = kron(pauli("X"), pauli("Y")) - kron(pauli("Y"), pauli("X"))


def adapt12(theta: float) -> np.ndarray:
    """Two-qubit QEB operator exp(i theta/2 (X1 Y2 - Y1 X2))."""
    # generator is Hermitian, so exp(i a K) = exp(-i K (-a))
    return expm(_XY_MINUS_YX, -0.5 * theta)


CNOT = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex)


@dataclass(frozen=True)
class GateFamily:
    name: str
    param_count: int
    evaluator: Callable[..., np.ndarray] = field(repr=False)
    domain: tuple = ()
    qubits: int = 1

    def __call__(self, theta: Sequence[float] = ()) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float)) if self.param_count else ()
        if self.param_count and len(theta) != self.param_count:
            raise ValueError(f"{self.name} takes {self.param_count} parameters")
        return self.evaluator(*theta)

    def contains(self, theta: Sequence[float], tol: float = 1e-12) -> bool:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        lo = np.array([d[0] for d in self.domain])
        hi = np.array([d[1] for d in self.domain])
        return bool(np.all(theta >= lo - tol) and np.all(theta <= hi + tol))

    def lower(self) -> np.ndarray:
        return np.array([d[0] for d in self.domain], dtype=float)

    def upper(self) -> np.ndarray:
        return np.array([d[1] for d in self.domain], dtype=float)

    def batch(self, params: np.ndarray) -> np.ndarray:
        """Targets for an array of parameter vectors, shape (n, d, d)."""
        params = np.asarray(params, dtype=float).reshape(len(params), -1)
        return np.stack([self(p) for p in params])


_FAMILIES = {
    "RZ": (1, rz, 1),
    "RZRY": (2, lambda t, p: rz(t) @ ry(p), 1),
    "U2": (2, u2, 1),
    "ADAPT12": (1, adapt12, 2),
    "CNOT": (0, lambda: CNOT.copy(), 2),
    "RX90": (0, lambda: rx(np.pi / 2), 1),
}

FAMILY_NAMES = tuple(_FAMILIES)


def gate_family(name: str) -> GateFamily:
    key = name.upper()
    if key not in _FAMILIES:
        raise ValueError(f"unknown gate family {name!r}; choose from {', '.join(_FAMILIES)}")
    count, fn, qubits = _FAMILIES[key]
    return GateFamily(key, count, fn, tuple((0.0, TWO_PI) for _ in range(count)), qubits)


def unitary_log(u: np.ndarray) -> np.ndarray:
    """Hermitian generator K with u = exp(-i K), principal branch."""
    t, q = scipy.linalg.schur(u, output="complex")
    ang = np.angle(np.diag(t))
    return (q * ang) @ dagger(q) * -1.0


def geodesic(g: np.ndarray, steps: int) -> np.ndarray:
    """Unitaries exp(-i s K) along the geodesic from I to ``g``, s in [0, 1]."""
    k = -unitary_log(g)
    k = 0.5 * (k + dagger(k))
    w, v = np.linalg.eigh(k)
    s = np.linspace(0.0, 1.0, steps)
    ph = np.exp(1j * s[:, None] * w[None, :])
    return (v[None] * ph[:, None, :]) @ dagger(v)[None]
