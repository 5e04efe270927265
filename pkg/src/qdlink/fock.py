"""Finite-dimensional state algebra for two Λ-system emitters and two optical modes.

The joint state lives on spin_A ⊗ spin_B ⊗ mode_1 ⊗ mode_2 with spins indexed
``0 = ↓, 1 = ↑`` and Fock occupations 0..2 per mode. Every emitter contributes
at most one Raman photon per attempt, so the truncation is exact.

Two-qubit density matrices are plain ``(4, 4)`` complex arrays over the basis
``(↓↓, ↓↑, ↑↓, ↑↑)``, i.e. index ``2 * s_A + s_B``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

DOWN, UP = 0, 1
NMAX = 2
BASIS_LABELS = ("dd", "du", "ud", "uu")

NORM_ATOL = 1e-12
HERMITIAN_ATOL = 1e-12
TRACE_ATOL = 1e-12
PSD_ATOL = 1e-10


class NoSuchOutcome(ValueError):
    """The requested detection outcome has zero probability."""


class ModeLabels(enum.Enum):
    EMITTER = "emitter_modes"
    OUTPUT = "output_modes"


@dataclass(frozen=True)
class JointState:
    """Pure spin-photon state, ``amplitudes[s_A, s_B, n_1, n_2]``.

    For ``ModeLabels.EMITTER`` the photon indices refer to the emission mode of
    emitter A and B; for ``ModeLabels.OUTPUT`` to beam-splitter outputs 1 and 2.
    """

    amplitudes: np.ndarray
    mode_labels: ModeLabels

    def __post_init__(self):
        amps = np.array(self.amplitudes, dtype=complex)
        if amps.shape != (2, 2, NMAX + 1, NMAX + 1):
            raise ValueError(f"amplitude array must have shape (2, 2, 3, 3), got {amps.shape}")
        if not np.all(np.isfinite(amps)):
            raise ValueError("amplitudes must be finite")
        n1, n2 = np.indices((NMAX + 1, NMAX + 1))
        if np.any(np.abs(amps[:, :, n1 + n2 > NMAX]) > 0):
            raise ValueError("basis terms with more than two photons in total are not representable")
        norm = np.sum(np.abs(amps) ** 2)
        if abs(norm - 1.0) > NORM_ATOL:
            raise ValueError(f"state is not normalized (norm² = {norm!r})")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    def amplitude(self, s_a: int, s_b: int, n1: int, n2: int) -> complex:
        return complex(self.amplitudes[s_a, s_b, n1, n2])

    def photon_sector_probabilities(self) -> np.ndarray:
        """Probability of 0, 1 and 2 photons in total."""
        n1, n2 = np.indices((NMAX + 1, NMAX + 1))
        weights = np.sum(np.abs(self.amplitudes) ** 2, axis=(0, 1))
        return np.array([weights[n1 + n2 == k].sum() for k in range(NMAX + 1)])


def build_post_pulse_state(p: float, phi_a: float, phi_b: float, initial=(DOWN, DOWN)) -> JointState:
    """Product state of both emitters right after the Raman pulse.

    Each emitter prepared in ↓ evolves to ``√(1-p)|↓,0⟩ + e^{iφ}√p|↑,1⟩``.
    An emitter already in ↑ (failed initialization) is shelved: it stays in
    ``|↑,0⟩`` and scatters nothing.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability must lie in [0, 1], got {p!r}")
    amps = np.zeros((2, 2, NMAX + 1, NMAX + 1), dtype=complex)
    single = []
    for spin, phi in zip(initial, (phi_a, phi_b)):
        if spin == DOWN:
            single.append({(DOWN, 0): math.sqrt(1.0 - p), (UP, 1): np.exp(1j * phi) * math.sqrt(p)})
        elif spin == UP:
            single.append({(UP, 0): 1.0})
        else:
            raise ValueError(f"initial spin must be 0 (down) or 1 (up), got {spin!r}")
    for (sa, na), ca in single[0].items():
        for (sb, nb), cb in single[1].items():
            amps[sa, sb, na, nb] += ca * cb
    return JointState(amps, ModeLabels.EMITTER)


def _beam_splitter_matrix() -> np.ndarray:
    # columns: input |n_A, n_B⟩, rows: output |n_1, n_2⟩, flattened as 3*n + m
    dim = NMAX + 1
    u = np.zeros((dim * dim, dim * dim))
    for na in range(dim):
        for nb in range(dim - na):
            col = na * dim + nb
            norm = 1.0 / math.sqrt(math.factorial(na) * math.factorial(nb) * 2 ** (na + nb))
            for i in range(na + 1):
                for j in range(nb + 1):
                    coeff = math.comb(na, i) * math.comb(nb, j) * (-1) ** (nb - j)
                    k, m = i + j, (na - i) + (nb - j)
                    u[k * dim + m, col] += norm * coeff * math.sqrt(math.factorial(k) * math.factorial(m))
    return u


_BS = _beam_splitter_matrix()


def beam_splitter(state: JointState) -> JointState:
    """Interfere the two emission modes on a 50:50 beam splitter.

    Uses ``a_A† → (a_1† + a_2†)/√2`` and ``a_B† → (a_1† − a_2†)/√2``.
    """
    if state.mode_labels is not ModeLabels.EMITTER:
        raise ValueError("beam_splitter expects a state in emitter modes")
    flat = state.amplitudes.reshape(4, -1)
    out = (flat @ _BS.T).reshape(2, 2, NMAX + 1, NMAX + 1)
    return JointState(out, ModeLabels.OUTPUT)


def _spin_vector(state: JointState, n1: int, n2: int) -> np.ndarray:
    return state.amplitudes[:, :, n1, n2].reshape(4)


def _detect_prob(n: int, k: int, efficiency: float) -> float:
    """Probability that ``k`` of ``n`` photons are registered."""
    return math.comb(n, k) * efficiency**k * (1.0 - efficiency) ** (n - k)


def _outcome_weights(predicate, efficiency: float) -> np.ndarray:
    w = np.zeros((NMAX + 1, NMAX + 1))
    for n1 in range(NMAX + 1):
        for n2 in range(NMAX + 1 - n1):
            w[n1, n2] = sum(
                _detect_prob(n1, k1, efficiency) * _detect_prob(n2, k2, efficiency)
                for k1 in range(n1 + 1)
                for k2 in range(n2 + 1)
                if predicate(k1, k2)
            )
    return w


def _reduced_unnormalized(state: JointState, weights: np.ndarray) -> np.ndarray:
    rho = np.zeros((4, 4), dtype=complex)
    for n1 in range(NMAX + 1):
        for n2 in range(NMAX + 1 - n1):
            if weights[n1, n2] == 0.0:
                continue
            v = _spin_vector(state, n1, n2)
            rho += weights[n1, n2] * np.outer(v, v.conj())
    return rho


def _require_output(state: JointState):
    if state.mode_labels is not ModeLabels.OUTPUT:
        raise ValueError("detection acts on beam-splitter output modes")


def herald_project(state: JointState, port: int, number_resolving: bool, efficiency: float = 1.0):
    """Condition on a herald click in ``port`` and trace out the photons.

    Parameters
    ----------
    state : JointState
        State in output modes.
    port : {1, 2}
        Beam-splitter output whose detector registered the Raman photon.
    number_resolving : bool
        If True the herald means exactly one registered photon in ``port`` and
        none in the other. Otherwise it means at least one registered photon
        in ``port``, regardless of the other detector.
    efficiency : float
        Probability that each photon reaching a detector is registered.

    Returns
    -------
    rho : ndarray, shape (4, 4)
        Normalized spin density matrix.
    probability : float
        Probability of the herald outcome.
    """
    _require_output(state)
    if port not in (1, 2):
        raise ValueError(f"port must be 1 or 2, got {port!r}")
    if not 0.0 < efficiency <= 1.0:
        raise ValueError(f"efficiency must lie in (0, 1], got {efficiency!r}")

    def predicate(k1, k2):
        k_port, k_other = (k1, k2) if port == 1 else (k2, k1)
        if number_resolving:
            return k_port == 1 and k_other == 0
        return k_port >= 1

    rho = _reduced_unnormalized(state, _outcome_weights(predicate, efficiency))
    prob = float(np.real(np.trace(rho)))
    if prob <= 0.0:
        raise NoSuchOutcome(f"herald on port {port} has zero probability")
    return rho / prob, prob


def click_outcomes(state: JointState, efficiency: float = 1.0) -> dict:
    """Unnormalized spin states for every threshold-detector click pattern.

    Returns a mapping ``(click_1, click_2) -> rho`` with ``trace(rho)`` equal to
    the probability of that pattern. The four traces sum to one.
    """
    _require_output(state)
    if not 0.0 <= efficiency <= 1.0:
        raise ValueError(f"efficiency must lie in [0, 1], got {efficiency!r}")
    out = {}
    for c1 in (0, 1):
        for c2 in (0, 1):
            pred = lambda k1, k2, c1=c1, c2=c2: (k1 > 0) == bool(c1) and (k2 > 0) == bool(c2)
            out[(c1, c2)] = _reduced_unnormalized(state, _outcome_weights(pred, efficiency))
    return out


def heralded_spin_vector(state: JointState, n1: int, n2: int) -> np.ndarray:
    """Normalized spin state for a definite photon outcome, with the ↑↓
    coefficient made real and positive (or the first nonzero one, if ↑↓ is
    absent)."""
    _require_output(state)
    v = _spin_vector(state, n1, n2).copy()
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise NoSuchOutcome(f"photon outcome |{n1},{n2}⟩ has zero amplitude")
    v /= norm
    ref = v[2] if abs(v[2]) > 1e-15 else v[np.flatnonzero(np.abs(v) > 1e-15)[0]]
    return v * (abs(ref) / ref)


@dataclass(frozen=True)
class BellTarget:
    """``(|↑↓⟩ ± e^{iΔφ}|↓↑⟩)/√2``; ``kind`` is ``"psi_plus"`` or ``"psi_minus"``."""

    kind: str = "psi_plus"
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("psi_plus", "psi_minus"):
            raise ValueError(f"unknown Bell target {self.kind!r}")
        object.__setattr__(self, "phase", float(self.phase) % (2 * math.pi))

    def vector(self) -> np.ndarray:
        sign = 1.0 if self.kind == "psi_plus" else -1.0
        v = np.zeros(4, dtype=complex)
        v[2] = 1.0
        v[1] = sign * np.exp(1j * self.phase)
        return v / math.sqrt(2.0)

    def density(self) -> np.ndarray:
        v = self.vector()
        return np.outer(v, v.conj())


def validate_density(rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise ValueError(f"two-qubit density matrix must be 4x4, got {rho.shape}")
    if not np.all(np.isfinite(rho)):
        raise ValueError("density matrix has non-finite entries")
    if np.max(np.abs(rho - rho.conj().T)) > HERMITIAN_ATOL:
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1.0) > TRACE_ATOL:
        raise ValueError(f"density matrix trace is {np.trace(rho).real!r}, expected 1")
    if np.min(np.linalg.eigvalsh(rho)) < -PSD_ATOL:
        raise ValueError("density matrix is not positive semidefinite")
    return rho


def bell_fidelity(rho: np.ndarray, target: BellTarget) -> float:
    rho = validate_density(rho)
    v = target.vector()
    f = float(np.real(v.conj() @ rho @ v))
    return min(max(f, 0.0), 1.0)


_X = np.array([[0, 1], [1, 0]], dtype=complex)
_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
_I2 = np.eye(2, dtype=complex)


def rotation_matrix(angle: float, axis_phase: float = 0.0) -> np.ndarray:
    """``exp(-i angle/2 (cos(axis_phase) X + sin(axis_phase) Y))``."""
    n = math.cos(axis_phase) * _X + math.sin(axis_phase) * _Y
    return math.cos(angle / 2) * _I2 - 1j * math.sin(angle / 2) * n


def rotate_qubit(rho: np.ndarray, qubit: str, angle: float, axis_phase: float = 0.0) -> np.ndarray:
    u = rotation_matrix(angle, axis_phase)
    if qubit == "A":
        full = np.kron(u, _I2)
    elif qubit == "B":
        full = np.kron(_I2, u)
    else:
        raise ValueError(f"qubit must be 'A' or 'B', got {qubit!r}")
    return full @ np.asarray(rho, dtype=complex) @ full.conj().T


def populations(rho: np.ndarray) -> np.ndarray:
    """Diagonal of ``rho`` in the order ↓↓, ↓↑, ↑↓, ↑↑."""
    return np.real(np.diag(np.asarray(rho))).copy()


def relative_phase(rho: np.ndarray, theta: float) -> np.ndarray:
    """Shift the ↑↓/↓↑ relative phase by ``theta`` (Δφ → Δφ + θ)."""
    u = np.exp(1j * np.array([0.0, theta / 2, -theta / 2, 0.0]))
    return u[:, None] * np.asarray(rho, dtype=complex) * u.conj()[None, :]


def scale_odd_coherence(rho: np.ndarray, factor: float) -> np.ndarray:
    """Multiply the ↑↓/↓↑ coherence by ``factor`` ∈ [0, 1].

    Implemented as the mixture ``(1+f)/2 ρ + (1-f)/2 UρU†`` with ``U`` a
    π relative-phase kick, so it is completely positive for any ``f`` in range.
    """
    if not 0.0 <= factor <= 1.0:
        raise ValueError(f"coherence factor must lie in [0, 1], got {factor!r}")
    rho = np.asarray(rho, dtype=complex)
    return 0.5 * (1 + factor) * rho + 0.5 * (1 - factor) * relative_phase(rho, math.pi)
