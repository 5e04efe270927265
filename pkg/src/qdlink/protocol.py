"""Noise channels, closed-form generators and the fidelity/rate model.

All functions are pure; parameter records are frozen dataclasses. Use
``dataclasses.replace`` to derive variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq

from . import fock
from .fock import BellTarget

TARGET_SUCCESS_PROBABILITY = 6.7e-4
TARGET_FIDELITY = 0.616


def calibrate_eta_photon(p: float, p_succ: float) -> float:
    """End-to-end photon detection probability reproducing ``p_succ``.

    Each emitter independently produces a detected photon with probability
    ``p * eta`` and threshold detectors click on any of them, so
    ``p_succ = 1 - (1 - p * eta)**2``.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    if not 0.0 <= p_succ < 1.0:
        raise ValueError("p_succ must lie in [0, 1)")
    eta = (1.0 - math.sqrt(1.0 - p_succ)) / p
    if eta > 1.0:
        raise ValueError(f"p_succ={p_succ} is unreachable at p={p}")
    return eta


ETA_PHOTON_DEFAULT = calibrate_eta_photon(0.07, TARGET_SUCCESS_PROBABILITY)
# (1 + D)/2 = 0.87 with D = exp(-(rot_delay / t2_star)**2) at t2_star = 1.2 ns
ROT_DELAY_DEFAULT = 1.2e-9 * math.sqrt(-math.log(2 * 0.87 - 1))
# frozen output of calibrate_phase_jitter() at the default parameters
PHASE_JITTER_CALIBRATED = 0.9585734469


def _check_probability(obj, *names):
    for name in names:
        value = getattr(obj, name)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {value!r}")


def _check_positive(obj, *names):
    for name in names:
        value = getattr(obj, name)
        if not value > 0.0:
            raise ValueError(f"{name} must be > 0, got {value!r}")


@dataclass(frozen=True)
class ProtocolParams:
    """Physical knobs of the entanglement attempt. SI units throughout."""

    p: float = 0.07
    delta_phi: float = 0.0
    attempt_rate: float = 10.9e6
    sequence_length: float = 78.9e-9
    eta_photon: float = ETA_PHOTON_DEFAULT
    zeeman_A: float = 2 * math.pi * 25.1e9
    zeeman_B: float = 2 * math.pi * 25.1e9
    lifetime_A: float = 727e-12
    lifetime_B: float = 742e-12
    pulse_length: float = 160e-12
    accept_window: float = 1.2e-9

    def __post_init__(self):
        _check_probability(self, "p", "eta_photon")
        _check_positive(self, "attempt_rate", "sequence_length", "zeeman_A", "zeeman_B",
                        "lifetime_A", "lifetime_B", "pulse_length", "accept_window")
        if not math.isfinite(self.delta_phi):
            raise ValueError("delta_phi must be finite")
        if self.sequence_length > self.attempt_period:
            raise ValueError("sequence_length exceeds the attempt period 1/attempt_rate")

    @property
    def attempt_period(self) -> float:
        return 1.0 / self.attempt_rate

    @property
    def mean_lifetime(self) -> float:
        return 0.5 * (self.lifetime_A + self.lifetime_B)


@dataclass(frozen=True)
class NoiseParams:
    """Imperfections layered onto the ideal heralded state.

    ``readout_up_efficiency`` and ``readout_false_positive`` are the
    per-window click probabilities for a spin in ↑ and ↓ respectively.
    ``rot_error`` is the population left behind by a nominal π pulse; all
    rotation angles are scaled by the same fractional under-rotation.
    """

    prep_error: float = 0.03
    t2_star: float = 1.2e-9
    rot_delay: float = ROT_DELAY_DEFAULT
    hom_visibility: float = 0.93
    phase_jitter_std: float = PHASE_JITTER_CALIBRATED
    rot_error: float = 0.0
    readout_up_efficiency: float = 0.98
    readout_false_positive: float = 0.02
    dark_rate: float = 1.0
    stabilizer_bound: float = math.radians(3.0)
    background_fraction: float = 1.0 / 150.0

    def __post_init__(self):
        _check_probability(self, "prep_error", "hom_visibility", "rot_error",
                           "readout_up_efficiency", "readout_false_positive", "background_fraction")
        _check_positive(self, "t2_star")
        for name in ("rot_delay", "phase_jitter_std", "dark_rate", "stabilizer_bound"):
            value = getattr(self, name)
            if not (value >= 0.0 and math.isfinite(value)):
                raise ValueError(f"{name} must be finite and >= 0, got {value!r}")
        if self.stabilizer_bound > math.pi:
            raise ValueError("stabilizer_bound must not exceed π")
        if self.readout_up_efficiency + self.readout_false_positive == 0.0:
            raise ValueError("readout produces no clicks at all")

    @classmethod
    def noiseless(cls) -> NoiseParams:
        return cls(prep_error=0.0, rot_delay=0.0, hom_visibility=1.0, phase_jitter_std=0.0,
                   rot_error=0.0, readout_up_efficiency=1.0, readout_false_positive=0.0,
                   dark_rate=0.0, stabilizer_bound=0.0, background_fraction=0.0)


# ---------------------------------------------------------------------------
# coherence factors


def dephasing_factor(tau: float, t2_star: float) -> float:
    if tau < 0:
        raise ValueError("tau must be >= 0")
    return math.exp(-((tau / t2_star) ** 2))


def jitter_factor(std: float) -> float:
    """Characteristic function of a zero-mean Gaussian phase."""
    return math.exp(-0.5 * std**2)


def stabilizer_factor(bound: float) -> float:
    """Average of ``cos θ`` for θ uniform on ``[-bound, bound]``."""
    return 1.0 if bound == 0.0 else math.sin(bound) / bound


def coherence_channels(noise: NoiseParams, stabilizer: bool = True) -> dict:
    """Multiplicative factors applied to the ↑↓/↓↑ coherence, by source."""
    out = {
        "mode_overlap": noise.hom_visibility,
        "dephasing": dephasing_factor(noise.rot_delay, noise.t2_star),
        "phase_jitter": jitter_factor(noise.phase_jitter_std),
    }
    if stabilizer:
        out["stabilizer"] = stabilizer_factor(noise.stabilizer_bound)
    return out


def apply_coherence_channels(rho, noise: NoiseParams, stabilizer: bool = True):
    for factor in coherence_channels(noise, stabilizer).values():
        rho = fock.scale_odd_coherence(rho, factor)
    return rho


# ---------------------------------------------------------------------------
# heralded states


def _prep_configurations(prep_error: float):
    for a in (fock.DOWN, fock.UP):
        for b in (fock.DOWN, fock.UP):
            w = (prep_error if a else 1 - prep_error) * (prep_error if b else 1 - prep_error)
            if w > 0.0:
                yield (a, b), w


def _output_state(pp: ProtocolParams, delta_phi: float, initial):
    return fock.beam_splitter(fock.build_post_pulse_state(pp.p, 0.0, delta_phi, initial))


def click_pattern_states(pp: ProtocolParams, noise: NoiseParams, delta_phi: float | None = None,
                         stabilizer: bool = True) -> dict:
    """Probability and normalized spin state for each true click pattern.

    Keys are ``(click_1, click_2)``. Preparation errors enter as a classical
    mixture over initial spin configurations; photons are registered with
    probability ``eta_photon`` each. Patterns of zero probability map to
    ``(0.0, None)``.
    """
    dphi = pp.delta_phi if delta_phi is None else delta_phi
    acc = {k: np.zeros((4, 4), dtype=complex) for k in ((0, 0), (1, 0), (0, 1), (1, 1))}
    for initial, w in _prep_configurations(noise.prep_error):
        for key, rho in fock.click_outcomes(_output_state(pp, dphi, initial), pp.eta_photon).items():
            acc[key] += w * rho
    out = {}
    for key, rho in acc.items():
        prob = float(np.real(np.trace(rho)))
        if prob <= 0.0:
            out[key] = (0.0, None)
            continue
        out[key] = (prob, apply_coherence_channels(rho / prob, noise, stabilizer))
    return out


def heralded_state_with_noise(pp: ProtocolParams, noise: NoiseParams, port: int,
                              number_resolving: bool = False, stabilizer: bool = True,
                              delta_phi: float | None = None) -> np.ndarray:
    """Spin state after a true herald click on ``port``.

    With ``number_resolving=True`` the herald is an ideal lossless
    photon-number-resolving detection (exactly one photon in ``port``), which
    removes the two-photon contamination. Otherwise the herald is a
    threshold click of efficiency ``pp.eta_photon`` on ``port`` alone.
    """
    if port not in (1, 2):
        raise ValueError(f"port must be 1 or 2, got {port!r}")
    dphi = pp.delta_phi if delta_phi is None else delta_phi
    if number_resolving:
        acc = np.zeros((4, 4), dtype=complex)
        for initial, w in _prep_configurations(noise.prep_error):
            try:
                rho, prob = fock.herald_project(_output_state(pp, dphi, initial), port, True)
            except fock.NoSuchOutcome:
                continue
            acc += w * prob * rho
        total = np.real(np.trace(acc))
        if total <= 0.0:
            raise fock.NoSuchOutcome(f"herald on port {port} has zero probability")
        rho = apply_coherence_channels(acc / total, noise, stabilizer)
    else:
        key = (1, 0) if port == 1 else (0, 1)
        prob, rho = click_pattern_states(pp, noise, dphi, stabilizer)[key]
        if rho is None:
            raise fock.NoSuchOutcome(f"herald on port {port} has zero probability")
    return fock.validate_density(0.5 * (rho + rho.conj().T))


def dark_click_probability(pp: ProtocolParams, noise: NoiseParams) -> float:
    """Probability of a dark count inside one herald acceptance window."""
    return -math.expm1(-noise.dark_rate * pp.accept_window)


class ObservedHerald(NamedTuple):
    probability: float
    true_fraction: float
    rho: np.ndarray | None


def observed_heralds(pp: ProtocolParams, noise: NoiseParams, delta_phi: float | None = None,
                     stabilizer: bool = True) -> dict:
    """Heralds as seen by the analysis: exactly one red detector clicked.

    Returns ``{port: ObservedHerald}``. True photon clicks and dark counts are
    combined with OR per detector; a dark count alone heralds the no-click
    spin state.
    """
    states = click_pattern_states(pp, noise, delta_phi, stabilizer)
    q = dark_click_probability(pp, noise)
    p_none, rho_none = states[(0, 0)]
    out = {}
    for port, key in ((1, (1, 0)), (2, (0, 1))):
        p_true, rho_true = states[key]
        w_true = p_true * (1 - q)
        w_dark = p_none * q * (1 - q)
        total = w_true + w_dark
        if total <= 0.0:
            out[port] = ObservedHerald(0.0, 0.0, None)
            continue
        rho = np.zeros((4, 4), dtype=complex)
        if w_true > 0:
            rho += w_true * rho_true
        if w_dark > 0:
            rho += w_dark * rho_none
        out[port] = ObservedHerald(total, w_true / total, rho / total)
    return out


# ---------------------------------------------------------------------------
# rates


def success_probability(pp: ProtocolParams) -> float:
    """Per-attempt probability of at least one herald click (either port).

    Equals ``[2p(1-p) + p²(2-η)]·η``; the two-photon branch clicks with
    probability ``1-(1-η)²``.
    """
    return 1.0 - (1.0 - pp.p * pp.eta_photon) ** 2


def herald_rate(pp: ProtocolParams) -> float:
    return success_probability(pp) * pp.attempt_rate


# ---------------------------------------------------------------------------
# measurement model


def under_rotation(rot_error: float) -> float:
    """Fractional angle deficit κ such that a π pulse leaves ``rot_error`` behind."""
    return 1.0 - (2.0 / math.pi) * math.asin(math.sqrt(1.0 - rot_error))


def measurement_rotations(rho, basis: str, target: int, noise: NoiseParams,
                          basis_phase: float = 0.0) -> np.ndarray:
    """Rotate ``rho`` so that the ``target`` two-spin state maps onto ↑↑.

    ``basis`` is ``"population"`` or ``"transverse"``; in the transverse basis
    both spins first get a π/2 pulse about ``basis_phase``. ``target`` indexes
    ``(↓↓, ↓↑, ↑↓, ↑↑)``.
    """
    scale = 1.0 - under_rotation(noise.rot_error)
    if basis == "transverse":
        for q in ("A", "B"):
            rho = fock.rotate_qubit(rho, q, scale * math.pi / 2, basis_phase)
    elif basis != "population":
        raise ValueError(f"unknown basis {basis!r}")
    if not 0 <= target <= 3:
        raise ValueError(f"target must index one of four two-spin states, got {target!r}")
    t_a, t_b = divmod(target, 2)
    if t_a == fock.DOWN:
        rho = fock.rotate_qubit(rho, "A", scale * math.pi)
    if t_b == fock.DOWN:
        rho = fock.rotate_qubit(rho, "B", scale * math.pi)
    return rho


def click_probabilities(spin_probs, noise: NoiseParams) -> np.ndarray:
    """Readout outcome distribution, indexed by ``click_A + 2 * click_B``."""
    c = np.array([noise.readout_false_positive, noise.readout_up_efficiency])
    spin_probs = np.asarray(spin_probs)
    out = np.zeros(4)
    for s in range(4):
        s_a, s_b = divmod(s, 2)
        ca, cb = c[s_a], c[s_b]
        out += spin_probs[s] * np.array([(1 - ca) * (1 - cb), ca * (1 - cb), (1 - ca) * cb, ca * cb])
    return out


def readout_distribution(rho, basis: str, target: int, noise: NoiseParams) -> np.ndarray:
    rotated = measurement_rotations(rho, basis, target, noise)
    return click_probabilities(fock.populations(rotated), noise)


def transverse_visibility(rho, basis_phase: float = 0.0) -> float:
    """Correlation ⟨σσ⟩ after ideal π/2 pulses on both spins; +1 is correlated."""
    for q in ("A", "B"):
        rho = fock.rotate_qubit(rho, q, math.pi / 2, basis_phase)
    pop = fock.populations(rho)
    return float(pop[0] + pop[3] - pop[1] - pop[2])


class PredictedTomography(NamedTuple):
    populations: np.ndarray
    visibility: float


def predicted_tomography(rho, noise: NoiseParams) -> PredictedTomography:
    """What three-photon tomography reports in the limit of infinite counts.

    Coincidence probabilities (both readout clicks) of the four variants in
    each basis are normalized against each other.
    """
    out = []
    for basis in ("population", "transverse"):
        coinc = np.array([readout_distribution(rho, basis, t, noise)[3] for t in range(4)])
        out.append(coinc / coinc.sum())
    pop, trans = out
    return PredictedTomography(pop, float(trans[0] + trans[3] - trans[1] - trans[2]))


def port_sign(port: int, delta_phi: float = 0.0) -> int:
    """+1 if ``port`` heralds ψ⁺-like (correlated) states at this phase."""
    base = 1 if port == 1 else -1
    return base if math.cos(delta_phi) >= 0 else -base


def estimated_fidelity(rho, noise: NoiseParams, sign: int) -> float:
    """Bell fidelity as inferred from populations and transverse visibility."""
    pred = predicted_tomography(rho, noise)
    return 0.5 * (pred.populations[1] + pred.populations[2] + sign * pred.visibility)


def _mean_estimated_fidelity(pp, noise, number_resolving=False) -> float:
    vals = [estimated_fidelity(heralded_state_with_noise(pp, noise, port, number_resolving), noise,
                               port_sign(port, pp.delta_phi)) for port in (1, 2)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# budget and calibration


@dataclass(frozen=True)
class FidelityBudget:
    """Fidelity with each imperfection acting alone, and all together.

    ``factors`` maps a source name to the estimated fidelity when only that
    source is active (relative to an ideal reference of 1).
    """

    factors: dict = field(default_factory=dict)
    composed: float = 1.0

    @property
    def naive_product(self) -> float:
        return float(np.prod(list(self.factors.values()))) if self.factors else 1.0

    def rows(self):
        yield from self.factors.items()
        yield "naive_product", self.naive_product
        yield "composed", self.composed


_BUDGET_SOURCES = {
    "mode_overlap": ("hom_visibility",),
    "dephasing": ("rot_delay", "t2_star"),
    "preparation": ("prep_error",),
    "readout": ("readout_up_efficiency", "readout_false_positive", "rot_error"),
    "stabilizer": ("stabilizer_bound",),
    "phase_jitter": ("phase_jitter_std",),
}


def fidelity_budget(pp: ProtocolParams, noise: NoiseParams) -> FidelityBudget:
    """Break the predicted fidelity down by source.

    The composed value runs the full channel stack once; it is not the product
    of the per-source numbers.
    """
    ideal = NoiseParams.noiseless()
    factors = {"double_flip": _mean_estimated_fidelity(pp, ideal, number_resolving=False)}
    for name, attrs in _BUDGET_SOURCES.items():
        only = replace(ideal, **{a: getattr(noise, a) for a in attrs})
        factors[name] = _mean_estimated_fidelity(pp, only, number_resolving=True)
    return FidelityBudget(factors, _mean_estimated_fidelity(pp, noise))


def calibrate_phase_jitter(pp: ProtocolParams | None = None, noise: NoiseParams | None = None,
                           target: float = TARGET_FIDELITY) -> float:
    """Gaussian phase-noise std that brings the full model down to ``target``."""
    pp = pp or ProtocolParams()
    noise = noise or NoiseParams()

    def gap(std):
        return _mean_estimated_fidelity(pp, replace(noise, phase_jitter_std=std)) - target

    hi = 6.0
    if gap(0.0) < 0:
        raise ValueError("target fidelity is above the jitter-free prediction")
    if gap(hi) > 0:
        raise ValueError("target fidelity is below the fully dephased prediction")
    return brentq(gap, 0.0, hi, xtol=1e-12)


# ---------------------------------------------------------------------------
# curves


class CurvePoint(NamedTuple):
    p: float
    rate: float
    fidelity: float
    true_fraction: float


def fidelity_vs_rate_curve(pp: ProtocolParams, noise: NoiseParams, p_grid) -> list[CurvePoint]:
    """Estimated Bell fidelity against total herald rate, sweeping ``p``.

    The true-herald rate is ``herald_rate``; dark counts in an otherwise
    empty window add false heralds carrying the no-click spin state. The
    reported fidelity mixes the two by their share of the total rate.
    """
    points = []
    q = dark_click_probability(pp, noise)
    for p in p_grid:
        if not 0.0 < p < 1.0:
            raise ValueError(f"flip probabilities must lie in (0, 1), got {p!r}")
        pp_p = replace(pp, p=float(p))
        states = click_pattern_states(pp_p, noise)
        p_none, rho_none = states[(0, 0)]
        signs = [port_sign(port, pp.delta_phi) for port in (1, 2)]
        f_true = float(np.mean([estimated_fidelity(heralded_state_with_noise(pp_p, noise, port), noise, s)
                                for port, s in zip((1, 2), signs)]))
        f_false = float(np.mean([estimated_fidelity(rho_none, noise, s) for s in signs]))
        r_true = herald_rate(pp_p)
        r_dark = 2 * p_none * q * (1 - q) * pp.attempt_rate
        frac = r_true / (r_true + r_dark)
        points.append(CurvePoint(float(p), r_true + r_dark, frac * f_true + (1 - frac) * f_false, frac))
    return points


def phase_sweep(pp: ProtocolParams, noise: NoiseParams, phi_grid) -> np.ndarray:
    """Measured transverse visibility per port, shape ``(len(phi_grid), 2)``."""
    out = []
    for phi in phi_grid:
        heralds = observed_heralds(pp, noise, delta_phi=float(phi))
        out.append([predicted_tomography(heralds[port].rho, noise).visibility for port in (1, 2)])
    return np.array(out)


def ramsey_signal(delays, zeeman: float, t2_star: float) -> np.ndarray:
    """Ramsey fringe ``(1 + cos(ωτ) exp(-(τ/T2*)²))/2``.

    A Gaussian frequency ensemble of FWHM Γ gives T2* = 4√(ln 2)/Γ, so a
    hyperfine width of 2π×100 MHz would mean T2* ≈ 5.3 ns rather than 1.2 ns.
    The envelope is therefore parametrized by T2* directly.
    """
    tau = np.asarray(delays, dtype=float)
    return 0.5 * (1.0 + np.cos(zeeman * tau) * np.exp(-((tau / t2_star) ** 2)))


def emission_window_acceptance(lifetime: float, pulse_length: float, window: float) -> float:
    """Fraction of photons emitted before ``window`` (measured from pulse start).

    Excitation is uniform over the pulse and decay is exponential.
    """
    if lifetime <= 0 or pulse_length < 0 or window < 0:
        raise ValueError("lifetime must be > 0; pulse_length and window >= 0")
    if math.isinf(window):
        return 1.0
    if pulse_length == 0.0:
        return -math.expm1(-window / lifetime)
    if window >= pulse_length:
        return 1.0 - (lifetime / pulse_length) * math.exp(-window / lifetime) * math.expm1(pulse_length / lifetime)
    return (window + lifetime * math.expm1(-window / lifetime)) / pulse_length


def sample_emission_times(rng: np.random.Generator, n: int, lifetime: float, pulse_length: float,
                          window: float | None = None) -> np.ndarray:
    """Emission delays from pulse start, optionally conditioned on ``< window``."""
    if window is None:
        return rng.uniform(0.0, pulse_length, n) + rng.exponential(lifetime, n)
    out = np.empty(0)
    while out.size < n:
        need = n - out.size
        batch = rng.uniform(0.0, pulse_length, 2 * need + 16) + rng.exponential(lifetime, 2 * need + 16)
        out = np.concatenate([out, batch[batch < window]])
    return out[:n]


def param_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]
