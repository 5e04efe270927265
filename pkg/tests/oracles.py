"""Reference computations that share no code with the package.

They are slow and written for clarity; tests compare package output against
them.
"""

import itertools
import math

import numpy as np
from scipy.integrate import quad


def output_state_coefficients(p, phi_a, phi_b):
    """Output-mode amplitudes of the two-emitter state, keyed by (s_A, s_B, n_1, n_2).

    Written out term by term: vacuum, one photon in either output, and the
    bunched two-photon term. Every other amplitude is zero.
    """
    ea, eb = np.exp(1j * phi_a), np.exp(1j * phi_b)
    one = math.sqrt(p * (1 - p) / 2)
    return {
        (0, 0, 0, 0): 1 - p,
        (1, 0, 1, 0): one * ea,
        (0, 1, 1, 0): one * eb,
        (1, 0, 0, 1): one * ea,
        (0, 1, 0, 1): -one * eb,
        (1, 1, 2, 0): p / math.sqrt(2) * ea * eb,
        (1, 1, 0, 2): -p / math.sqrt(2) * ea * eb,
    }


def _permanent(m):
    n = m.shape[0]
    if n == 0:
        return 1.0
    return sum(np.prod([m[i, s[i]] for i in range(n)]) for s in itertools.permutations(range(n)))


def linear_optics_amplitude(u, n_in, n_out):
    """⟨n_out| U |n_in⟩ for a passive mode unitary ``u`` (out x in), via permanents."""
    if sum(n_in) != sum(n_out):
        return 0.0
    rows = [i for i, n in enumerate(n_out) for _ in range(n)]
    cols = [j for j, n in enumerate(n_in) for _ in range(n)]
    sub = u[np.ix_(rows, cols)]
    norm = math.sqrt(np.prod([math.factorial(n) for n in n_in]) * np.prod([math.factorial(n) for n in n_out]))
    return _permanent(sub) / norm


BS_UNITARY = np.array([[1, 1], [1, -1]]) / math.sqrt(2)  # rows: outputs 1, 2; cols: inputs A, B


def beam_splitter_oracle(amps):
    """Apply the 50:50 beam splitter to a (2, 2, 3, 3) emitter-mode amplitude array."""
    out = np.zeros_like(amps, dtype=complex)
    for sa, sb, na, nb in itertools.product(range(2), range(2), range(3), range(3)):
        c = amps[sa, sb, na, nb]
        if c == 0:
            continue
        for n1 in range(3):
            n2 = na + nb - n1
            if 0 <= n2 <= 2:
                out[sa, sb, n1, n2] += c * linear_optics_amplitude(BS_UNITARY, (na, nb), (n1, n2))
    return out


def two_photon_coincidence(overlap_sq):
    """Probability that two photons meeting on a 50:50 splitter leave by different ports.

    Photon B's temporal mode is split into a part parallel to A's (amplitude
    √V) and an orthogonal part; the four modes (port × {parallel, orthogonal})
    are enumerated explicitly.
    """
    par, perp = math.sqrt(overlap_sq), math.sqrt(1 - overlap_sq)
    # single-photon output amplitudes over modes (1par, 1perp, 2par, 2perp)
    a = np.array([1, 0, 1, 0]) / math.sqrt(2)
    b = np.array([par, perp, -par, -perp]) / math.sqrt(2)
    # two-photon state a†_i b†_j expressed in occupation numbers
    state = {}
    for i in range(4):
        for j in range(4):
            occ = [0, 0, 0, 0]
            occ[i] += 1
            occ[j] += 1
            state[tuple(occ)] = state.get(tuple(occ), 0) + a[i] * b[j]
    prob = 0.0
    for occ, amp in state.items():
        norm = np.prod([math.factorial(n) for n in occ])
        weight = abs(amp) ** 2 * norm
        if occ[0] + occ[1] >= 1 and occ[2] + occ[3] >= 1:
            prob += weight
    return prob


def window_acceptance_quadrature(lifetime, pulse, window):
    """Integrate the pulse-convolved exponential emission density up to ``window``."""

    def density(t):
        # excitation time s is uniform on [0, pulse] and must precede t
        hi = min(t, pulse)
        return (math.exp(-(t - hi) / lifetime) - math.exp(-t / lifetime)) / pulse

    return quad(density, 0.0, window, points=[pulse], limit=200)[0]


def nonresolving_herald(p):
    """Probability and ↑↑ weight for a lossless threshold click on one port."""
    prob = p * (1 - p) + p**2 / 2
    return prob, (p**2 / 2) / prob
