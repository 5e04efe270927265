"""Attempt-by-attempt event generator producing time-tag streams.

Sampling is hybrid: the herald click pattern of an attempt is drawn from the
exact analytic distribution (photon detection plus dark counts), the spin
state is the corresponding conditional density matrix, and readout clicks are
drawn from the rotated state. Only the stabilizer phase residual is sampled
explicitly per attempt; all other noise is already averaged into the
conditional states.

With ``conditioned=True`` only attempts with at least one red click are
generated. Gaps between them are geometric, so the stream is statistically
identical to the full run restricted to those attempts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.signal import lfilter
from scipy.special import ndtr

from . import fock
from . import protocol as pm
from .protocol import NoiseParams, ProtocolParams
from .timetags import BLUE_A, BLUE_B, RED_1, RED_2, TAG_DTYPE, Timeline, empty_tags, merge_sorted

BASES = ("population", "transverse")
RESIDUAL_DTYPE = np.dtype([("attempt_index", "<u4"), ("residual", "<f8")])
MAX_ATTEMPTS = 2**32


@dataclass(frozen=True)
class SequenceVariant:
    """One measurement configuration of the attempt.

    ``population_target`` indexes ``(↓↓, ↓↑, ↑↓, ↑↑)``: π pulses are applied so
    that this two-spin state is the one read out as a double click.
    """

    basis: str = "population"
    population_target: int = 3
    delta_phi_setpoint: float = 0.0

    def __post_init__(self):
        if self.basis not in BASES:
            raise ValueError(f"basis must be one of {BASES}, got {self.basis!r}")
        if self.population_target not in range(4):
            raise ValueError(f"population_target must be 0..3, got {self.population_target!r}")

    @property
    def label(self) -> str:
        return f"{self.basis}:{fock.BASIS_LABELS[self.population_target]}@{self.delta_phi_setpoint:.6g}"


def tomography_schedule(delta_phi: float = 0.0, bases=BASES) -> tuple:
    return tuple(SequenceVariant(b, t, delta_phi) for b in bases for t in range(4))


def sweep_schedule(phis) -> tuple:
    return tuple(v for phi in phis for v in tomography_schedule(float(phi), ("transverse",)))


@dataclass(frozen=True)
class RunConfig:
    n_attempts: int
    seed: int = 0
    shard_count: int = 1
    protocol: ProtocolParams = field(default_factory=ProtocolParams)
    noise: NoiseParams = field(default_factory=NoiseParams)
    schedule: tuple = field(default_factory=tomography_schedule)
    conditioned: bool = True
    stabilizer_bandwidth: float = 1.5e3
    timeline: Timeline | None = None

    def __post_init__(self):
        if self.shard_count <= 0:
            raise ValueError(f"shard_count must be positive, got {self.shard_count}")
        if not 0 <= self.n_attempts <= MAX_ATTEMPTS:
            raise ValueError(f"n_attempts must lie in [0, 2**32], got {self.n_attempts}")
        if len(self.schedule) == 0:
            raise ValueError("variant schedule is empty")
        if len(self.schedule) > 0xFFFF:
            raise ValueError("too many variants for a u16 variant id")
        if self.stabilizer_bandwidth <= 0:
            raise ValueError("stabilizer_bandwidth must be positive")
        if self.timeline is None:
            object.__setattr__(self, "timeline", Timeline.from_params(self.protocol))

    def shard_ranges(self):
        edges = np.linspace(0, self.n_attempts, self.shard_count + 1).round().astype(np.int64)
        return list(zip(edges[:-1], edges[1:]))

    def shard_rngs(self):
        seqs = np.random.SeedSequence(self.seed).spawn(self.shard_count)
        return [np.random.default_rng(s) for s in seqs]


@dataclass
class SimulationResult:
    tags: np.ndarray
    residuals: np.ndarray
    n_attempts: int
    timeline: Timeline
    schedule: tuple = ()

    @property
    def attempt_period_ps(self) -> int:
        return self.timeline.period_ps


# ---------------------------------------------------------------------------
# stabilizer residual


class ResidualProcess:
    """Interferometer phase residual left by the active stabilizer.

    A unit-variance Ornstein-Uhlenbeck process with corner ``bandwidth`` is
    pushed through the normal CDF, so each residual is uniform on
    ``[-bound, bound]`` and never leaves it. Samples may be requested at
    arbitrary increasing attempt indices; the decay over gaps is exact.
    """

    def __init__(self, rng: np.random.Generator, bound: float, bandwidth: float, attempt_rate: float):
        self.rng = rng
        self.bound = bound
        self.decay = math.exp(-2 * math.pi * bandwidth / attempt_rate)
        self._x = None
        self._last = None

    def _latent(self, indices: np.ndarray) -> np.ndarray:
        n = indices.size
        z = self.rng.standard_normal(n)
        if n == 0:
            return z
        if self._x is None:
            self._x = z[0]
            self._last = int(indices[0])
            head = np.array([self._x])
            if n == 1:
                return head
            return np.concatenate([head, self._latent(indices[1:])])
        gaps = np.diff(np.concatenate([[self._last], indices]))
        if np.any(gaps <= 0):
            raise ValueError("attempt indices must be strictly increasing")
        a = self.decay
        if np.all(gaps == 1):
            y, _ = lfilter([math.sqrt(1 - a * a)], [1.0, -a], z, zi=[a * self._x])
        else:
            decay = a ** gaps.astype(float)
            scale = np.sqrt(-np.expm1(2 * gaps * math.log(a))) if a > 0 else np.ones(n)
            y = np.empty(n)
            x = self._x
            for k in range(n):
                x = decay[k] * x + scale[k] * z[k]
                y[k] = x
        self._x = float(y[-1])
        self._last = int(indices[-1])
        return y

    def at(self, indices) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64)
        if self.bound == 0.0:
            self.rng.standard_normal(indices.size)
            return np.zeros(indices.size)
        return self.bound * (2.0 * ndtr(self._latent(indices)) - 1.0)


def phase_residual_process(seed, bound: float, bandwidth: float, n: int, attempt_rate: float = 10.9e6):
    """``n`` consecutive per-attempt residuals and their empirical std."""
    proc = ResidualProcess(np.random.default_rng(seed), bound, bandwidth, attempt_rate)
    r = proc.at(np.arange(n))
    return r, (float(np.std(r)) if n else 0.0)


# ---------------------------------------------------------------------------
# sampling helpers


def _sample_rows(rng, probs, n) -> np.ndarray:
    cdf = np.cumsum(probs)
    cdf /= cdf[-1]
    return np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(probs) - 1)


def _active_indices(rng, lo: int, hi: int, p_any: float) -> np.ndarray:
    """Attempt indices in ``[lo, hi)`` where an event with probability ``p_any`` occurs."""
    if p_any <= 0.0 or hi <= lo:
        return np.zeros(0, dtype=np.int64)
    if p_any >= 1.0:
        return np.arange(lo, hi, dtype=np.int64)
    out = []
    pos = lo - 1
    expected = (hi - lo) * p_any
    while True:
        batch = int(expected + 5 * math.sqrt(expected) + 16)
        idx = pos + np.cumsum(rng.geometric(p_any, size=batch))
        keep = idx[idx < hi]
        out.append(keep)
        if keep.size < batch:
            break
        pos = int(idx[-1])
        expected = (hi - pos) * p_any
    return np.concatenate(out).astype(np.int64)


def _to_ps(seconds: np.ndarray) -> np.ndarray:
    return np.floor(seconds * 1e12).astype(np.uint64)


class _Row(NamedTuple):
    prob: float
    true_key: tuple
    dark: tuple
    clicks: tuple


def herald_table(pp: ProtocolParams, noise: NoiseParams) -> list[_Row]:
    """Joint distribution of true photon clicks and dark counts on the red detectors."""
    states = pm.click_pattern_states(pp, noise, stabilizer=False)
    q = pm.dark_click_probability(pp, noise)
    rows = []
    for key, (p_true, _) in states.items():
        for d1 in (0, 1):
            for d2 in (0, 1):
                w = p_true * (q if d1 else 1 - q) * (q if d2 else 1 - q)
                rows.append(_Row(w, key, (d1, d2), (key[0] | d1, key[1] | d2)))
    return rows


def analytic_red_click_probability(pp: ProtocolParams, noise: NoiseParams) -> float:
    return sum(r.prob for r in herald_table(pp, noise) if any(r.clicks))


class _Readout:
    """Spin-outcome probabilities as a function of the residual phase θ:
    ``P(θ) = P_d + cos θ · P_c + sin θ · P_s`` for each (state, variant)."""

    def __init__(self, pp, noise, schedule):
        self.noise = noise
        self._cache = {}
        self._states = {}
        self.pp = pp
        self.schedule = schedule

    def _state(self, key, phi):
        if (key, phi) not in self._states:
            self._states[(key, phi)] = pm.click_pattern_states(self.pp, self.noise, delta_phi=phi, stabilizer=False)[key][1]
        return self._states[(key, phi)]

    def coefficients(self, key, variant_id):
        ck = (key, variant_id)
        if ck not in self._cache:
            v = self.schedule[variant_id]
            rho = self._state(key, v.delta_phi_setpoint)
            if rho is None:
                raise RuntimeError(f"sampled a zero-probability herald pattern {key}")

            def probs(theta):
                rotated = pm.measurement_rotations(fock.relative_phase(rho, theta), v.basis,
                                                   v.population_target, self.noise)
                return np.clip(fock.populations(rotated), 0.0, None)

            p0, ppi, phalf = probs(0.0), probs(math.pi), probs(math.pi / 2)
            pd = 0.5 * (p0 + ppi)
            self._cache[ck] = (pd, 0.5 * (p0 - ppi), phalf - pd)
        return self._cache[ck]


# ---------------------------------------------------------------------------
# entanglement runs


def _emit_attempts(rng, cfg: RunConfig, idx, row_ids, rows, readout: _Readout, residual):
    pp, noise, tl = cfg.protocol, cfg.noise, cfg.timeline
    n = idx.size
    if n == 0:
        return empty_tags()
    variant = (idx % len(cfg.schedule)).astype(np.int64)
    base = idx.astype(np.uint64) * np.uint64(tl.period_ps)
    true_keys = np.array([rows[r].true_key for r in range(len(rows))])
    darks = np.array([rows[r].dark for r in range(len(rows))])
    tk = true_keys[row_ids]
    dk = darks[row_ids]
    window = pp.accept_window
    chunks = []

    for ch, col in ((RED_1, 0), (RED_2, 1)):
        hit_true = tk[:, col] == 1
        hit_dark = dk[:, col] == 1
        hit = hit_true | hit_dark
        if not hit.any():
            continue
        t = np.full(n, np.inf)
        nt = int(hit_true.sum())
        t[hit_true] = pm.sample_emission_times(rng, nt, pp.mean_lifetime, pp.pulse_length, window)
        nd = int(hit_dark.sum())
        t[hit_dark] = np.minimum(t[hit_dark], rng.uniform(0.0, window, nd))
        times = base[hit] + np.uint64(tl.ent_offset_ps) + _to_ps(t[hit])
        chunks.append(_tags(ch, variant[hit], idx[hit], times))

    # readout
    spin = np.zeros(n, dtype=np.int64)
    n_var = len(cfg.schedule)
    codes, inverse = np.unique((tk[:, 0] + 2 * tk[:, 1]) * n_var + variant, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(codes.size + 1))
    u = rng.random(n)
    cos_r, sin_r = np.cos(residual), np.sin(residual)
    for g, code in enumerate(codes):
        members = order[bounds[g]:bounds[g + 1]]
        key_code, v = divmod(int(code), n_var)
        pd, pc, ps = readout.coefficients((key_code % 2, key_code // 2), v)
        probs = pd[None, :] + cos_r[members, None] * pc[None, :] + sin_r[members, None] * ps[None, :]
        probs = np.clip(probs, 0.0, None)
        cdf = np.cumsum(probs, axis=1)
        cdf /= cdf[:, -1:]
        spin[members] = np.minimum((u[members, None] >= cdf).sum(axis=1), 3)
    s_a, s_b = spin // 2, spin % 2
    c = np.array([noise.readout_false_positive, noise.readout_up_efficiency])
    click_a = rng.random(n) < c[s_a]
    click_b = rng.random(n) < c[s_b]
    for ch, hit, (lo, hi) in ((BLUE_A, click_a, tl.readout_a), (BLUE_B, click_b, tl.readout_b)):
        if hit.any():
            off = rng.integers(lo, hi, int(hit.sum())).astype(np.uint64)
            chunks.append(_tags(ch, variant[hit], idx[hit], base[hit] + off))
    return merge_sorted(chunks)


def _tags(channel, variant, idx, times):
    t = np.zeros(idx.size, dtype=TAG_DTYPE)
    t["channel"] = channel
    t["variant_id"] = variant
    t["attempt_index"] = idx
    t["time_ps"] = times
    return t


def _residual_records(idx, residual):
    r = np.zeros(idx.size, dtype=RESIDUAL_DTYPE)
    r["attempt_index"] = idx
    r["residual"] = residual
    return r


def _run_shard(cfg: RunConfig, rng, lo: int, hi: int, rows, readout, chunk: int = 1 << 20):
    pp, noise = cfg.protocol, cfg.noise
    proc = ResidualProcess(rng, noise.stabilizer_bound, cfg.stabilizer_bandwidth, pp.attempt_rate)
    probs = np.array([r.prob for r in rows])
    tags, residuals = [], []
    if cfg.conditioned:
        active = np.array([any(r.clicks) for r in rows])
        p_any = float(probs[active].sum())
        idx = _active_indices(rng, lo, hi, p_any)
        cond = np.where(active, probs, 0.0)
        for start in range(0, idx.size, chunk):
            sub = idx[start:start + chunk]
            row_ids = _sample_rows(rng, cond, sub.size)
            res = proc.at(sub)
            tags.append(_emit_attempts(rng, cfg, sub, row_ids, rows, readout, res))
            residuals.append(_residual_records(sub, res))
    else:
        for start in range(lo, hi, chunk):
            sub = np.arange(start, min(start + chunk, hi), dtype=np.int64)
            row_ids = _sample_rows(rng, probs, sub.size)
            res = proc.at(sub)
            tags.append(_emit_attempts(rng, cfg, sub, row_ids, rows, readout, res))
            red = np.array([any(r.clicks) for r in rows])[row_ids]
            residuals.append(_residual_records(sub[red], res[red]))
    return (np.concatenate(tags) if tags else empty_tags(),
            np.concatenate(residuals) if residuals else np.zeros(0, RESIDUAL_DTYPE))


def run_attempts(cfg: RunConfig) -> SimulationResult:
    """Simulate ``cfg.n_attempts`` entanglement attempts.

    Shards cover contiguous attempt blocks with independent random streams
    spawned from ``cfg.seed``; their outputs are merged in time order, so a
    given ``(seed, shard_count, config)`` always yields the same stream.
    """
    rows = herald_table(cfg.protocol, cfg.noise)
    readout = _Readout(cfg.protocol, cfg.noise, cfg.schedule)
    tags, residuals = [], []
    for (lo, hi), rng in zip(cfg.shard_ranges(), cfg.shard_rngs()):
        t, r = _run_shard(cfg, rng, int(lo), int(hi), rows, readout)
        tags.append(t)
        residuals.append(r)
    res = np.concatenate(residuals) if residuals else np.zeros(0, RESIDUAL_DTYPE)
    return SimulationResult(merge_sorted(tags), res, cfg.n_attempts, cfg.timeline, cfg.schedule)


# ---------------------------------------------------------------------------
# calibration runs with independent emitters


def _signal_patterns(pp: ProtocolParams, noise: NoiseParams, block: str, correlate: str) -> dict:
    """Per-attempt probabilities of signal click patterns ``(ch0, ch1)``."""
    p, eta = pp.p, pp.eta_photon
    one = {(1, 0): eta / 2, (0, 1): eta / 2, (0, 0): 1 - eta}
    if correlate == "g2":
        if block not in ("A", "B"):
            raise ValueError("g2 needs a single emitter: block must be 'A' or 'B'")
        return {k: p * v + (1 - p if k == (0, 0) else 0.0) for k, v in one.items()} | {(1, 1): 0.0}
    if correlate != "hom":
        raise ValueError(f"correlate must be 'g2' or 'hom', got {correlate!r}")
    if block != "both":
        raise ValueError("hom needs both emitters: block must be 'both'")
    v = noise.hom_visibility
    bunch = 1 - (1 - eta) ** 2
    two = {
        (1, 0): v * bunch / 2 + (1 - v) * (eta**2 / 4 + eta * (1 - eta)),
        (0, 1): v * bunch / 2 + (1 - v) * (eta**2 / 4 + eta * (1 - eta)),
        (1, 1): (1 - v) * eta**2 / 2,
        (0, 0): v * (1 - eta) ** 2 + (1 - v) * (1 - eta) ** 2,
    }
    out = {}
    for k in ((0, 0), (1, 0), (0, 1), (1, 1)):
        out[k] = (1 - p) ** 2 * (k == (0, 0)) + 2 * p * (1 - p) * one.get(k, 0.0) + p * p * two[k]
    return out


def background_click_probability(pp: ProtocolParams, noise: NoiseParams, block: str) -> float:
    """Per-channel background probability so that background is the configured
    fraction of all clicks on that channel."""
    f = noise.background_fraction
    if f == 0.0:
        return 0.0
    n_emit = 1 if block in ("A", "B") else 2
    signal = n_emit * pp.p * pp.eta_photon / 2
    return min(signal * f / (1 - f), 1.0)


def independent_emitter_run(cfg: RunConfig, block: str, correlate: str,
                            background: bool | None = None) -> SimulationResult:
    """Calibration streams on the two red channels.

    ``block`` names the emitter(s) whose light reaches the beam splitter; the
    other arm is blocked. ``correlate="g2"`` takes a single emitter, so its
    photons split randomly between ports. ``correlate="hom"`` takes both;
    same-attempt photon pairs leave through different ports with probability
    ``(1 - hom_visibility)/2`` instead of 1/2. Background clicks (uniform over
    the attempt) are on by default for g2 and off for hom.
    """
    pp, noise, tl = cfg.protocol, cfg.noise, cfg.timeline
    sig = _signal_patterns(pp, noise, block, correlate)
    if background is None:
        background = correlate == "g2"
    b = background_click_probability(pp, noise, block) if background else 0.0
    lifetime = {"A": pp.lifetime_A, "B": pp.lifetime_B}.get(block, pp.mean_lifetime)

    keys, probs, bg = [], [], []
    for k, ps in sig.items():
        for b0 in (0, 1):
            for b1 in (0, 1):
                keys.append(k)
                bg.append((b0, b1))
                probs.append(ps * (b if b0 else 1 - b) * (b if b1 else 1 - b))
    keys, bg, probs = np.array(keys), np.array(bg), np.array(probs)
    clicks = keys | bg
    active = clicks.any(axis=1)
    p_any = float(probs[active].sum())
    cond = np.where(active, probs, 0.0)

    tags = []
    for (lo, hi), rng in zip(cfg.shard_ranges(), cfg.shard_rngs()):
        idx = _active_indices(rng, int(lo), int(hi), p_any)
        if idx.size == 0:
            continue
        rid = _sample_rows(rng, cond, idx.size)
        base = idx.astype(np.uint64) * np.uint64(tl.period_ps)
        for ch in (0, 1):
            hs = keys[rid, ch] == 1
            hb = bg[rid, ch] == 1
            t = np.full(idx.size, np.inf)
            t[hs] = tl.ent_offset_ps + pm.sample_emission_times(rng, int(hs.sum()), lifetime, pp.pulse_length) * 1e12
            t[hb] = np.minimum(t[hb], rng.uniform(0.0, tl.period_ps, int(hb.sum())))
            hit = hs | hb
            t = np.minimum(t[hit], tl.period_ps - 1)
            tags.append(_tags(RED_1 if ch == 0 else RED_2, 0, idx[hit], base[hit] + np.floor(t).astype(np.uint64)))
    return SimulationResult(merge_sorted(tags), np.zeros(0, RESIDUAL_DTYPE), cfg.n_attempts, tl, ())
