"""Reconstruct measured quantities from time-tag streams.

All accumulators here (``Histogram``, ``ReadoutCounts``) add with ``+`` so
sharded or chunked analyses merge into the same result as a single pass.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit, minimize

from .protocol import port_sign
from .timetags import BLUE_A, BLUE_B, RED_1, RED_2, Timeline


class IncompleteScheduleError(ValueError):
    """The stream lacks a variant that the requested reconstruction needs."""


class FitError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# histograms


@dataclass
class Histogram:
    """Integer counts in bins ``[origin + k*w, origin + (k+1)*w)``, in picoseconds."""

    bin_width_ps: int
    origin_ps: int
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.bin_width_ps <= 0:
            raise ValueError("bin width must be positive")
        if np.any(self.counts < 0):
            raise ValueError("histogram counts must be non-negative")

    @property
    def edges(self) -> np.ndarray:
        return self.origin_ps + self.bin_width_ps * np.arange(self.counts.size + 1, dtype=np.int64)

    @property
    def centers(self) -> np.ndarray:
        return self.edges[:-1] + 0.5 * self.bin_width_ps

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: Histogram) -> Histogram:
        if (self.bin_width_ps, self.origin_ps, self.counts.size) != (
                other.bin_width_ps, other.origin_ps, other.counts.size):
            raise ValueError("histograms have different binning")
        return Histogram(self.bin_width_ps, self.origin_ps, self.counts + other.counts)

    def __sub__(self, other: Histogram) -> Histogram:
        if (self.bin_width_ps, self.origin_ps, self.counts.size) != (
                other.bin_width_ps, other.origin_ps, other.counts.size):
            raise ValueError("histograms have different binning")
        return Histogram(self.bin_width_ps, self.origin_ps, self.counts - other.counts)

    def rebin(self, factor: int) -> Histogram:
        """Merge ``factor`` adjacent bins; a ragged tail is folded into the last bin."""
        if factor <= 0:
            raise ValueError("rebin factor must be positive")
        n = self.counts.size
        groups = np.arange(n) // factor
        counts = np.bincount(groups, weights=self.counts, minlength=-(-n // factor)).astype(np.int64)
        return Histogram(self.bin_width_ps * factor, self.origin_ps, counts)

    def area(self, lo_ps: float, hi_ps: float) -> int:
        """Counts in bins whose centres fall in ``[lo, hi)``."""
        c = self.centers
        return int(self.counts[(c >= lo_ps) & (c < hi_ps)].sum())


def _pair_deltas(ta: np.ndarray, tb: np.ndarray, span: int, exclude_self: bool):
    """All ``tb[j] - ta[i]`` with ``-span <= delta < span``; inputs sorted."""
    ta = ta.astype(np.int64)
    tb = tb.astype(np.int64)
    lo = np.searchsorted(tb, ta - span, side="left")
    hi = np.searchsorted(tb, ta + span, side="left")
    n = hi - lo
    if n.sum() == 0:
        return np.zeros(0, dtype=np.int64)
    i = np.repeat(np.arange(ta.size), n)
    j = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n) + np.repeat(lo, n)
    if exclude_self:
        keep = i != j
        i, j = i[keep], j[keep]
    return tb[j] - ta[i]


def correlation_histogram(tags: np.ndarray, ch_a: int, ch_b: int, bin_width_ps: int, span_ps: int) -> Histogram:
    """Histogram of ``t_b - t_a`` over all pairs with ``|delay|`` inside ``[-span, span)``.

    For ``ch_a == ch_b`` each tag is never paired with itself. ``span_ps``
    must be a multiple of ``bin_width_ps``.
    """
    if span_ps <= 0 or span_ps % bin_width_ps:
        raise ValueError("span must be a positive multiple of the bin width")
    nbins = 2 * span_ps // bin_width_ps
    ta = np.sort(tags["time_ps"][tags["channel"] == ch_a])
    tb = ta if ch_a == ch_b else np.sort(tags["time_ps"][tags["channel"] == ch_b])
    d = _pair_deltas(ta, tb, span_ps, exclude_self=ch_a == ch_b)
    counts = np.bincount((d + span_ps) // bin_width_ps, minlength=nbins)
    return Histogram(bin_width_ps, -span_ps, counts)


class CorrelationAccumulator:
    """Streaming ``correlation_histogram`` over time-ordered chunks.

    Keeps only the tags from the last ``span`` picoseconds between chunks.
    """

    def __init__(self, ch_a: int, ch_b: int, bin_width_ps: int, span_ps: int):
        self.args = (ch_a, ch_b, bin_width_ps, span_ps)
        self.hist = Histogram(bin_width_ps, -span_ps, np.zeros(2 * span_ps // bin_width_ps, dtype=np.int64))
        self._buffer = None

    def update(self, chunk: np.ndarray):
        ch_a, ch_b, _, span = self.args
        chunk = chunk[(chunk["channel"] == ch_a) | (chunk["channel"] == ch_b)]
        if chunk.size == 0:
            return
        both = chunk if self._buffer is None else np.concatenate([self._buffer, chunk])
        self.hist = self.hist + correlation_histogram(both, *self.args)
        if self._buffer is not None and self._buffer.size:
            self.hist = self.hist - correlation_histogram(self._buffer, *self.args)
        last = int(both["time_ps"].max())
        self._buffer = both[both["time_ps"].astype(np.int64) >= last - span]

    def result(self) -> Histogram:
        return self.hist


def hom_visibility(hist: Histogram, period_ps: float, n_side: int = 1):
    """``V = 1 - 2 A0 / mean(A_side)`` with Poisson uncertainty.

    Each peak area integrates one full attempt period centred on the peak.
    ``n_side`` peaks on each side are averaged.
    """
    a0 = hist.area(-period_ps / 2, period_ps / 2)
    side = []
    for k in range(1, n_side + 1):
        for s in (-1, 1):
            lo = s * k * period_ps - period_ps / 2
            if lo < hist.origin_ps or lo + period_ps > hist.edges[-1]:
                raise ValueError("histogram span does not cover the requested side peaks")
            side.append(hist.area(lo, lo + period_ps))
    mean_side = float(np.mean(side))
    if mean_side == 0:
        raise ValueError("side peaks are empty")
    v = 1.0 - 2.0 * a0 / mean_side
    rel = math.sqrt(1.0 / max(a0, 1) + 1.0 / (len(side) * mean_side))
    return v, 2.0 * max(a0, 1) / mean_side * rel


def emission_histogram(tags: np.ndarray, channel: int, timeline: Timeline, bin_width_ps: int = 16,
                       span_ps: int | None = None) -> Histogram:
    """Arrival times relative to the start of the excitation pulse."""
    span = span_ps if span_ps is not None else timeline.period_ps - timeline.ent_offset_ps
    sel = tags[tags["channel"] == channel]
    rel = (sel["time_ps"].astype(np.int64) - sel["attempt_index"].astype(np.int64) * timeline.period_ps
           - timeline.ent_offset_ps)
    rel = rel[(rel >= 0) & (rel < span)]
    return Histogram(bin_width_ps, 0, np.bincount(rel // bin_width_ps, minlength=-(-span // bin_width_ps)))


def _poisson_nll(params, t, y):
    log_a, log_tau, b = params
    tau = math.exp(log_tau)
    decay = np.exp(log_a - t / tau)
    m = decay + b
    r = 1.0 - y / m
    nll = float(np.sum(m - y * np.log(m)))
    grad = np.array([np.sum(decay * r), np.sum(decay * r * t / tau), np.sum(r)])
    return nll, grad


def fit_exponential_lifetime(hist: Histogram, skip_bins: int = 1, background: bool = True):
    """Fit ``A exp(-t/τ) + B`` to the tail after the peak. Returns ``(τ, σ_τ)`` in seconds.

    Least squares gives the starting point; the result maximises the Poisson
    likelihood, which stays unbiased when the tail bins hold few counts.
    ``B`` absorbs a flat background and is fixed to zero with
    ``background=False``.
    """
    counts = hist.counts
    if counts.size == 0 or counts.sum() == 0:
        raise FitError("empty histogram")
    start = int(np.argmax(counts)) + skip_bins
    y = counts[start:].astype(float)
    t = hist.centers[start:] - hist.centers[start]
    if y.size < 4 or y[0] <= 0:
        raise FitError("too few tail bins to fit")
    tail_len = float(t[-1])
    # initial guess from the 1/e crossing
    below = np.nonzero(y < y[0] / math.e)[0]
    tau0 = float(t[below[0]]) if below.size else tail_len
    sigma = np.sqrt(np.maximum(y, 1.0))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OptimizeWarning)
            popt, _ = curve_fit(lambda t, a, tau: a * np.exp(-t / tau), t, y,
                                p0=(y[0], max(tau0, hist.bin_width_ps)),
                                sigma=sigma, absolute_sigma=True, maxfev=5000)
    except (RuntimeError, ValueError) as exc:
        raise FitError(f"lifetime fit did not converge: {exc}") from exc
    if not (popt[0] > 0 and 0 < popt[1] < 10 * tail_len):
        raise FitError(f"no exponential decay resolved in the tail (tau={popt[1]:g} ps)")
    b0 = float(np.mean(y[-max(1, y.size // 10):])) if background else 0.0
    bounds = [(None, None), (None, math.log(10 * tail_len)), (0.0, None if background else 0.0)]
    res = minimize(_poisson_nll, (math.log(popt[0]), math.log(min(popt[1], tail_len)), b0), args=(t, y),
                   jac=True, method="L-BFGS-B", bounds=bounds)
    if not np.all(np.isfinite(res.x)):
        raise FitError("lifetime likelihood fit did not converge")
    a, tau, b = math.exp(res.x[0]), math.exp(res.x[1]), float(res.x[2])
    # Fisher information of (A, τ[, B]) for Poisson bins
    decay = a * np.exp(-t / tau)
    m = decay + b
    d = [decay / a, decay * t / tau**2]
    if background:
        d.append(np.ones_like(t))
    d = np.stack(d)
    info = (d / m) @ d.T
    try:
        err = float(math.sqrt(np.linalg.inv(info)[1, 1]))
    except (np.linalg.LinAlgError, ValueError):
        err = math.inf
    if not (0 < tau < tail_len) or not err < 0.5 * tau:
        raise FitError(f"no exponential decay resolved in the tail (tau={tau:g} ps)")
    return tau * 1e-12, err * 1e-12


# ---------------------------------------------------------------------------
# readout coincidences


@dataclass
class ReadoutCounts:
    """Heralded readout outcomes per variant and herald port.

    ``outcomes[v, port - 1, k]`` counts heralds of variant ``v`` whose readout
    gave ``k = click_A + 2 * click_B``.
    """

    outcomes: np.ndarray

    @classmethod
    def zeros(cls, n_variants: int) -> ReadoutCounts:
        return cls(np.zeros((n_variants, 2, 4), dtype=np.int64))

    @property
    def n_variants(self) -> int:
        return self.outcomes.shape[0]

    @property
    def heralds(self) -> np.ndarray:
        return self.outcomes.sum(axis=2)

    @property
    def coincidences(self) -> np.ndarray:
        return self.outcomes[:, :, 3]

    def __add__(self, other: ReadoutCounts) -> ReadoutCounts:
        if self.outcomes.shape != other.outcomes.shape:
            raise ValueError("count tables cover different schedules")
        return ReadoutCounts(self.outcomes + other.outcomes)

    @classmethod
    def from_tags(cls, tags: np.ndarray, n_variants: int, timeline: Timeline,
                  accept_window_ps: int | None = None) -> ReadoutCounts:
        """Count heralded attempts and their readout outcomes.

        An attempt is heralded when exactly one red tag lies inside the accept
        window; tags pair by ``attempt_index``.
        """
        out = cls.zeros(n_variants)
        if tags.size == 0:
            return out
        win = timeline.accept_window_ps if accept_window_ps is None else accept_window_ps
        attempt = tags["attempt_index"].astype(np.int64)
        rel = tags["time_ps"].astype(np.int64) - attempt * timeline.period_ps
        ch = tags["channel"]
        red = ((ch == RED_1) | (ch == RED_2)) & (rel >= timeline.ent_offset_ps) & (rel < timeline.ent_offset_ps + win)
        blue_a = (ch == BLUE_A) & (rel >= timeline.readout_a[0]) & (rel < timeline.readout_a[1])
        blue_b = (ch == BLUE_B) & (rel >= timeline.readout_b[0]) & (rel < timeline.readout_b[1])

        red_att, red_n = np.unique(attempt[red], return_counts=True)
        heralded = red_att[red_n == 1]
        if heralded.size == 0:
            return out
        sel = red & np.isin(attempt, heralded)
        order = np.argsort(attempt[sel])
        h_att = attempt[sel][order]
        port = ch[sel][order].astype(np.int64)
        variant = tags["variant_id"][sel][order].astype(np.int64)
        if variant.size and variant.max() >= n_variants:
            raise IncompleteScheduleError(f"variant id {variant.max()} outside a schedule of {n_variants}")
        ca = np.isin(h_att, attempt[blue_a])
        cb = np.isin(h_att, attempt[blue_b])
        k = ca.astype(np.int64) + 2 * cb.astype(np.int64)
        np.add.at(out.outcomes, (variant, port, k), 1)
        return out

    @classmethod
    def from_chunks(cls, chunks, n_variants: int, timeline: Timeline,
                    accept_window_ps: int | None = None) -> ReadoutCounts:
        """Streaming version; an attempt split across chunks is held back until complete."""
        total = cls.zeros(n_variants)
        carry = None
        for chunk in chunks:
            if carry is not None and carry.size:
                chunk = np.concatenate([carry, chunk])
            if chunk.size == 0:
                continue
            last = chunk["attempt_index"].max()
            tail = chunk["attempt_index"] == last
            total = total + cls.from_tags(chunk[~tail], n_variants, timeline, accept_window_ps)
            carry = chunk[tail]
        if carry is not None and carry.size:
            total = total + cls.from_tags(carry, n_variants, timeline, accept_window_ps)
        return total


# ---------------------------------------------------------------------------
# tomography


_PARITY = np.array([1.0, -1.0, -1.0, 1.0])
_ODD = np.array([0.0, 1.0, 1.0, 0.0])


def _normalized(coinc: np.ndarray, heralds: np.ndarray):
    """Coincidence rates of four variants normalised to sum 1, with binomial covariance."""
    heralds = np.asarray(heralds, dtype=float)
    r = coinc / heralds
    var = r * (1 - r) / heralds
    s = r.sum()
    if s == 0:
        return np.full(4, np.nan), np.full((4, 4), np.nan)
    jac = (np.eye(4) * s - r[:, None]) / s**2  # d P_v / d r_u, rows v
    cov = jac @ np.diag(var) @ jac.T
    return r / s, cov


def _linear(weights, p, cov):
    return float(weights @ p), float(math.sqrt(max(weights @ cov @ weights, 0.0)))


def bell_fidelity_estimate(p_odd: float, v_mean: float) -> float:
    """Fidelity to the odd-parity Bell state from its population and sign-corrected visibility.

    Valid when the ↓↓/↑↑ coherence and single-spin coherences vanish.
    """
    return 0.5 * (p_odd + v_mean)


@dataclass
class TomographyResult:
    populations: np.ndarray
    population_errors: np.ndarray
    visibility_port1: float
    visibility_port1_error: float
    visibility_port2: float
    visibility_port2_error: float
    p_odd: float
    p_odd_error: float
    fidelity: float
    fidelity_error: float
    n_three_photon_events: int
    events_per_basis: dict
    delta_phi: float = 0.0

    def rows(self):
        from .fock import BASIS_LABELS
        for label, v, e in zip(BASIS_LABELS, self.populations, self.population_errors):
            yield f"P_{label}", float(v), float(e)
        yield "P_odd", self.p_odd, self.p_odd_error
        yield "V_port1", self.visibility_port1, self.visibility_port1_error
        yield "V_port2", self.visibility_port2, self.visibility_port2_error
        yield "fidelity", self.fidelity, self.fidelity_error
        for basis, n in self.events_per_basis.items():
            yield f"events_{basis}", n, 0.0


def _variant_ids(schedule, basis, delta_phi=None):
    """Variant id per population target for one basis (and setpoint)."""
    ids = {}
    for i, v in enumerate(schedule):
        if v.basis != basis:
            continue
        if delta_phi is not None and not math.isclose(v.delta_phi_setpoint, delta_phi, abs_tol=1e-12):
            continue
        ids.setdefault(v.population_target, []).append(i)
    missing = [t for t in range(4) if t not in ids]
    if missing:
        raise IncompleteScheduleError(
            f"schedule has no {basis} variant for target(s) {missing}"
            + (f" at delta_phi={delta_phi:g}" if delta_phi is not None else ""))
    return [ids[t] for t in range(4)]


def _basis_counts(counts: ReadoutCounts, ids, ports):
    coinc = np.array([counts.coincidences[i][:, ports].sum() for i in ids])
    heralds = np.array([counts.heralds[i][:, ports].sum() for i in ids])
    if np.any(heralds == 0):
        raise IncompleteScheduleError("a required variant has no heralded events")
    return coinc, heralds


def three_photon_tomography(stream, schedule, timeline: Timeline | None = None,
                            accept_window_ps: int | None = None) -> TomographyResult:
    """Populations, per-port transverse visibilities and the Bell-fidelity estimate.

    ``stream`` is a tag array or a ``ReadoutCounts`` table. Populations pool
    both herald ports. Uncertainties propagate binomial errors on each
    variant's coincidence rate.
    """
    counts = stream if isinstance(stream, ReadoutCounts) else ReadoutCounts.from_tags(
        stream, len(schedule), timeline or Timeline(), accept_window_ps)
    if counts.n_variants != len(schedule):
        raise IncompleteScheduleError("count table does not match the schedule")

    pop_ids = _variant_ids(schedule, "population")
    delta_phi = schedule[pop_ids[0][0]].delta_phi_setpoint
    c_pop, h_pop = _basis_counts(counts, pop_ids, [0, 1])
    pops, cov = _normalized(c_pop, h_pop)
    p_odd, p_odd_err = _linear(_ODD, pops, cov)

    vis, vis_err = [math.nan, math.nan], [math.nan, math.nan]
    n_trans = 0
    try:
        tr_ids = _variant_ids(schedule, "transverse", delta_phi)
    except IncompleteScheduleError:
        tr_ids = None
    if tr_ids is not None:
        for port in (0, 1):
            c, h = _basis_counts(counts, tr_ids, [port])
            p, cv = _normalized(c, h)
            vis[port], vis_err[port] = _linear(_PARITY, p, cv)
            n_trans += int(c.sum())

    if tr_ids is not None:
        s1, s2 = port_sign(1, delta_phi), port_sign(2, delta_phi)
        v_mean = 0.5 * (s1 * vis[0] + s2 * vis[1])
        v_mean_err = 0.5 * math.hypot(vis_err[0], vis_err[1])
        fid = bell_fidelity_estimate(p_odd, v_mean)
        fid_err = 0.5 * math.hypot(p_odd_err, v_mean_err)
    else:
        fid, fid_err = math.nan, math.nan
    n_pop = int(c_pop.sum())
    return TomographyResult(pops, np.sqrt(np.diag(cov)), vis[0], vis_err[0], vis[1], vis_err[1],
                            p_odd, p_odd_err, fid, fid_err, n_pop + n_trans,
                            {"population": n_pop, "transverse": n_trans}, delta_phi)


# ---------------------------------------------------------------------------
# phase sweeps


@dataclass
class SinusoidFit:
    """``V(φ) = A cos(φ + δ)`` with ``A`` signed and ``δ`` in (-π/2, π/2]."""

    amplitude: float
    amplitude_error: float
    offset: float
    offset_error: float


@dataclass
class SweepResult:
    phis: np.ndarray
    visibilities: np.ndarray  # shape (n_phi, 2)
    errors: np.ndarray
    fits: tuple

    @property
    def opposite_signs(self) -> bool:
        return self.fits[0].amplitude * self.fits[1].amplitude < 0

    def rows(self):
        for i, phi in enumerate(self.phis):
            for port in (1, 2):
                yield float(phi), port, float(self.visibilities[i, port - 1]), float(self.errors[i, port - 1])


def fit_sinusoid(phis, values, errors) -> SinusoidFit:
    """Weighted linear least squares on ``a cos φ + b sin φ``."""
    phis, values = np.asarray(phis, float), np.asarray(values, float)
    w = 1.0 / np.maximum(np.asarray(errors, float), 1e-12)
    design = np.column_stack([np.cos(phis), np.sin(phis)])
    coef, *_ = np.linalg.lstsq(design * w[:, None], values * w, rcond=None)
    cov = np.linalg.pinv((design * w[:, None]).T @ (design * w[:, None]))
    a, b = coef
    amp = math.copysign(math.hypot(a, b), a if a != 0 else 1.0)
    delta = math.atan(-b / a) if a != 0 else math.pi / 2
    # gradients of |A| and δ with respect to (a, b)
    r2 = a * a + b * b
    if r2 > 0:
        g_amp = np.array([a, b]) / math.sqrt(r2) * math.copysign(1.0, amp)
        g_delta = np.array([b, -a]) / r2
        amp_err = math.sqrt(max(g_amp @ cov @ g_amp, 0.0))
        delta_err = math.sqrt(max(g_delta @ cov @ g_delta, 0.0))
    else:
        amp_err = delta_err = math.inf
    return SinusoidFit(amp, amp_err, delta, delta_err)


def phase_sweep_analysis(stream, schedule, timeline: Timeline | None = None,
                         accept_window_ps: int | None = None) -> SweepResult:
    """Per-port transverse visibility at each setpoint of the schedule, plus sinusoid fits."""
    counts = stream if isinstance(stream, ReadoutCounts) else ReadoutCounts.from_tags(
        stream, len(schedule), timeline or Timeline(), accept_window_ps)
    phis = sorted({round(v.delta_phi_setpoint, 12) for v in schedule if v.basis == "transverse"})
    if not phis:
        raise IncompleteScheduleError("schedule has no transverse variants")
    vis = np.zeros((len(phis), 2))
    err = np.zeros((len(phis), 2))
    for i, phi in enumerate(phis):
        ids = _variant_ids(schedule, "transverse", phi)
        for port in (0, 1):
            c, h = _basis_counts(counts, ids, [port])
            p, cv = _normalized(c, h)
            vis[i, port], err[i, port] = _linear(_PARITY, p, cv)
    phis = np.array(phis)
    fits = tuple(fit_sinusoid(phis, vis[:, k], err[:, k]) for k in (0, 1))
    return SweepResult(phis, vis, err, fits)


# ---------------------------------------------------------------------------
# CSV output


def _writer(path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def write_histogram_csv(path, hist: Histogram):
    fh, w = _writer(path)
    with fh:
        w.writerow(["bin_start_ps", "count"])
        for start, c in zip(hist.edges[:-1], hist.counts):
            w.writerow([int(start), int(c)])


def write_rows_csv(path, rows, header=("label", "value", "uncertainty")):
    fh, w = _writer(path)
    with fh:
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def write_sweep_csv(path, sweep: SweepResult):
    write_rows_csv(path, sweep.rows(), ("phi_rad", "port", "visibility", "uncertainty"))


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x
