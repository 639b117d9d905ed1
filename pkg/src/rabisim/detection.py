"""Photon emission point processes and TCSPC histogramming.

Emission is unraveled by quantum jumps (Monte Carlo wave function): the
conditional two-level state evolves under the non-Hermitian effective
Hamiltonian, a jump fires when the conditional norm crosses a uniform
threshold, the jump time is recorded and the state resets to the ground
state. Re-excitation within the pulse is therefore captured exactly,
unlike thinning of the mean emission rate.

The engine precomputes cumulative 2x2 propagators C_k on a fine time grid
covering the drive window. Because the conditional evolution is linear,
the survival curve of a segment restarted in state psi at node k is
``|C_m C_k^{-1} psi|^2`` for m >= k, which is monotone non-increasing, so
jump nodes are located by vectorized binary search across an entire batch
of pulse periods at once. Outside the drive window the evolution is
drive-free and handled in closed form. All randomness comes from
counter-based streams keyed by (pulse index, draw index), which makes
results independent of chunking, threading, and evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import rng
from .bloch import BlochState, BlochTrajectory, EmitterModel
from .errors import StepFailure
from .parallel import map_indexed, worker_count
from .pulses import DriveField, SUPPORT_CUTOFF

#: Target phase advance per propagator step (rad).
ENGINE_PHASE_STEP = 0.05

_WAVE_LIMIT = 100_000


@dataclass(frozen=True)
class DetectorModel:
    """Single-photon detector: efficiency, dead time, timing jitter, period."""

    efficiency: float
    dead_time: float = 70e-9
    timing_jitter_sigma: float = 50e-12
    rep_period: float = 1.4e-6
    bin_width: float = 0.5e-9

    def __post_init__(self):
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError("efficiency must be in (0, 1]")
        if self.dead_time < 0:
            raise ValueError("dead_time must be >= 0")
        if self.timing_jitter_sigma < 0:
            raise ValueError("timing_jitter_sigma must be >= 0")
        if self.bin_width <= 0:
            raise ValueError("bin_width must be > 0")
        if self.rep_period <= 0:
            raise ValueError("rep_period must be > 0")

    def n_bins(self) -> int:
        return int(math.floor(self.rep_period / self.bin_width + 1e-9))


@dataclass(frozen=True, eq=False)
class TcspcHistogram:
    """Histogram of detected arrival times relative to the pulse trigger."""

    bin_edges: np.ndarray
    counts: np.ndarray
    n_pulses: int
    metadata: dict = dataclass_field(default_factory=dict)

    def __post_init__(self):
        if self.counts.size != self.bin_edges.size - 1:
            raise ValueError("counts length must equal number of bins")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def total(self) -> int:
        return int(np.sum(self.counts))


def emission_rate(trajectory: BlochTrajectory, emitter: EmitterModel):
    """Mean photon flux Gamma1 * rho_ee(t) along a trajectory."""
    return trajectory.times, emitter.gamma1 * trajectory.rho_ee


def first_detected_density(times, rates, efficiency: float):
    """Arrival-time density of the first *detected* photon.

    Thinned-Poisson approximation ``f(t) = eta r(t) exp(-eta R(t))`` with
    ``R`` the cumulative of the mean rate ``r`` (trapezoid on the given
    grid). Good when the efficiency is small or re-excitation is weak; at
    eta -> 1 it deliberately ignores the anti-bunched gap after each
    emission, so disagreement with the jump-process Monte Carlo there is
    expected, not a bug.
    """
    if not 0.0 < efficiency <= 1.0:
        raise ValueError("efficiency must be in (0, 1]")
    times = np.asarray(times, dtype=float)
    rates = np.asarray(rates, dtype=float)
    if np.any(rates < -1e-30):
        raise ValueError("rates must be non-negative")
    dt = np.diff(times)
    cum = np.concatenate(([0.0], np.cumsum(0.5 * (rates[1:] + rates[:-1]) * dt)))
    return efficiency * rates * np.exp(-efficiency * cum)


# ---------------------------------------------------------------------------
# Jump engine
# ---------------------------------------------------------------------------

class _JumpEngine:
    """Cumulative-propagator tables for one (emitter, field, window) config."""

    def __init__(self, emitter: EmitterModel, field: DriveField,
                 t0: float, t_limit: float,
                 phase_step: float = ENGINE_PHASE_STEP):
        self.emitter = emitter
        self.gamma1 = emitter.gamma1
        self.gphi = emitter.pure_dephasing
        self.t0 = float(t0)
        self.t_limit = float(t_limit)
        support = field.support(SUPPORT_CUTOFF)
        if support is None or support[0] >= t_limit or support[1] <= t0:
            self.grid_end = self.t0
            self.times = np.array([self.t0])
            self.cum = np.eye(2, dtype=complex)[None, :, :]
            self.ground_restart = np.array([[1.0 + 0j, 0.0 + 0j]])
            self._finish(field)
            return
        self.grid_end = min(support[1], t_limit)
        rate = (math.hypot(emitter.detuning, field.max_amplitude())
                + field.max_abs_chirp() + emitter.gamma1 + emitter.gamma2)
        n_steps = max(64, int(math.ceil((self.grid_end - self.t0) * rate / phase_step)))
        if n_steps > 8_000_000:
            raise StepFailure("drive window requires an unreasonable step count")
        self.times = np.linspace(self.t0, self.grid_end, n_steps + 1)
        self.cum = self._cumulative_propagators(field, n_steps)
        self.ground_restart = self._ground_restart_states()
        self._finish(field)

    def _finish(self, field: DriveField):
        # Survival of a ground start at node 0, forced monotone against
        # step-level roundoff so searchsorted stays well-defined.
        g = self.cum[:, :, 0]
        self.ground_norm = np.minimum.accumulate(
            np.abs(g[:, 0]) ** 2 + np.abs(g[:, 1]) ** 2)
        self.field_hash = field.content_hash()

    def _cumulative_propagators(self, field: DriveField, n_steps: int) -> np.ndarray:
        det = self.emitter.detuning
        t = self.times
        h = t[1] - t[0]

        def a_matrix(ts):
            om = np.asarray(field.rabi(ts), dtype=complex)
            n = om.shape[0]
            a = np.empty((n, 2, 2), dtype=complex)
            a[:, 0, 0] = -0.25 * self.gphi
            a[:, 0, 1] = -0.5j * om
            a[:, 1, 0] = -0.5j * np.conj(om)
            a[:, 1, 1] = -1j * det - 0.5 * self.gamma1 - 0.25 * self.gphi
            return a

        a0 = a_matrix(t[:-1])
        am = a_matrix(t[:-1] + 0.5 * h)
        a1 = a_matrix(t[1:])
        eye = np.eye(2, dtype=complex)[None, :, :]
        k1 = a0
        k2 = am @ (eye + 0.5 * h * k1)
        k3 = am @ (eye + 0.5 * h * k2)
        k4 = a1 @ (eye + h * k3)
        step = eye + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        cum = np.empty((n_steps + 1, 2, 2), dtype=complex)
        cum[0] = np.eye(2)
        for k in range(n_steps):
            cum[k + 1] = step[k] @ cum[k]
        return cum

    def _ground_restart_states(self) -> np.ndarray:
        # First column of C_k^{-1}: the grid-coordinate vector of a ground
        # restart at node k.
        c = self.cum
        det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] * c[:, 1, 0]
        w = np.empty((c.shape[0], 2), dtype=complex)
        w[:, 0] = c[:, 1, 1] / det
        w[:, 1] = -c[:, 1, 0] / det
        return w

    def to_grid_coords(self, nodes: np.ndarray, psi: np.ndarray) -> np.ndarray:
        """C_node^{-1} psi for per-row nodes and physical states psi (B, 2)."""
        c = self.cum[nodes]
        det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] * c[:, 1, 0]
        w = np.empty_like(psi)
        w[:, 0] = (c[:, 1, 1] * psi[:, 0] - c[:, 0, 1] * psi[:, 1]) / det
        w[:, 1] = (c[:, 0, 0] * psi[:, 1] - c[:, 1, 0] * psi[:, 0]) / det
        return w

    def state_at(self, nodes: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Physical (unnormalized) amplitudes C_node w."""
        c = self.cum[nodes]
        out = np.empty_like(w)
        out[:, 0] = c[:, 0, 0] * w[:, 0] + c[:, 0, 1] * w[:, 1]
        out[:, 1] = c[:, 1, 0] * w[:, 0] + c[:, 1, 1] * w[:, 1]
        return out

    def norm_at(self, nodes: np.ndarray, w: np.ndarray) -> np.ndarray:
        psi = self.state_at(nodes, w)
        return np.abs(psi[:, 0]) ** 2 + np.abs(psi[:, 1]) ** 2

    @property
    def last_node(self) -> int:
        return self.times.size - 1


def _emission_times_batch(engine: _JumpEngine, seed: int, pulse_ids: np.ndarray,
                          initial: BlochState = BlochState(0.0)):
    """Jump-process emission times for a batch of pulse periods.

    Returns (pulse_id, time) arrays sorted by pulse then time. The initial
    state must be pure (the unraveling propagates a wave function):
    coherence is honored via the amplitude pair (sqrt(1-rho), sqrt(rho)).
    """
    b = pulse_ids.size
    if b == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    purity = initial.rho_ee * (1.0 - initial.rho_ee) - abs(initial.coherence) ** 2
    if abs(purity) > 1e-9:
        raise ValueError("jump unraveling needs a pure initial state")
    cg = math.sqrt(max(1.0 - initial.rho_ee, 0.0))
    ce_mag = math.sqrt(max(initial.rho_ee, 0.0))
    if ce_mag > 0 and abs(initial.coherence) > 0:
        ce = initial.coherence.conjugate() / cg if cg > 0 else ce_mag
    else:
        ce = ce_mag
    psi0 = np.array([cg, ce], dtype=complex)
    psi0 /= math.sqrt(abs(psi0[0]) ** 2 + abs(psi0[1]) ** 2)

    gamma1 = engine.gamma1
    gphi = engine.gphi
    n_last = engine.last_node

    # Per-trajectory segment state.
    in_grid = np.ones(b, dtype=bool) if n_last > 0 else np.zeros(b, dtype=bool)
    node = np.zeros(b, dtype=np.int64)
    w = np.tile(engine.to_grid_coords(np.zeros(1, dtype=np.int64),
                                      psi0[None, :])[0], (b, 1))
    in_tail = ~in_grid
    tail_amp = np.tile(psi0, (b, 1))
    tail_t = np.full(b, engine.t0)
    draws = np.zeros(b, dtype=np.int64)
    r = rng.uniform(seed, rng.STREAM_JUMP, pulse_ids, draws)

    out_pulse: list[np.ndarray] = []
    out_time: list[np.ndarray] = []

    for _ in range(_WAVE_LIMIT):
        if not (np.any(in_grid) or np.any(in_tail)):
            break

        if np.any(in_grid):
            rows = np.nonzero(in_grid)[0]
            wr = w[rows]
            n_end = engine.norm_at(np.full(rows.size, n_last, dtype=np.int64), wr)
            to_tail = n_end > r[rows]
            # Grid survivors hand their unnormalized state to the tail phase.
            tr = rows[to_tail]
            if tr.size:
                tail_amp[tr] = engine.state_at(
                    np.full(tr.size, n_last, dtype=np.int64), w[tr])
                tail_t[tr] = engine.times[-1]
                in_grid[tr] = False
                in_tail[tr] = True
            jr = rows[~to_tail]
            if jr.size:
                lo = node[jr].copy()
                hi = np.full(jr.size, n_last, dtype=np.int64)
                wj = w[jr]
                while np.any(lo < hi):
                    mid = (lo + hi) // 2
                    nm = engine.norm_at(mid, wj)
                    below = nm <= r[jr]
                    hi = np.where(below, mid, hi)
                    lo = np.where(below, lo, mid + 1)
                m = hi
                n1 = engine.norm_at(m - 1, wj)
                n2 = engine.norm_at(m, wj)
                rj = r[jr]
                with np.errstate(divide="ignore", invalid="ignore"):
                    frac = np.log(n1 / np.maximum(rj, 1e-300)) / np.log(
                        np.maximum(n1 / np.maximum(n2, 1e-300), 1.0 + 1e-15))
                frac = np.clip(np.nan_to_num(frac, nan=0.5), 0.0, 1.0)
                dt_grid = engine.times[1] - engine.times[0]
                t_jump = engine.times[m - 1] + frac * dt_grid

                if gphi > 0.0:
                    psi = engine.state_at(m, wj)
                    w_emit = gamma1 * np.abs(psi[:, 1]) ** 2
                    w_deph = 0.5 * gphi * (np.abs(psi[:, 0]) ** 2
                                           + np.abs(psi[:, 1]) ** 2)
                    draws[jr] += 1
                    u = rng.uniform(seed, rng.STREAM_JUMP, pulse_ids[jr], draws[jr])
                    emit = u * (w_emit + w_deph) < w_emit
                else:
                    emit = np.ones(jr.size, dtype=bool)

                er = jr[emit]
                if er.size:
                    out_pulse.append(pulse_ids[er])
                    out_time.append(t_jump[emit])
                    node[er] = m[emit]
                    w[er] = engine.ground_restart[m[emit]]
                dr = jr[~emit]
                if dr.size:
                    psi_d = engine.state_at(m[~emit], w[dr])
                    psi_d[:, 1] = -psi_d[:, 1]
                    norm = np.sqrt(np.abs(psi_d[:, 0]) ** 2
                                   + np.abs(psi_d[:, 1]) ** 2)
                    psi_d /= norm[:, None]
                    node[dr] = m[~emit]
                    w[dr] = engine.to_grid_coords(m[~emit], psi_d)
                draws[jr] += 1
                r[jr] = rng.uniform(seed, rng.STREAM_JUMP, pulse_ids[jr], draws[jr])

        if np.any(in_tail):
            rows = np.nonzero(in_tail)[0]
            cg2 = np.abs(tail_amp[rows, 0]) ** 2
            ce2 = np.abs(tail_amp[rows, 1]) ** 2
            rr = r[rows]
            if gphi == 0.0:
                never = rr <= cg2 * (1.0 + 1e-15)
                tau = np.full(rows.size, np.inf)
                can = ~never
                with np.errstate(divide="ignore", invalid="ignore"):
                    tau[can] = np.log(ce2[can] / (rr[can] - cg2[can])) / gamma1
                tau = np.maximum(tau, 0.0)
                t_jump = tail_t[rows] + tau
                late = t_jump > engine.t_limit
                done = never | late
                er = rows[~done]
                if er.size:
                    out_pulse.append(pulse_ids[er])
                    out_time.append(t_jump[~done])
                in_tail[rows] = False
            else:
                tau = _tail_jump_time(cg2, ce2, rr, gamma1, gphi)
                t_jump = tail_t[rows] + tau
                late = t_jump > engine.t_limit
                in_tail[rows[late]] = False
                live = rows[~late]
                if live.size:
                    tl = tau[~late]
                    e_g = np.abs(tail_amp[live, 0]) ** 2 * np.exp(-0.5 * gphi * tl)
                    e_e = (np.abs(tail_amp[live, 1]) ** 2
                           * np.exp(-(gamma1 + 0.5 * gphi) * tl))
                    w_emit = gamma1 * e_e
                    w_deph = 0.5 * gphi * (e_g + e_e)
                    draws[live] += 1
                    u = rng.uniform(seed, rng.STREAM_JUMP, pulse_ids[live],
                                    draws[live])
                    emit = u * (w_emit + w_deph) < w_emit
                    er = live[emit]
                    if er.size:
                        out_pulse.append(pulse_ids[er])
                        out_time.append(t_jump[~late][emit])
                        in_tail[er] = False  # ground + no drive: no more photons
                    dr = live[~emit]
                    if dr.size:
                        amp = tail_amp[dr]
                        decay = np.exp(-0.25 * gphi * tl[~emit])
                        amp[:, 0] *= decay
                        amp[:, 1] *= -decay * np.exp(
                            (-1j * engine.emitter.detuning
                             - 0.5 * gamma1) * tl[~emit])
                        norm = np.sqrt(np.abs(amp[:, 0]) ** 2
                                       + np.abs(amp[:, 1]) ** 2)
                        tail_amp[dr] = amp / norm[:, None]
                        tail_t[dr] = t_jump[~late][~emit]
                        draws[dr] += 1
                        r[dr] = rng.uniform(seed, rng.STREAM_JUMP,
                                            pulse_ids[dr], draws[dr])
    else:
        raise StepFailure("jump simulation exceeded the wave limit")

    if out_pulse:
        pulses = np.concatenate(out_pulse)
        times = np.concatenate(out_time)
    else:
        pulses = np.empty(0, dtype=np.int64)
        times = np.empty(0)
    order = np.lexsort((times, pulses))
    return pulses[order], times[order]


def _tail_jump_time(cg2, ce2, r, gamma1: float, gphi: float) -> np.ndarray:
    """Solve |cg|^2 e^{-g_phi tau/2} + |ce|^2 e^{-(Gamma1+g_phi/2) tau} = r."""
    n0 = cg2 + ce2
    tau = np.zeros_like(r)
    lam_slow = 0.5 * gphi
    lam_fast = gamma1 + 0.5 * gphi
    # Bisection on a strictly decreasing function; upper bound from the
    # slow eigenvalue alone.
    hi = np.log(np.maximum(n0 / r, 1.0)) / lam_slow + 1.0 / lam_slow
    lo = np.zeros_like(r)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = cg2 * np.exp(-lam_slow * mid) + ce2 * np.exp(-lam_fast * mid)
        high = val > r
        lo = np.where(high, mid, lo)
        hi = np.where(high, hi, mid)
        if np.max(hi - lo) < 1e-16 * np.max(hi + 1.0):
            break
    tau = 0.5 * (lo + hi)
    return tau


def simulate_photon_stream(emitter: EmitterModel, field: DriveField, t_span,
                           seed: int, initial: BlochState = BlochState(0.0),
                           pulse_index: int = 0) -> np.ndarray:
    """Emission times of one quantum-jump trajectory over ``t_span``.

    Times are strictly increasing; re-excitation after an emission is
    captured whenever the drive is still on.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    engine = _JumpEngine(emitter, field, t0, t1)
    _, times = _emission_times_batch(
        engine, seed, np.array([pulse_index], dtype=np.int64), initial)
    return times


def simulate_tcspc(emitter: EmitterModel, field: DriveField,
                   detector: DetectorModel, n_pulses: int, seed: int,
                   initial: BlochState = BlochState(0.0),
                   threads: int | None = None) -> TcspcHistogram:
    """TCSPC histogram over ``n_pulses`` identical pulse periods.

    Each period starts in ``initial`` (ground by default; the repetition
    period is validated to exceed the drive span, and residual excitation
    across a period boundary is negligible for any supported config).
    Emissions are thinned with the detector efficiency, detection
    timestamps get Gaussian timing jitter, and a non-paralyzable dead time
    is enforced on the merged absolute-time stream, carrying across period
    boundaries. Fixed (seed, n_pulses, config) gives bit-identical
    histograms for any chunking or thread count.
    """
    if n_pulses < 1:
        raise ValueError("n_pulses must be >= 1")
    support = field.support(SUPPORT_CUTOFF)
    if support is not None and support[1] > detector.rep_period:
        raise ValueError("rep_period must exceed the drive span")

    engine = _JumpEngine(emitter, field, 0.0, detector.rep_period)
    if threads is None:
        threads = worker_count()
    chunk = 1 << 16
    starts = list(range(0, n_pulses, chunk))

    def run_chunk(start: int):
        ids = np.arange(start, min(start + chunk, n_pulses), dtype=np.int64)
        pulses, times = _emission_times_batch(engine, seed, ids, initial)
        # Emission ordinal within its pulse (pulses are sorted, times
        # ascending within a pulse).
        if pulses.size:
            firsts = np.nonzero(np.diff(pulses, prepend=pulses[0] - 1))[0]
            seg = np.repeat(firsts, np.diff(np.append(firsts, pulses.size)))
            ordinal = np.arange(pulses.size) - seg
        else:
            ordinal = np.empty(0, dtype=np.int64)
        kept = rng.uniform(seed, rng.STREAM_THIN, pulses, ordinal) < detector.efficiency
        pulses, times, ordinal = pulses[kept], times[kept], ordinal[kept]
        if detector.timing_jitter_sigma > 0 and pulses.size:
            times = times + detector.timing_jitter_sigma * rng.normal(
                seed, rng.STREAM_JITTER, pulses, ordinal)
        return pulses, times

    parts = map_indexed(run_chunk, starts, threads)

    pulses = np.concatenate([p for p, _ in parts]) if parts else np.empty(0, np.int64)
    times = np.concatenate([t for _, t in parts]) if parts else np.empty(0)

    # Non-paralyzable dead time on absolute detection timestamps.
    if detector.dead_time > 0 and pulses.size:
        abs_t = pulses * detector.rep_period + times
        order = np.argsort(abs_t, kind="stable")
        keep = np.zeros(order.size, dtype=bool)
        blocked_until = -math.inf
        dead = detector.dead_time
        abs_sorted = abs_t[order]
        for i in range(order.size):
            ti = abs_sorted[i]
            if ti >= blocked_until:
                keep[i] = True
                blocked_until = ti + dead
        sel = order[keep]
        pulses, times = pulses[sel], times[sel]

    n_bins = detector.n_bins()
    edges = detector.bin_width * np.arange(n_bins + 1)
    counts, _ = np.histogram(np.maximum(times, 0.0), bins=edges)
    meta = {
        "seed": int(seed),
        "n_pulses": int(n_pulses),
        "field_hash": engine.field_hash,
        "efficiency": detector.efficiency,
        "dead_time": detector.dead_time,
        "timing_jitter_sigma": detector.timing_jitter_sigma,
        "rep_period": detector.rep_period,
        "bin_width": detector.bin_width,
    }
    hist = TcspcHistogram(bin_edges=edges, counts=counts.astype(np.int64),
                          n_pulses=n_pulses, metadata=meta)
    if detector.dead_time >= edges[-1] and hist.total() > n_pulses:
        raise AssertionError("dead time exceeding the histogram span must cap "
                             "counts at one per pulse")
    return hist
