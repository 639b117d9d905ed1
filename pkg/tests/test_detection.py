import math

import numpy as np
import pytest
from scipy import stats

from rabisim.bloch import BlochState, EmitterModel, integrate, steady_state
from rabisim.detection import (DetectorModel, _JumpEngine,
                               _emission_times_batch, emission_rate,
                               first_detected_density, simulate_photon_stream,
                               simulate_tcspc)
from rabisim.pulses import (DriveField, GaussianEnvelope, RectangularEnvelope,
                            scale_to_area)

TWO_PI = 2.0 * math.pi
T1 = 9.5e-9
EM = EmitterModel.from_lifetime(T1)
ZERO_FIELD = DriveField.single(GaussianEnvelope(peak=0.0, fwhm=1e-9))


def fig2a_field(center=12e-9):
    env = GaussianEnvelope(peak=1.0, fwhm=5.116e-9, center=center)
    return scale_to_area(DriveField.single(env), 5.7 * math.pi)


def test_emission_rate_zero_and_constant():
    traj = integrate(EM, ZERO_FIELD, BlochState(0.0), (0.0, 20e-9), 1e-9)
    t, r = emission_rate(traj, EM)
    assert np.all(r == 0.0)
    # rho = 1/2 constant: rate = Gamma1/2
    gamma1 = TWO_PI * 17e6
    em = EmitterModel(gamma1=gamma1)
    half = traj.rho_ee * 0 + 0.5
    fake = type(traj)(times=traj.times, rho_ee=half, coherence=traj.coherence,
                      detuning=0.0, field_hash="x")
    _, r2 = emission_rate(fake, em)
    assert np.allclose(r2, math.pi * 17e6)


def test_emission_rate_free_decay_integral():
    # Oracle: integral of Gamma1 rho over [0, T] = (1 - exp(-Gamma1 T)) rho0.
    traj = integrate(EM, ZERO_FIELD, BlochState(1.0), (0.0, 30e-9), 0.01e-9)
    t, r = emission_rate(traj, EM)
    total = np.trapezoid(r, t)
    assert total == pytest.approx(-math.expm1(-EM.gamma1 * 30e-9), rel=1e-6)


def test_first_detected_low_efficiency_limit():
    traj = integrate(EM, fig2a_field(), BlochState(0.0), (0.0, 60e-9), 0.05e-9)
    t, r = emission_rate(traj, EM)
    eta = 1e-4
    f = first_detected_density(t, r, eta)
    mask = r > 1e-3 * r.max()
    assert np.max(np.abs(f[mask] / (eta * r[mask]) - 1.0)) < 1e-3


def test_first_detected_free_decay_closed_form():
    traj = integrate(EM, ZERO_FIELD, BlochState(1.0), (0.0, 80e-9), 0.02e-9)
    t, r = emission_rate(traj, EM)
    f = first_detected_density(t, r, 1.0)
    g = EM.gamma1
    expected = g * np.exp(-g * t) * np.exp(-(1.0 - np.exp(-g * t)))
    assert np.max(np.abs(f - expected)) < 1e-4 * np.max(expected)


def test_first_detected_integral_identity():
    traj = integrate(EM, fig2a_field(), BlochState(0.0), (0.0, 90e-9), 0.05e-9)
    t, r = emission_rate(traj, EM)
    mean_total = np.trapezoid(r, t)
    for eta in (0.02, 0.3, 1.0):
        f = first_detected_density(t, r, eta)
        integral = np.trapezoid(f, t)
        assert integral <= 1.0 + 1e-12
        assert integral == pytest.approx(-math.expm1(-eta * mean_total), rel=1e-4)


def test_stream_zero_field_ground_start_empty():
    times = simulate_photon_stream(EM, ZERO_FIELD, (0.0, 200e-9), seed=1)
    assert times.size == 0


def test_stream_zero_field_excited_start_single_exponential():
    engine = _JumpEngine(EM, ZERO_FIELD, 0.0, 2e-6)
    ids = np.arange(20_000, dtype=np.int64)
    pulses, times = _emission_times_batch(engine, 17, ids, BlochState(1.0))
    assert pulses.size == ids.size  # exactly one emission each
    assert np.array_equal(np.sort(pulses), pulses)
    assert stats.kstest(times, "expon", args=(0.0, T1)).pvalue > 0.01


def test_stream_strong_drive_matches_steady_state_flux():
    omega = 5.0 * EM.gamma1
    duration = 60 * T1
    fld = DriveField.single(RectangularEnvelope(peak=omega, duration=duration,
                                                center=0.5 * duration))
    engine = _JumpEngine(EM, fld, 0.0, duration + 20 * T1)
    ids = np.arange(10_000, dtype=np.int64)
    pulses, times = _emission_times_batch(engine, 3, ids)
    counts = np.bincount(pulses, minlength=ids.size)
    expected = EM.gamma1 * steady_state(EM, omega).rho_ee * duration
    sigma = np.std(counts) / math.sqrt(ids.size)
    assert abs(np.mean(counts) - expected) < 3.0 * sigma + 0.05 * expected


def test_stream_times_sorted_and_reexcitation_present():
    # A strong long pulse must produce multi-photon periods.
    times = []
    multi = 0
    for seed in range(50):
        omega = 4.0 * EM.gamma1
        fld = DriveField.single(RectangularEnvelope(peak=omega, duration=200e-9,
                                                    center=100e-9))
        t = simulate_photon_stream(EM, fld, (0.0, 400e-9), seed=seed)
        assert np.all(np.diff(t) > 0)
        multi += t.size > 1
    assert multi > 25


def test_tcspc_exponential_histogram_chi2():
    det = DetectorModel(efficiency=1.0, dead_time=0.0, timing_jitter_sigma=0.0,
                        rep_period=300e-9, bin_width=1e-9)
    hist = simulate_tcspc(EM, ZERO_FIELD, det, n_pulses=100_000, seed=99,
                          initial=BlochState(1.0))
    edges = hist.bin_edges
    prob = np.exp(-edges[:-1] / T1) - np.exp(-edges[1:] / T1)
    expected = hist.n_pulses * prob
    keep = expected > 8
    chi2 = np.sum((hist.counts[keep] - expected[keep]) ** 2 / expected[keep])
    p = stats.chi2.sf(chi2, int(np.sum(keep)))
    assert p > 0.01


def test_tcspc_histogram_proportional_to_population():
    det = DetectorModel(efficiency=0.02, dead_time=70e-9,
                        timing_jitter_sigma=50e-12, rep_period=1.4e-6,
                        bin_width=2e-9)
    fld = fig2a_field()
    hist = simulate_tcspc(EM, fld, det, n_pulses=200_000, seed=42)
    traj = integrate(EM, fld, BlochState(0.0), (0.0, 200e-9), 0.05e-9)
    cum = np.concatenate(([0.0], np.cumsum(
        0.5 * (traj.rho_ee[1:] + traj.rho_ee[:-1]) * np.diff(traj.times))))
    rho_bin = np.diff(np.interp(hist.bin_edges, traj.times, cum))
    mask = hist.bin_centers < 150e-9
    corr = np.corrcoef(hist.counts[mask], rho_bin[mask])[0, 1]
    assert corr > 0.995


def test_tcspc_single_count_per_pulse_with_long_dead_time():
    # Dead time longer than the whole emission span (drive + many
    # lifetimes) but still far shorter than the repetition period, so it
    # cannot bleed into the next period.
    det = DetectorModel(efficiency=1.0, dead_time=500e-9,
                        timing_jitter_sigma=0.0, rep_period=1.4e-6,
                        bin_width=2e-9)
    omega = 4.0 * EM.gamma1
    fld = DriveField.single(RectangularEnvelope(peak=omega, duration=150e-9,
                                                center=75e-9))
    hist = simulate_tcspc(EM, fld, det, n_pulses=5000, seed=5)
    assert hist.total() <= hist.n_pulses
    # and detections equal pulses with >= 1 emission (efficiency 1)
    engine = _JumpEngine(EM, fld, 0.0, det.rep_period)
    pulses, _ = _emission_times_batch(engine, 5, np.arange(5000, dtype=np.int64))
    assert hist.total() == np.unique(pulses).size


def test_tcspc_monotone_in_efficiency():
    fld = fig2a_field()
    totals = []
    for eta in (0.01, 0.05, 0.2, 0.6, 1.0):
        det = DetectorModel(efficiency=eta, dead_time=70e-9,
                            timing_jitter_sigma=50e-12, rep_period=1.4e-6,
                            bin_width=2e-9)
        totals.append(simulate_tcspc(EM, fld, det, n_pulses=20_000,
                                     seed=11).total())
    assert all(a <= b for a, b in zip(totals, totals[1:]))


def test_tcspc_seed_determinism_and_thread_independence(monkeypatch):
    det = DetectorModel(efficiency=0.05, dead_time=70e-9,
                        timing_jitter_sigma=50e-12, rep_period=1.4e-6,
                        bin_width=1e-9)
    fld = fig2a_field()
    h1 = simulate_tcspc(EM, fld, det, n_pulses=150_000, seed=21)
    h2 = simulate_tcspc(EM, fld, det, n_pulses=150_000, seed=21)
    assert np.array_equal(h1.counts, h2.counts)
    monkeypatch.setenv("RABI_THREADS", "4")
    h3 = simulate_tcspc(EM, fld, det, n_pulses=150_000, seed=21)
    assert np.array_equal(h1.counts, h3.counts)
    h4 = simulate_tcspc(EM, fld, det, n_pulses=150_000, seed=22)
    assert not np.array_equal(h1.counts, h4.counts)


def test_tcspc_dead_time_carries_across_periods():
    # Excited start, eta = 1: every period emits once near t = 0; with a dead
    # time longer than the period every other detection is blocked.
    det = DetectorModel(efficiency=1.0, dead_time=150e-9,
                        timing_jitter_sigma=0.0, rep_period=100e-9,
                        bin_width=1e-9)
    hist = simulate_tcspc(EM, ZERO_FIELD, det, n_pulses=4000, seed=7,
                          initial=BlochState(1.0))
    frac = hist.total() / hist.n_pulses
    assert 0.35 < frac < 0.65
    det0 = DetectorModel(efficiency=1.0, dead_time=0.0,
                         timing_jitter_sigma=0.0, rep_period=100e-9,
                         bin_width=1e-9)
    hist0 = simulate_tcspc(EM, ZERO_FIELD, det0, n_pulses=4000, seed=7,
                           initial=BlochState(1.0))
    assert hist0.total() > hist.total()


def test_negative_jitter_clamped_into_first_bin():
    # Emission exactly at trigger with huge jitter: negative arrivals land in
    # bin 0, never vanish.
    em_fast = EmitterModel.from_lifetime(0.2e-9)
    det = DetectorModel(efficiency=1.0, dead_time=0.0,
                        timing_jitter_sigma=5e-9, rep_period=200e-9,
                        bin_width=1e-9)
    hist = simulate_tcspc(em_fast, ZERO_FIELD, det, n_pulses=3000, seed=13,
                          initial=BlochState(1.0))
    assert hist.total() == 3000
    assert hist.counts[0] > 0


def test_detector_validation():
    with pytest.raises(ValueError):
        DetectorModel(efficiency=0.0)
    with pytest.raises(ValueError):
        DetectorModel(efficiency=1.2)
    with pytest.raises(ValueError):
        DetectorModel(efficiency=0.5, dead_time=-1e-9)
    with pytest.raises(ValueError):
        DetectorModel(efficiency=0.5, bin_width=0.0)
    det = DetectorModel(efficiency=0.5)
    assert det.n_bins() == 2800


def test_tcspc_rejects_overlong_drive():
    fld = DriveField.single(GaussianEnvelope(peak=1e8, fwhm=600e-9,
                                             center=900e-9))
    det = DetectorModel(efficiency=0.5, rep_period=1.4e-6)
    with pytest.raises(ValueError):
        simulate_tcspc(EM, fld, det, n_pulses=10, seed=1)


def test_stream_requires_pure_initial_state():
    with pytest.raises(ValueError):
        simulate_photon_stream(EM, ZERO_FIELD, (0.0, 50e-9), seed=1,
                               initial=BlochState(0.5, 0.0j))


def test_dephasing_tail_preserves_exponential_emission():
    # Dephasing jumps flip the coherence only; drive-free emission times
    # stay exponential and each excited trajectory emits exactly once.
    em = EmitterModel(gamma1=1.0 / T1, gamma2=2.5 / T1)
    engine = _JumpEngine(em, ZERO_FIELD, 0.0, 3e-6)
    ids = np.arange(30_000, dtype=np.int64)
    pulses, times = _emission_times_batch(engine, 23, ids, BlochState(1.0))
    assert pulses.size == ids.size
    assert stats.kstest(times, "expon", args=(0.0, T1)).pvalue > 0.01


def test_jump_engine_with_pure_dephasing_matches_master_equation():
    # Extra dephasing channel: jump-averaged population still follows the
    # master equation.
    em = EmitterModel(gamma1=1.0 / T1, gamma2=1.2 / T1, detuning=0.0)
    omega = 3.0 * em.gamma1
    duration = 20 * T1
    fld = DriveField.single(RectangularEnvelope(peak=omega, duration=duration,
                                                center=0.5 * duration))
    engine = _JumpEngine(em, fld, 0.0, duration)
    ids = np.arange(6000, dtype=np.int64)
    pulses, times = _emission_times_batch(engine, 77, ids)
    counts = np.bincount(pulses, minlength=ids.size)
    traj = integrate(em, fld, BlochState(0.0), (0.0, duration), T1 / 50)
    expected = em.gamma1 * np.trapezoid(traj.rho_ee, traj.times)
    sigma = np.std(counts) / math.sqrt(ids.size)
    assert abs(np.mean(counts) - expected) < 4.0 * sigma + 0.03 * expected
