import math

import numpy as np
import pytest

from rabisim.errors import NonConvergedQuadrature, UnreachableArea
from rabisim.pulses import (DriveField, FieldComponent, GaussianEnvelope,
                            GAUSSIAN_AREA_FACTOR, PhaseLaw,
                            RectangularEnvelope, SampledEnvelope, eval_rabi,
                            photons_per_pulse, pulse_area, scale_to_area)

TWO_PI = 2.0 * math.pi


def rect_pi_field(center=2e-9):
    return DriveField.single(
        RectangularEnvelope(peak=TWO_PI * 125e6, duration=4e-9, center=center))


def test_eval_rabi_rectangular_inside_and_outside():
    f = rect_pi_field()
    assert eval_rabi(f, 1e-9) == pytest.approx(TWO_PI * 125e6)
    assert eval_rabi(f, 1e-9).imag == 0.0
    assert eval_rabi(f, 10e-9) == 0.0


def test_eval_rabi_gaussian_peak_at_center():
    env = GaussianEnvelope(peak=3.3e8, fwhm=2e-9, center=5e-9)
    assert eval_rabi(DriveField.single(env), 5e-9) == pytest.approx(3.3e8)


def test_eval_rabi_sampled_outside_grid_is_zero():
    env = SampledEnvelope(np.linspace(0, 1e-9, 11), np.full(11, 1e8))
    f = DriveField.single(env)
    assert eval_rabi(f, -1e-10) == 0.0
    assert eval_rabi(f, 2e-9) == 0.0


def test_eval_rabi_sums_components_with_phases():
    env = RectangularEnvelope(peak=1e8, duration=1e-9, center=0.0)
    f = DriveField([
        FieldComponent(env, PhaseLaw(offset=0.0)),
        FieldComponent(env, PhaseLaw(offset=math.pi / 2)),
    ])
    val = eval_rabi(f, 0.0)
    assert val == pytest.approx(1e8 + 1e8 * 1j)


def test_pulse_area_rectangular_pi():
    assert pulse_area(rect_pi_field()) == pytest.approx(math.pi, rel=1e-8)


def test_pulse_area_detuning_only():
    f = DriveField.single(GaussianEnvelope(peak=0.0, fwhm=1e-9))
    area = pulse_area(f, detuning=TWO_PI * 125e6, window=(0.0, 4e-9))
    assert area == pytest.approx(math.pi, rel=1e-12)


def test_pulse_area_gaussian_vs_trapezoid_oracle():
    # Independent oracle: brute-force trapezoid of the envelope at 1e5 points.
    peak, fwhm = 9.4e8, 3.1e-9
    env = GaussianEnvelope(peak=peak, fwhm=fwhm, center=0.0)
    t = np.linspace(-12 * fwhm, 12 * fwhm, 100_001)
    oracle = np.trapezoid(env.value(t), t)
    area = pulse_area(DriveField.single(env))
    assert area == pytest.approx(oracle, rel=1e-6)
    assert area == pytest.approx(peak * fwhm * GAUSSIAN_AREA_FACTOR, rel=1e-7)


def test_pulse_area_raises_when_depth_exhausted():
    f = DriveField.single(GaussianEnvelope(peak=1e9, fwhm=1e-9))
    with pytest.raises(NonConvergedQuadrature):
        pulse_area(f, max_depth=1)


def test_scale_to_area_rectangular_inversion():
    f = DriveField.single(RectangularEnvelope(peak=1.0, duration=4e-9, center=0.0))
    scaled = scale_to_area(f, math.pi)
    assert scaled.components[0].envelope.peak == pytest.approx(TWO_PI * 125e6,
                                                               rel=1e-6)


def test_scale_to_area_fixed_point():
    f = DriveField.single(GaussianEnvelope(peak=7e8, fwhm=2.5e-9))
    target = pulse_area(f)
    scaled = scale_to_area(f, target)
    assert scaled.components[0].envelope.peak == pytest.approx(7e8, rel=1e-6)


def test_scale_to_area_gaussian_closed_form_inversion():
    fwhm = 4e-9
    target = 5.7 * math.pi
    f = DriveField.single(GaussianEnvelope(peak=1.0, fwhm=fwhm))
    scaled = scale_to_area(f, target)
    expected_peak = target / (fwhm * GAUSSIAN_AREA_FACTOR)
    assert scaled.components[0].envelope.peak == pytest.approx(expected_peak,
                                                               rel=1e-6)


def test_scale_to_area_unreachable_below_detuning_floor():
    f = DriveField.single(RectangularEnvelope(peak=1e8, duration=4e-9, center=0.0))
    det = TWO_PI * 250e6
    floor = det * 4e-9
    with pytest.raises(UnreachableArea):
        scale_to_area(f, 0.5 * floor, detuning=det, window=(-2e-9, 2e-9))


def test_photons_per_pulse_500_photon_identity():
    # 500 photons/pulse at 700 kHz and 589 nm requires 1.1804e-10 W.
    n = photons_per_pulse(1.180401e-10, 700e3, 589e-9)
    assert n == pytest.approx(500.0, rel=1e-4)


def test_photons_per_pulse_scalings():
    base = photons_per_pulse(1e-10, 700e3, 589e-9)
    assert photons_per_pulse(2e-10, 700e3, 589e-9) == pytest.approx(2 * base)
    assert photons_per_pulse(1e-10, 1400e3, 589e-9) == pytest.approx(base / 2)
    with pytest.raises(ValueError):
        photons_per_pulse(0.0, 700e3, 589e-9)


def random_field(rng):
    kind = rng.integers(3)
    peak = float(rng.uniform(1e7, 3e9))
    center = float(rng.uniform(-2e-9, 2e-9))
    if kind == 0:
        env = RectangularEnvelope(peak=peak, duration=float(rng.uniform(0.5e-9, 6e-9)),
                                  center=center)
    elif kind == 1:
        env = GaussianEnvelope(peak=peak, fwhm=float(rng.uniform(0.5e-9, 6e-9)),
                               center=center)
    else:
        t = np.linspace(-3e-9, 3e-9, 301)
        env = SampledEnvelope(t, peak * rng.random(301))
    phase = PhaseLaw(offset=float(rng.uniform(-3, 3)),
                     chirp=float(rng.uniform(-5e8, 5e8)))
    return DriveField.single(env, phase)


def test_area_homogeneous_in_amplitude():
    rng = np.random.default_rng(1)
    for _ in range(8):
        f = random_field(rng)
        s = float(rng.uniform(0.1, 5.0))
        a1 = pulse_area(f, window=(-12e-9, 12e-9))
        a2 = pulse_area(f.scaled(s), window=(-12e-9, 12e-9))
        assert a2 == pytest.approx(s * a1, rel=1e-8)


def test_area_lower_bounds():
    rng = np.random.default_rng(2)
    for _ in range(8):
        f = random_field(rng)
        det = float(rng.uniform(-3e9, 3e9))
        w = (-10e-9, 10e-9)
        a = pulse_area(f, detuning=det, window=w)
        assert a >= pulse_area(f, window=w) * (1 - 1e-9)
        assert a >= abs(det) * (w[1] - w[0]) * (1 - 1e-9)


def test_single_component_no_phase_is_real_nonnegative():
    rng = np.random.default_rng(3)
    env = GaussianEnvelope(peak=2e9, fwhm=3e-9)
    f = DriveField.single(env)
    t = rng.uniform(-10e-9, 10e-9, 200)
    vals = f.rabi(t)
    assert np.all(vals.imag == 0)
    assert np.all(vals.real >= 0)


def test_sampled_roundtrip_interpolation_order():
    # Halving the sample spacing should quarter the max interpolation error.
    env = GaussianEnvelope(peak=1e9, fwhm=4e-9)
    probe = np.linspace(-8e-9, 8e-9, 4001)
    errs = []
    for n in (201, 401):
        grid = np.linspace(-10e-9, 10e-9, n)
        samp = SampledEnvelope(grid, env.value(grid))
        errs.append(np.max(np.abs(samp.value(probe) - env.value(probe))))
    ratio = errs[0] / errs[1]
    assert 3.0 < ratio < 5.5


def test_envelope_validation_errors():
    with pytest.raises(ValueError):
        RectangularEnvelope(peak=-1.0, duration=1e-9)
    with pytest.raises(ValueError):
        GaussianEnvelope(peak=1.0, fwhm=0.0)
    with pytest.raises(ValueError):
        SampledEnvelope(np.array([0.0, 1.0, 1.5]), np.array([0.0, 1.0, 0.0]))
    with pytest.raises(ValueError):
        SampledEnvelope(np.array([0.0, 1.0]), np.array([0.0, -1.0]))
    with pytest.raises(ValueError):
        SampledEnvelope(np.array([0.0]), np.array([1.0]))
    with pytest.raises(ValueError):
        DriveField([])
    with pytest.raises(ValueError):
        PhaseLaw(offset=math.inf)


def test_drive_field_hash_stable_and_sensitive():
    f1 = rect_pi_field()
    f2 = rect_pi_field()
    f3 = rect_pi_field(center=3e-9)
    assert f1.content_hash() == f2.content_hash()
    assert f1.content_hash() != f3.content_hash()
