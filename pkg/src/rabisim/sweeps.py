"""2-D fluorescence maps over detuning and drive strength.

The excitation field is the sum of two concentric Gaussians: a weak, long
pedestal (slow-modulator leakage) and a short main pulse carrying a
time-linear phase. A linear phase d(phi)/dt = +chirp shifts the main
component's resonance to laser detunings near +chirp, so the map loses
its detuning symmetry in the chirp direction while the pedestal keeps a
narrow feature at zero detuning whose strength grows roughly linearly
with field strength until saturation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bloch import (EmitterModel, batch_step_count, emitted_photons_per_period,
                    integrate_population_batch)
from .errors import OutOfRange
from .parallel import map_indexed
from .pulses import (DriveField, FieldComponent, GaussianEnvelope, PhaseLaw,
                     SUPPORT_CUTOFF)

_LN2x2 = 2.0 * math.log(2.0)


@dataclass(frozen=True)
class ThirdComponent:
    """Optional extra leakage component (e.g. zeroth-order deflection).

    Disabled by default; when enabled it is a concentric Gaussian with its
    own intensity ratio and a constant angular-frequency offset.
    """

    fwhm: float = 50e-9
    ratio_db: float = -30.0
    frequency_offset: float = 2.0 * math.pi * 300e6


@dataclass(frozen=True)
class CompositeFieldTemplate:
    """Concentric pedestal + chirped main pulse, amplitudes set per point.

    ``ratio_db`` is the pedestal:main *intensity* ratio in dB (<= 0); the
    amplitude ratio is 10^(ratio_db/20). ``chirp`` is the main component's
    d(phi)/dt in rad/s; its positive default places the main spectral
    feature at positive (blue) detuning.
    """

    pedestal_fwhm: float = 50e-9
    main_fwhm: float = 4e-9
    ratio_db: float = -34.0
    chirp: float = 2.0 * math.pi * 70e6
    center: float = 0.0
    phase_offset: float = 0.0
    pedestal_enabled: bool = True
    main_enabled: bool = True
    third: ThirdComponent | None = None

    def __post_init__(self):
        if self.ratio_db > 0:
            raise ValueError("ratio_db must be <= 0 (pedestal weaker than main)")
        if self.pedestal_fwhm <= 0 or self.main_fwhm <= 0:
            raise ValueError("widths must be > 0")
        if not (self.pedestal_enabled or self.main_enabled):
            raise ValueError("template needs at least one enabled component")

    @property
    def pedestal_amplitude_ratio(self) -> float:
        return 10.0 ** (self.ratio_db / 20.0)


@dataclass(frozen=True, eq=False)
class SweepResult:
    """Signal matrix (amplitude rows x detuning columns), arbitrary units."""

    detunings: np.ndarray
    amplitudes: np.ndarray
    signal: np.ndarray

    def __post_init__(self):
        if self.signal.shape != (self.amplitudes.size, self.detunings.size):
            raise ValueError("signal must be (n_amplitudes, n_detunings)")
        if not np.all(np.isfinite(self.signal)):
            raise ValueError("signal must be finite")
        if np.any(self.signal < 0):
            raise ValueError("signal must be >= 0")


def build_composite(template: CompositeFieldTemplate, scale: float) -> DriveField:
    """Drive field at a given main-component peak amplitude (rad/s)."""
    if scale < 0:
        raise ValueError("scale must be >= 0")
    comps = []
    if template.main_enabled:
        comps.append(FieldComponent(
            GaussianEnvelope(peak=scale, fwhm=template.main_fwhm,
                             center=template.center),
            PhaseLaw(offset=template.phase_offset, chirp=template.chirp)))
    if template.pedestal_enabled:
        comps.append(FieldComponent(
            GaussianEnvelope(peak=scale * template.pedestal_amplitude_ratio,
                             fwhm=template.pedestal_fwhm,
                             center=template.center),
            PhaseLaw()))
    if template.third is not None:
        third_ratio = 10.0 ** (template.third.ratio_db / 20.0)
        comps.append(FieldComponent(
            GaussianEnvelope(peak=scale * third_ratio,
                             fwhm=template.third.fwhm, center=template.center),
            PhaseLaw(chirp=template.third.frequency_offset)))
    return DriveField(comps)


def _window(template: CompositeFieldTemplate) -> tuple[float, float]:
    widths = []
    if template.main_enabled:
        widths.append(template.main_fwhm)
    if template.pedestal_enabled:
        widths.append(template.pedestal_fwhm)
    if template.third is not None:
        widths.append(template.third.fwhm)
    half = max(widths) * math.sqrt(math.log(1.0 / SUPPORT_CUTOFF) / _LN2x2)
    return template.center - half, template.center + half


def sweep_2d(emitter: EmitterModel, template: CompositeFieldTemplate,
             detunings, amplitudes, rep_period: float = 1.4e-6,
             threads: int | None = None) -> SweepResult:
    """Emitted-photon integral per period over a detuning x amplitude grid.

    Each grid point integrates the Bloch dynamics over the pulse window
    (which spans the pedestal) and adds the exact free-decay emission over
    the rest of the repetition period. Grid points are independent; rows
    may be evaluated in parallel without affecting the result.
    """
    detunings = np.asarray(detunings, dtype=float)
    amplitudes = np.asarray(amplitudes, dtype=float)
    if detunings.size == 0 or amplitudes.size == 0:
        raise ValueError("axes must be non-empty")
    if detunings.size > 1 and np.any(np.diff(detunings) <= 0):
        raise ValueError("detuning axis must be strictly increasing")
    if amplitudes.size > 1 and np.any(np.diff(amplitudes) <= 0):
        raise ValueError("amplitude axis must be strictly increasing")

    t0, t1 = _window(template)
    a_max = float(np.max(np.abs(amplitudes)))
    rate = (math.hypot(float(np.max(np.abs(detunings))),
                       a_max * (1.0 + template.pedestal_amplitude_ratio))
            + abs(template.chirp) + emitter.gamma1)
    n_steps = batch_step_count(t1 - t0, rate)
    ped_ratio = template.pedestal_amplitude_ratio
    center = template.center
    main_w2 = template.main_fwhm ** 2
    ped_w2 = template.pedestal_fwhm ** 2
    chirp = template.chirp
    phase0 = template.phase_offset
    third = template.third
    if third is not None:
        third_ratio = 10.0 ** (third.ratio_db / 20.0)
        third_w2 = third.fwhm ** 2

    def run_rows(rows: np.ndarray):
        amp_col = amplitudes[rows][:, None]

        def omega(t):
            x2 = (t - center) ** 2
            out = np.zeros((rows.size, 1), dtype=complex)
            if template.main_enabled:
                out = out + (amp_col * math.exp(-_LN2x2 * x2 / main_w2)
                             * complex(np.exp(1j * (phase0 + chirp * t))))
            if template.pedestal_enabled:
                out = out + amp_col * ped_ratio * math.exp(-_LN2x2 * x2 / ped_w2)
            if third is not None:
                out = out + (amp_col * third_ratio
                             * math.exp(-_LN2x2 * x2 / third_w2)
                             * complex(np.exp(1j * third.frequency_offset * t)))
            return out

        rho_end, _, integral, _ = integrate_population_batch(
            omega, detunings[None, :], emitter.gamma1, emitter.gamma2,
            (t0, t1), n_steps)
        return emitted_photons_per_period(rho_end, integral, emitter.gamma1,
                                          rep_period - (t1 - t0))

    if threads is None:
        from .parallel import worker_count

        threads = worker_count()
    chunks = np.array_split(np.arange(amplitudes.size), max(1, min(threads, amplitudes.size)))
    chunks = [c for c in chunks if c.size]
    parts = map_indexed(run_rows, chunks, threads)
    signal = np.vstack(parts)
    floor = -1e-12 * max(float(np.max(signal)), 1.0)
    if np.any(signal < floor):
        raise ValueError("sweep produced significantly negative signal")
    signal = np.maximum(signal, 0.0)
    return SweepResult(detunings=detunings, amplitudes=amplitudes, signal=signal)


def cross_section(result: SweepResult, amplitude: float):
    """Nearest-amplitude row of the map: (detunings, signal_row, row_amplitude).

    No interpolation; ties between neighboring rows resolve to the lower
    amplitude. Raises OutOfRange outside the amplitude axis.
    """
    amps = result.amplitudes
    lo, hi = float(amps[0]), float(amps[-1])
    margin = 1e-9 * max(abs(lo), abs(hi), 1.0)
    if amplitude < lo - margin or amplitude > hi + margin:
        raise OutOfRange(f"amplitude {amplitude:g} outside [{lo:g}, {hi:g}]")
    idx = int(np.argmin(np.abs(amps - amplitude)))
    return result.detunings, result.signal[idx], float(amps[idx])
