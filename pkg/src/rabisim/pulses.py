"""Excitation pulse envelopes, phase laws, and pulse-area calculus.

Envelope amplitudes are angular Rabi frequencies (rad/s): the transition
dipole moment and hbar are folded into the normalization, so every "field
strength" axis in this package is a Rabi-amplitude axis proportional to
the square root of optical power. Envelopes are non-negative; sign and
frequency content live in :class:`PhaseLaw`.

Gaussian widths are quoted as the FWHM of the *intensity* profile (the
usual convention for measured pulse durations), so the amplitude envelope
is ``exp(-2 ln2 (t-c)^2 / w^2)`` and a resonant Gaussian pulse has area
``peak * w * sqrt(pi / (2 ln2))``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Union

import numpy as np
from scipy.constants import c as SPEED_OF_LIGHT, h as PLANCK

from .errors import NonConvergedQuadrature, UnreachableArea

#: Fraction of peak below which an envelope is treated as switched off
#: for dynamics (where integration may start).
SUPPORT_CUTOFF = 1e-6

#: Much tighter cutoff for quadrature windows: the truncated Gaussian tail
#: mass is then ~1e-16 of the area, invisible at 1e-8 tolerances.
AREA_CUTOFF = 1e-14

#: Resonant area of a unit-peak Gaussian per unit intensity-FWHM.
GAUSSIAN_AREA_FACTOR = math.sqrt(math.pi / (2.0 * math.log(2.0)))


def _require_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return value


@dataclass(frozen=True)
class RectangularEnvelope:
    """Flat-top pulse: ``peak`` on [center - duration/2, center + duration/2]."""

    peak: float
    duration: float
    center: float = 0.0

    def __post_init__(self):
        if _require_finite("peak", self.peak) < 0:
            raise ValueError("peak amplitude must be >= 0")
        if _require_finite("duration", self.duration) <= 0:
            raise ValueError("duration must be > 0")
        _require_finite("center", self.center)

    def value(self, t):
        t = np.asarray(t, dtype=float)
        half = 0.5 * self.duration
        inside = np.abs(t - self.center) <= half
        return np.where(inside, self.peak, 0.0)

    def support(self, cutoff: float = SUPPORT_CUTOFF):
        if self.peak == 0.0:
            return None
        half = 0.5 * self.duration
        return (self.center - half, self.center + half)

    def breakpoints(self):
        half = 0.5 * self.duration
        return (self.center - half, self.center + half)

    def feature_time(self) -> float:
        return self.duration

    def peak_value(self) -> float:
        return self.peak

    def scaled(self, factor: float) -> "RectangularEnvelope":
        return replace(self, peak=self.peak * factor)


@dataclass(frozen=True)
class GaussianEnvelope:
    """Gaussian pulse whose *intensity* profile has the given FWHM."""

    peak: float
    fwhm: float
    center: float = 0.0

    def __post_init__(self):
        if _require_finite("peak", self.peak) < 0:
            raise ValueError("peak amplitude must be >= 0")
        if _require_finite("fwhm", self.fwhm) <= 0:
            raise ValueError("fwhm must be > 0")
        _require_finite("center", self.center)

    def value(self, t):
        t = np.asarray(t, dtype=float)
        x = (t - self.center) / self.fwhm
        return self.peak * np.exp(-2.0 * math.log(2.0) * x * x)

    def support(self, cutoff: float = SUPPORT_CUTOFF):
        if self.peak == 0.0:
            return None
        half = self.fwhm * math.sqrt(math.log(1.0 / cutoff) / (2.0 * math.log(2.0)))
        return (self.center - half, self.center + half)

    def breakpoints(self):
        return ()

    def feature_time(self) -> float:
        return self.fwhm

    def peak_value(self) -> float:
        return self.peak

    def scaled(self, factor: float) -> "GaussianEnvelope":
        return replace(self, peak=self.peak * factor)

    def resonant_area(self) -> float:
        """Closed-form area of this envelope at zero detuning."""
        return self.peak * self.fwhm * GAUSSIAN_AREA_FACTOR


class SampledEnvelope:
    """Measured envelope on a uniform time grid, linearly interpolated.

    Amplitudes are Rabi frequencies (rad/s); callers ingesting measured
    *intensity* data must take the element-wise square root first (see
    :func:`rabisim.cli_io.ingest_trace`). Evaluation outside the grid is 0.
    """

    def __init__(self, times, amplitudes):
        times = np.asarray(times, dtype=float)
        amplitudes = np.asarray(amplitudes, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("sampled envelope needs a 1-d grid with >= 2 points")
        if times.shape != amplitudes.shape:
            raise ValueError("time grid and amplitude samples must match in length")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(amplitudes))):
            raise ValueError("sampled envelope values must be finite")
        dt = np.diff(times)
        if np.any(dt <= 0):
            raise ValueError("time grid must be strictly increasing")
        mean_dt = float(np.mean(dt))
        if np.max(np.abs(dt - mean_dt)) > 1e-9 * mean_dt:
            raise ValueError("time grid must be uniform to 1 part in 1e9")
        if np.any(amplitudes < 0):
            raise ValueError("amplitudes must be >= 0")
        self.times = times
        self.amplitudes = amplitudes

    def __eq__(self, other):
        return (isinstance(other, SampledEnvelope)
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.amplitudes, other.amplitudes))

    def __hash__(self):
        return hash((self.times.tobytes(), self.amplitudes.tobytes()))

    def __repr__(self):
        return (f"SampledEnvelope(n={self.times.size}, "
                f"t=[{self.times[0]!r}, {self.times[-1]!r}], "
                f"max={float(np.max(self.amplitudes))!r})")

    def value(self, t):
        t = np.asarray(t, dtype=float)
        return np.interp(t, self.times, self.amplitudes, left=0.0, right=0.0)

    def support(self, cutoff: float = SUPPORT_CUTOFF):
        peak = float(np.max(self.amplitudes))
        if peak == 0.0:
            return None
        on = np.nonzero(self.amplitudes > cutoff * peak)[0]
        if on.size == 0:
            return None
        lo = max(0, on[0] - 1)
        hi = min(self.times.size - 1, on[-1] + 1)
        return (float(self.times[lo]), float(self.times[hi]))

    def breakpoints(self):
        return (float(self.times[0]), float(self.times[-1]))

    def feature_time(self) -> float:
        sup = self.support()
        if sup is None:
            return float(self.times[-1] - self.times[0])
        return max(sup[1] - sup[0], float(self.times[1] - self.times[0]))

    def peak_value(self) -> float:
        return float(np.max(self.amplitudes))

    def scaled(self, factor: float) -> "SampledEnvelope":
        return SampledEnvelope(self.times, self.amplitudes * factor)


Envelope = Union[RectangularEnvelope, GaussianEnvelope, SampledEnvelope]


@dataclass(frozen=True)
class PhaseLaw:
    """Time-linear phase: ``phi(t) = offset + chirp * t``.

    ``chirp`` is d(phi)/dt in rad/s, i.e. an angular-frequency shift of the
    component it decorates; it may have either sign.
    """

    offset: float = 0.0
    chirp: float = 0.0

    def __post_init__(self):
        _require_finite("offset", self.offset)
        _require_finite("chirp", self.chirp)

    def phase(self, t):
        t = np.asarray(t, dtype=float)
        return self.offset + self.chirp * t


@dataclass(frozen=True)
class FieldComponent:
    envelope: Envelope
    phase: PhaseLaw = PhaseLaw()


class DriveField:
    """Multi-component complex Rabi drive ``Omega(t) = sum_k env_k(t) e^{i phi_k(t)}``."""

    def __init__(self, components):
        components = tuple(
            c if isinstance(c, FieldComponent) else FieldComponent(*c)
            for c in components
        )
        if not components:
            raise ValueError("drive field needs at least one component")
        self.components = components

    @classmethod
    def single(cls, envelope: Envelope, phase: PhaseLaw = PhaseLaw()) -> "DriveField":
        return cls([FieldComponent(envelope, phase)])

    def __eq__(self, other):
        return isinstance(other, DriveField) and self.components == other.components

    def __repr__(self):
        return f"DriveField({list(self.components)!r})"

    def rabi(self, t):
        """Complex Rabi frequency at time(s) ``t`` (rad/s)."""
        t = np.asarray(t, dtype=float)
        total = np.zeros(t.shape, dtype=complex)
        for comp in self.components:
            amp = comp.envelope.value(t)
            ph = comp.phase
            if ph.offset == 0.0 and ph.chirp == 0.0:
                total = total + amp
            else:
                total = total + amp * np.exp(1j * ph.phase(t))
        return total if total.shape else complex(total)

    def support(self, cutoff: float = SUPPORT_CUTOFF):
        """Hull of the component supports, or None for an all-zero field."""
        spans = [c.envelope.support(cutoff) for c in self.components]
        spans = [s for s in spans if s is not None]
        if not spans:
            return None
        return (min(s[0] for s in spans), max(s[1] for s in spans))

    def breakpoints(self):
        pts = []
        for comp in self.components:
            pts.extend(comp.envelope.breakpoints())
        return tuple(sorted(set(pts)))

    def max_amplitude(self) -> float:
        """Upper bound on |Omega(t)| (sum of component peaks)."""
        return float(sum(c.envelope.peak_value() for c in self.components))

    def min_feature_time(self) -> float:
        return min(c.envelope.feature_time() for c in self.components)

    def max_abs_chirp(self) -> float:
        return max(abs(c.phase.chirp) for c in self.components)

    def scaled(self, factor: float) -> "DriveField":
        return DriveField(
            [FieldComponent(c.envelope.scaled(factor), c.phase) for c in self.components]
        )

    def content_hash(self) -> str:
        """Short stable digest of the field definition (for metadata)."""
        h = hashlib.sha256()
        for comp in self.components:
            h.update(repr(comp.envelope).encode())
            h.update(repr(comp.phase).encode())
        return h.hexdigest()[:12]


def eval_rabi(field: DriveField, t) -> complex:
    """Complex Rabi frequency of ``field`` at time ``t`` (rad/s)."""
    return field.rabi(t)


def _adaptive_simpson(f, a, fa, m, fm, b, fb, whole, eps, depth, max_depth):
    lm = 0.5 * (a + m)
    rm = 0.5 * (m + b)
    flm = f(lm)
    frm = f(rm)
    left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
    right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
    refined = left + right
    err = refined - whole
    if abs(err) <= 15.0 * eps:
        return refined + err / 15.0
    if depth >= max_depth:
        raise NonConvergedQuadrature(
            f"adaptive Simpson did not converge on [{a!r}, {b!r}] at depth {depth}"
        )
    half_eps = 0.5 * eps
    return (_adaptive_simpson(f, a, fa, lm, flm, m, fm, left, half_eps, depth + 1, max_depth)
            + _adaptive_simpson(f, m, fm, rm, frm, b, fb, right, half_eps, depth + 1, max_depth))


def _integrate_segment(f, a, b, rel_tol, abs_floor, max_depth):
    # Endpoint values are one-sided limits (nudged inward): segments are
    # split at envelope breakpoints, so any jump discontinuity sits exactly
    # on a segment boundary and must not leak its far-side value in.
    nudge = 1e-9 * (b - a)
    m = 0.5 * (a + b)
    fa, fm, fb = f(a + nudge), f(m), f(b - nudge)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    # Probe a few interior points so an all-zero Simpson estimate of a truly
    # zero integrand returns immediately instead of recursing.
    if whole == 0.0:
        probes = a + (b - a) * np.linspace(1e-9, 1.0 - 1e-9, 17)
        if all(f(p) == 0.0 for p in probes):
            return 0.0
    eps = max(rel_tol * abs(whole), abs_floor)
    return _adaptive_simpson(f, a, fa, m, fm, b, fb, whole, eps, 0, max_depth)


def pulse_area(field: DriveField, detuning: float = 0.0, window=None,
               rel_tol: float = 1e-8, max_depth: int = 40) -> float:
    """Bloch-vector nutation angle ``integral sqrt(detuning^2 + |Omega|^2) dt``.

    The window defaults to the envelope support hull; a window must be given
    explicitly for an all-zero field with nonzero detuning. Chirp enters only
    through |Omega| (unit-modulus phase factors), so single-component areas
    are chirp-independent while multi-component areas see the interference
    of the components.
    """
    if window is None:
        window = field.support(AREA_CUTOFF)
        if window is None:
            return 0.0
    t0, t1 = float(window[0]), float(window[1])
    if not t0 < t1:
        raise ValueError("window must satisfy t0 < t1")
    det2 = float(detuning) ** 2

    def integrand(t):
        return math.sqrt(det2 + abs(field.rabi(t)) ** 2)

    cuts = [t0] + [b for b in field.breakpoints() if t0 < b < t1] + [t1]
    # Absolute floor so near-zero tail segments cannot stall the recursion.
    coarse = sum(
        (b - a) / 6.0 * (integrand(a) + 4.0 * integrand(0.5 * (a + b)) + integrand(b))
        for a, b in zip(cuts[:-1], cuts[1:])
    )
    abs_floor = rel_tol * max(abs(coarse), 1e-300) * 1e-3
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        total += _integrate_segment(integrand, a, b, rel_tol, abs_floor, max_depth)
    return total


def scale_to_area(field: DriveField, target: float, detuning: float = 0.0,
                  window=None, rel_tol: float = 1e-6) -> DriveField:
    """Rescale all envelope peaks by a common factor so the area hits ``target``.

    The area is monotone in the scale factor for any detuning (the integrand
    ``sqrt(detuning^2 + s^2 |Omega|^2)`` increases with s), so a bisection on
    s converges unconditionally once the target exceeds the detuning floor
    ``|detuning| * (t1 - t0)``.
    """
    if target <= 0:
        raise ValueError("target area must be > 0")
    if field.max_amplitude() == 0.0:
        raise ValueError("field has zero amplitude at unit scale")
    if window is None:
        window = field.support(AREA_CUTOFF)
    t0, t1 = float(window[0]), float(window[1])
    floor = abs(detuning) * (t1 - t0)
    if target < floor * (1.0 - 1e-12):
        raise UnreachableArea(
            f"target area {target:g} below detuning floor {floor:g} of the window"
        )

    quad_tol = min(1e-8, rel_tol * 1e-2)

    def area_at(s):
        return pulse_area(field.scaled(s), detuning, (t0, t1), rel_tol=quad_tol)

    base = area_at(1.0)
    if base <= floor:
        raise ValueError("field has no area above the detuning floor at unit scale")

    # Bracket the root: areas grow without bound in s.
    s_hi = max(target / max(base - floor, 1e-300), 1.0)
    while area_at(s_hi) < target:
        s_hi *= 2.0
        if s_hi > 1e18:
            raise UnreachableArea("could not bracket the requested area")
    s_lo = 0.0
    s_mid = 0.5 * s_hi
    for _ in range(200):
        s_mid = 0.5 * (s_lo + s_hi)
        a_mid = area_at(s_mid)
        if abs(a_mid - target) <= rel_tol * target:
            break
        if a_mid < target:
            s_lo = s_mid
        else:
            s_hi = s_mid
    else:
        raise NonConvergedQuadrature("area bisection failed to reach tolerance")
    return field.scaled(s_mid)


def photons_per_pulse(avg_power: float, rep_rate: float, wavelength: float) -> float:
    """Mean photon number per repetition period at the given average power.

    ``avg_power / (rep_rate * h c / wavelength)``; all arguments must be > 0.
    The wavelength is an explicit input (one photon energy per use case),
    e.g. 589e-9 m for the dye transitions this package targets by default.
    """
    if avg_power <= 0 or rep_rate <= 0 or wavelength <= 0:
        raise ValueError("avg_power, rep_rate, and wavelength must all be > 0")
    photon_energy = PLANCK * SPEED_OF_LIGHT / wavelength
    return avg_power / (rep_rate * photon_energy)
