"""Damped least-squares engine and the excited-state trace fit.

The optimizer is a bounded Levenberg-style damped Gauss-Newton: forward
finite-difference Jacobian, multiplicative damping adaptation (x10 on
rejection, /10 on acceptance), steps projected onto the bound box, and
monotone cost by construction. Four-parameter desk-scale fits do not
justify sensitivity ODEs; finite differences are accurate enough and are
sanity-checked against central differences in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .bloch import EmitterModel, population_series_fixed
from .detection import first_detected_density
from .errors import DegenerateTail, FitDiverged, SingularJacobian
from .pulses import DriveField, SampledEnvelope, pulse_area

_FD_STEP = 1e-7
_DAMP_MAX = 1e14


@dataclass(frozen=True, eq=False)
class FitProblem:
    """Bounded nonlinear least-squares problem.

    ``residual_fn(params)`` returns the residual vector (model minus data,
    already weighted); the cost is the sum of squared residuals.
    """

    names: Sequence[str]
    x0: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    residual_fn: Callable[[np.ndarray], np.ndarray]
    max_iter: int = 200
    step_tol: float = 1e-8
    cost_tol: float = 1e-10

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float)
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if not (x0.shape == lo.shape == hi.shape):
            raise ValueError("x0, lower, upper must have matching shapes")
        if np.any(lo > hi):
            raise ValueError("bounds must satisfy lower <= upper")
        if np.any(x0 < lo) or np.any(x0 > hi):
            raise ValueError("x0 must lie inside the bounds")
        if not np.any(lo < hi):
            raise ValueError("at least one parameter must be free")


@dataclass(frozen=True, eq=False)
class FitResult:
    params: np.ndarray
    names: tuple
    cost: float
    covariance: np.ndarray
    status: str
    n_iter: int

    def __post_init__(self):
        if self.cost < 0:
            raise ValueError("cost must be >= 0")

    def param(self, name: str) -> float:
        return float(self.params[self.names.index(name)])

    def stderr(self, name: str) -> float:
        i = self.names.index(name)
        return float(math.sqrt(max(self.covariance[i, i], 0.0)))


def _jacobian(residual_fn, p, r0, lower, upper):
    n = p.size
    jac = np.empty((r0.size, n))
    for j in range(n):
        h = max(_FD_STEP, _FD_STEP * abs(p[j]))
        if lower[j] == upper[j]:
            jac[:, j] = 0.0
            continue
        if p[j] + h > upper[j]:
            h = -h
        pj = p.copy()
        pj[j] += h
        jac[:, j] = (np.asarray(residual_fn(pj), dtype=float) - r0) / h
    return jac


def least_squares(problem: FitProblem) -> FitResult:
    """Minimize the sum of squared residuals inside the bound box."""
    p = problem.x0.astype(float).copy()
    r = np.asarray(problem.residual_fn(p), dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("residual function returned non-finite values at x0")
    cost = float(r @ r)
    lam = 1e-10
    status = ""
    it = 0
    for it in range(1, problem.max_iter + 1):
        jac = _jacobian(problem.residual_fn, p, r, problem.lower, problem.upper)
        if not np.all(np.isfinite(jac)):
            raise SingularJacobian("Jacobian contains non-finite entries")
        jtj = jac.T @ jac
        g = jac.T @ r
        diag = np.diag(jtj).copy()
        diag[diag <= 0] = np.max(diag) if np.max(diag) > 0 else 1.0
        accepted = False
        while lam <= _DAMP_MAX:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            candidate = np.clip(p + step, problem.lower, problem.upper)
            actual = candidate - p
            r_new = np.asarray(problem.residual_fn(candidate), dtype=float)
            cost_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                rel_step = float(np.linalg.norm(actual)
                                 / (np.linalg.norm(p) + 1.0))
                rel_drop = (cost - cost_new) / max(cost, 1e-300)
                p, r, cost = candidate, r_new, cost_new
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                if rel_step < problem.step_tol:
                    status = "converged-step"
                elif rel_drop < problem.cost_tol:
                    status = "converged-cost"
                break
            lam *= 10.0
        if not accepted:
            # Damping drove the step to nothing without finding descent:
            # either we are at a (possibly boundary) optimum, or the
            # Jacobian is unusable.
            probe = np.linalg.norm(np.clip(p - g / (lam * diag + 1e-300),
                                           problem.lower, problem.upper) - p)
            if probe / (np.linalg.norm(p) + 1.0) < problem.step_tol or cost == 0.0:
                status = "converged-step"
            else:
                raise SingularJacobian(
                    "damping reached its cap without regularizing a descent step")
        if status:
            break
    if not status:
        raise FitDiverged(f"no convergence within {problem.max_iter} iterations")

    jac = _jacobian(problem.residual_fn, p, r, problem.lower, problem.upper)
    jtj = jac.T @ jac
    try:
        cov = np.linalg.inv(jtj)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(jtj)
    cov = 0.5 * (cov + cov.T)
    return FitResult(params=p, names=tuple(problem.names), cost=cost,
                     covariance=cov, status=status, n_iter=it)


# ---------------------------------------------------------------------------
# Trace fit: recover the drive scale (hence peak Rabi frequency and pulse
# area) from a fluorescence decay histogram plus the measured pulse shape.
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TraceFit:
    result: FitResult
    omega_max: float
    area: float
    model: np.ndarray


def _forward_series(pulse_envelope: SampledEnvelope, emitter: EmitterModel,
                    s: float, data_span: float, model: str, efficiency: float):
    """Model series for the trace fit: (times, values, end value, end time)."""
    support = pulse_envelope.support()
    t_hi = support[1] + min(data_span, 8.0 / emitter.gamma1)
    rate = s * pulse_envelope.peak_value() + abs(emitter.detuning) + emitter.gamma1
    n_steps = max(2000, int(math.ceil((t_hi - support[0]) * rate / 0.06)))
    fld = DriveField.single(pulse_envelope.scaled(s))
    tt, rho = population_series_fixed(fld, emitter, (support[0], t_hi), n_steps)
    if model == "first_detected":
        vals = first_detected_density(tt, emitter.gamma1 * rho, efficiency)
    else:
        vals = rho
    return tt, vals, float(vals[-1]), float(tt[-1])


def _tail_decay(emitter: EmitterModel, model: str, efficiency: float) -> float:
    if model == "population":
        return emitter.gamma1
    return emitter.gamma1 * (1.0 + efficiency)


def _interp_series(shifted_times, series, decay: float):
    tt, vals, v_end, t_end = series
    out = np.interp(shifted_times, tt, vals, left=0.0, right=0.0)
    beyond = shifted_times > t_end
    if np.any(beyond):
        out[beyond] = v_end * np.exp(-decay * (shifted_times[beyond] - t_end))
    return out


def trace_model(eval_times, pulse_envelope: SampledEnvelope,
                emitter: EmitterModel, s: float, t0: float, background: float,
                norm: float, data_span: float | None = None,
                model: str = "population", efficiency: float = 0.02):
    """Forward model of :func:`fit_trace` at explicit parameter values.

    The same series construction and interpolation the fit uses, so
    synthetic data generated here is exactly in-family for the fit.
    """
    eval_times = np.asarray(eval_times, dtype=float)
    if data_span is None:
        data_span = float(eval_times[-1] - eval_times[0])
    series = _forward_series(pulse_envelope, emitter, s, data_span, model,
                             efficiency)
    decay = _tail_decay(emitter, model, efficiency)
    return norm * _interp_series(eval_times - t0, series, decay) + background


def _count_oscillation_maxima(times, values, support):
    """Local maxima of a lightly smoothed trace inside the pulse window."""
    v = np.asarray(values, dtype=float)
    if v.size >= 7:
        kernel = np.ones(5) / 5.0
        v = np.convolve(v, kernel, mode="same")
    inside = (times >= support[0]) & (times <= support[1])
    idx = np.nonzero(inside)[0]
    if idx.size < 3:
        return 1
    lo, hi = idx[0], idx[-1]
    seg = v[lo:hi + 1]
    prominence = 0.02 * (np.max(seg) - np.min(seg))
    count = 0
    for i in range(1, seg.size - 1):
        if seg[i] >= seg[i - 1] and seg[i] > seg[i + 1]:
            left = np.min(seg[max(0, i - 10):i + 1])
            if seg[i] - left > prominence:
                count += 1
    return max(count, 1)


def fit_trace(times, counts, pulse_envelope: SampledEnvelope,
              emitter: EmitterModel, model: str = "population",
              efficiency: float = 0.02, t0_init: float | None = None,
              max_iter: int = 200) -> TraceFit:
    """Fit a decay histogram with Bloch dynamics driven by a measured pulse.

    Free parameters: amplitude scale ``s`` (mapping the stored envelope to
    rad/s, hence to the peak Rabi frequency), trigger offset ``t0``,
    constant background ``b``, and overall normalization ``c``. Residuals
    are Poisson-weighted with sigma = sqrt(max(n, 1)). ``model`` selects
    the plain excited population (valid while detection efficiency is
    low) or the first-detected-photon density for high-efficiency data.

    Reports the peak Rabi frequency ``s * max(envelope)`` and the resonant
    pulse area of the scaled envelope. Scaling the stored envelope samples
    by k while scaling the fitted s by 1/k leaves both unchanged.
    """
    times = np.asarray(times, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if times.size != counts.size or times.size < 8:
        raise ValueError("need matching time/count arrays with >= 8 points")
    if model not in ("population", "first_detected"):
        raise ValueError("model must be 'population' or 'first_detected'")
    support = pulse_envelope.support()
    if support is None:
        raise ValueError("pulse envelope is identically zero")
    tail = times[-1] - support[1]
    if tail < 3.0 / emitter.gamma1:
        raise DegenerateTail(
            "data must extend at least three lifetimes past the pulse")

    sigma = np.sqrt(np.maximum(counts, 1.0))
    pad = times[-1] - times[0]

    traj_cache: dict[float, tuple] = {}

    def trajectory_for(s: float):
        key = float(s)
        if key not in traj_cache:
            if len(traj_cache) > 64:
                traj_cache.clear()
            traj_cache[key] = _forward_series(pulse_envelope, emitter, key,
                                              pad, model, efficiency)
        return traj_cache[key]

    decay = _tail_decay(emitter, model, efficiency)

    def model_values(s, t0):
        return _interp_series(times - t0, trajectory_for(s), decay)

    def residual_fn(params):
        s, t0, b, c = params
        return (c * model_values(s, t0) + b - counts) / sigma

    # Initialization: background from the quiet percentile, amplitude-scale
    # candidates from the observed fringe count (one fringe per 2 pi of
    # area), and per-candidate trigger alignment by a coarse scan of t0
    # with the normalization solved linearly. This defeats the
    # period-aliasing and misalignment local minima of the oscillatory
    # model before the damped iteration starts.
    b_init = float(np.percentile(counts, 5))
    unit_area = pulse_area(DriveField.single(pulse_envelope))
    rough_t0 = t0_init if t0_init is not None else 0.0
    n_max = _count_oscillation_maxima(times, counts,
                                      (support[0] + rough_t0, support[1] + rough_t0))
    lo_area = max(2 * n_max - 1.5, 0.5)
    candidates = [a for a in np.arange(lo_area, 2 * n_max + 1.75, 0.25)]
    if t0_init is not None:
        t0_grid = np.array([t0_init])
    else:
        span_lo = times[0] - support[1]
        span_hi = times[-1] - 3.0 / emitter.gamma1 - support[1]
        t0_grid = np.linspace(span_lo, max(span_hi, span_lo + 1e-12), 241)
    best = None
    for n_half in candidates:
        s_try = n_half * math.pi / unit_area
        for t0_try in t0_grid:
            m = model_values(s_try, t0_try)
            denom = float(m @ m)
            if denom <= 0:
                continue
            c_try = max(float(m @ (counts - b_init)) / denom, 1e-12)
            x0 = np.array([s_try, t0_try, b_init, c_try])
            r = residual_fn(x0)
            cost = float(r @ r)
            if best is None or cost < best[0]:
                best = (cost, x0)
    if best is None:
        raise FitDiverged("no usable initialization found for the trace fit")
    x0 = best[1]

    # The optimizer's finite-difference step rule assumes O(1) parameters,
    # so the problem is posed in scaled units (s in units of its init, t0
    # in units of the data span, background and norm in count units).
    span = times[-1] - times[0]
    scales = np.array([x0[0], span, max(abs(x0[2]), 1.0), x0[3]])
    shifts = np.array([0.0, x0[1], 0.0, 0.0])

    def unscale(u):
        return shifts + scales * u

    def residual_scaled(u):
        return residual_fn(unscale(u))

    u0 = (x0 - shifts) / scales
    problem = FitProblem(
        names=("scale", "t0", "background", "norm"),
        x0=u0,
        lower=np.array([1.0 / 20.0, -0.5, -np.inf, 1e-12]),
        upper=np.array([20.0, 0.5, np.inf, np.inf]),
        residual_fn=residual_scaled, max_iter=max_iter)
    result_u = least_squares(problem)
    params = unscale(result_u.params)
    cov = result_u.covariance * np.outer(scales, scales)
    result = FitResult(params=params, names=result_u.names, cost=result_u.cost,
                       covariance=cov, status=result_u.status,
                       n_iter=result_u.n_iter)
    s_fit = result.param("scale")
    scaled = pulse_envelope.scaled(s_fit)
    omega_max = s_fit * pulse_envelope.peak_value()
    area = pulse_area(DriveField.single(scaled))
    fitted = (result.param("norm")
              * model_values(s_fit, result.param("t0"))
              + result.param("background"))
    return TraceFit(result=result, omega_max=omega_max, area=area, model=fitted)
