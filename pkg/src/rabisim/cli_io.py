"""Config parsing, data ingestion, result serialization, and the CLI.

Config files are line-oriented ``section.key = value`` text: '#' starts a
comment, blank lines are ignored, unknown keys are rejected. Times are
given in ns and frequencies in MHz (converted to SI at this boundary
only). Every command writes its outputs as '#'-headed CSV with 9
significant digits plus a JSON run manifest that echoes the fully
resolved config, so any run can be reproduced bit-identically from its
manifest.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bloch import BlochState, EmitterModel, integrate
from .detection import (DetectorModel, TcspcHistogram, emission_rate,
                        first_detected_density, simulate_tcspc)
from .errors import (DegenerateTail, FitDiverged, InvariantBreach,
                     NonConvergedQuadrature, NonMonotonicTime, OutOfRange,
                     ParseError, RabisimError, SingularJacobian, StepFailure,
                     UnreachableArea, ValidationError)
from .fitting import fit_trace
from .jitter import (JitterModel, PowerScan, PowerScanTemplate,
                     averaged_power_scan, fit_power_scan)
from .pulses import (DriveField, FieldComponent, GaussianEnvelope, PhaseLaw,
                     RectangularEnvelope, SampledEnvelope, photons_per_pulse,
                     pulse_area, scale_to_area)
from .sweeps import (CompositeFieldTemplate, SweepResult, ThirdComponent,
                     cross_section, sweep_2d)

MHZ = 2.0 * math.pi * 1e6
NS = 1e-9

FLOAT_FMT = "%.9g"


def _fmt(x: float) -> str:
    return FLOAT_FMT % float(x)


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmitterConfig:
    t1_ns: float | None = 9.5
    gamma1_mhz: float | None = None
    gamma2_mhz: float | None = None
    detuning_mhz: float = 0.0


@dataclass(frozen=True)
class FieldComponentConfig:
    kind: str = "gaussian"
    peak_mhz: float = 125.0
    area_pi: float | None = None
    fwhm_ns: float = 4.0
    duration_ns: float = 4.0
    center_ns: float = 0.0
    phase_rad: float = 0.0
    chirp_mhz: float = 0.0
    file: str = ""
    file_mode: str = "intensity"


@dataclass(frozen=True)
class DetectorConfig:
    efficiency: float = 0.02
    dead_time_ns: float = 70.0
    jitter_ps: float = 50.0
    rep_period_us: float = 1.4
    bin_width_ns: float = 0.5


@dataclass(frozen=True)
class TraceConfig:
    t_start_ns: float = 0.0
    t_end_ns: float | None = None
    dt_out_ns: float = 0.02
    n_pulses: int = 0


@dataclass(frozen=True)
class PowerScanConfig:
    amp_min_mhz: float = 0.0
    amp_max_mhz: float = 1000.0
    points: int = 201
    samples: int = 500
    base_fwhm_ns: float = 4.0


@dataclass(frozen=True)
class JitterConfig:
    sigma_t_rel: float = 0.07
    edge_ps: float = 200.0


@dataclass(frozen=True)
class SweepConfig:
    det_min_mhz: float = -600.0
    det_max_mhz: float = 600.0
    det_points: int = 121
    amp_min_mhz: float = 10.0
    amp_max_mhz: float = 400.0
    amp_points: int = 40


@dataclass(frozen=True)
class TemplateConfig:
    pedestal_fwhm_ns: float = 50.0
    main_fwhm_ns: float = 4.0
    ratio_db: float = -34.0
    chirp_mhz: float = 70.0
    center_ns: float = 0.0
    pedestal_enabled: bool = True
    main_enabled: bool = True
    third_enabled: bool = False
    third_offset_mhz: float = 300.0
    third_ratio_db: float = -30.0
    third_fwhm_ns: float = 50.0


@dataclass(frozen=True)
class FitConfig:
    model: str = "population"
    max_iter: int = 200
    step_tol: float = 1e-8
    cost_tol: float = 1e-10


@dataclass(frozen=True)
class ExperimentConfig:
    emitter: EmitterConfig = EmitterConfig()
    field: tuple = (FieldComponentConfig(),)
    detector: DetectorConfig = DetectorConfig()
    trace: TraceConfig = TraceConfig()
    powerscan: PowerScanConfig = PowerScanConfig()
    jitter: JitterConfig = JitterConfig()
    sweep: SweepConfig = SweepConfig()
    template: TemplateConfig = TemplateConfig()
    fit: FitConfig = FitConfig()
    seed: int = 12345
    output_dir: str = "."
    crosssection_amp_mhz: float = 100.0


_SECTION_TYPES = {
    "emitter": (EmitterConfig, "emitter"),
    "detector": (DetectorConfig, "detector"),
    "trace": (TraceConfig, "trace"),
    "powerscan": (PowerScanConfig, "powerscan"),
    "jitter": (JitterConfig, "jitter"),
    "sweep": (SweepConfig, "sweep"),
    "template": (TemplateConfig, "template"),
    "fit": (FitConfig, "fit"),
}

_SCALAR_KEYS = {
    "rng.seed": ("seed", int),
    "output.dir": ("output_dir", str),
    "crosssection.amplitude_MHz": ("crosssection_amp_mhz", float),
}

# Key spellings in files are CamelCase-ish where units appear; map the
# config-file suffix to the dataclass field.
_KEY_SPELLINGS = {
    "t1_ns": "T1_ns", "gamma1_mhz": "Gamma1_MHz", "gamma2_mhz": "Gamma2_MHz",
    "detuning_mhz": "detuning_MHz", "peak_mhz": "peak_MHz",
    "chirp_mhz": "chirp_MHz", "amp_min_mhz": "amp_min_MHz",
    "amp_max_mhz": "amp_max_MHz", "det_min_mhz": "det_min_MHz",
    "det_max_mhz": "det_max_MHz", "ratio_db": "ratio_dB",
    "third_ratio_db": "third_ratio_dB", "third_offset_mhz": "third_offset_MHz",
}
_SPELLING_TO_FIELD = {v: k for k, v in _KEY_SPELLINGS.items()}


def _file_key(field_name: str) -> str:
    return _KEY_SPELLINGS.get(field_name, field_name)


def _field_name(file_key: str) -> str:
    return _SPELLING_TO_FIELD.get(file_key, file_key)


def _parse_value(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ValidationError(f"key '{key}': cannot parse {raw!r} as {typ.__name__}") from exc


def _optional_float(key: str, raw: str):
    if raw.strip().lower() in ("none", ""):
        return None
    return _parse_value(key, raw, float)


def parse_config(text: str):
    """Parse config text; returns (ExperimentConfig, provenance lines).

    Defaults fill any unset key and each applied default is echoed in the
    provenance list. Unknown keys raise ValidationError; malformed lines
    raise ParseError with the line number.
    """
    explicit: dict[str, str] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", line=lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ParseError("empty key or value", line=lineno)
        if key in explicit:
            raise ParseError(f"duplicate key '{key}'", line=lineno)
        explicit[key] = value

    sections: dict[str, dict] = {name: {} for name in _SECTION_TYPES}
    scalars: dict[str, object] = {}
    field_entries: dict[int, dict] = {}
    field_count = 1

    known_field_fields = {f.name: f for f in fields(FieldComponentConfig)}

    for key, raw in explicit.items():
        if key == "field.count":
            field_count = _parse_value(key, raw, int)
            if field_count < 1:
                raise ValidationError("field.count must be >= 1")
            continue
        if key in _SCALAR_KEYS:
            attr, typ = _SCALAR_KEYS[key]
            scalars[attr] = _parse_value(key, raw, typ)
            continue
        parts = key.split(".")
        if parts[0] == "field" and len(parts) == 3:
            try:
                idx = int(parts[1])
            except ValueError:
                raise ValidationError(f"unknown key '{key}'") from None
            fname = _field_name(parts[2])
            if fname not in known_field_fields:
                raise ValidationError(f"unknown key '{key}'")
            f = known_field_fields[fname]
            if fname == "area_pi":
                val = _optional_float(key, raw)
            else:
                val = _parse_value(key, raw, f.type if isinstance(f.type, type)
                                   else {"str": str, "float": float, "int": int,
                                         "bool": bool}.get(str(f.type), float))
            field_entries.setdefault(idx, {})[fname] = val
            continue
        if len(parts) == 2 and parts[0] in _SECTION_TYPES:
            cls, attr = _SECTION_TYPES[parts[0]]
            fmap = {f.name: f for f in fields(cls)}
            fname = _field_name(parts[1])
            if fname not in fmap:
                raise ValidationError(f"unknown key '{key}'")
            f = fmap[fname]
            if cls is EmitterConfig and fname in ("t1_ns", "gamma1_mhz",
                                                  "gamma2_mhz"):
                val = _optional_float(key, raw)
            elif cls is TraceConfig and fname == "t_end_ns":
                val = _optional_float(key, raw)
            else:
                typ = f.type if isinstance(f.type, type) else {
                    "str": str, "float": float, "int": int, "bool": bool,
                }.get(str(f.type).replace(" | None", ""), float)
                val = _parse_value(key, raw, typ)
            sections[parts[0]][fname] = val
            continue
        raise ValidationError(f"unknown key '{key}'")

    if field_entries:
        field_count = max(field_count, max(field_entries))
    for idx in field_entries:
        if not 1 <= idx <= field_count:
            raise ValidationError(f"field index {idx} outside 1..{field_count}")

    emitter_kwargs = sections["emitter"]
    if ("t1_ns" in emitter_kwargs and emitter_kwargs["t1_ns"] is not None
            and emitter_kwargs.get("gamma1_mhz") is not None):
        raise ValidationError("give exactly one of emitter.T1_ns / emitter.Gamma1_MHz")
    if emitter_kwargs.get("gamma1_mhz") is not None and "t1_ns" not in emitter_kwargs:
        emitter_kwargs["t1_ns"] = None

    cfg = ExperimentConfig(
        emitter=EmitterConfig(**emitter_kwargs),
        field=tuple(FieldComponentConfig(**field_entries.get(i, {}))
                    for i in range(1, field_count + 1)),
        detector=DetectorConfig(**sections["detector"]),
        trace=TraceConfig(**sections["trace"]),
        powerscan=PowerScanConfig(**sections["powerscan"]),
        jitter=JitterConfig(**sections["jitter"]),
        sweep=SweepConfig(**sections["sweep"]),
        template=TemplateConfig(**sections["template"]),
        fit=FitConfig(**sections["fit"]),
        **scalars,
    )
    _validate_config(cfg)

    provenance = []
    serialized = dict(_config_items(cfg))
    for key, value in serialized.items():
        if key not in explicit and key != "field.count":
            provenance.append(f"{key} = {value} (default)")
    return cfg, provenance


def _validate_config(cfg: ExperimentConfig):
    e = cfg.emitter
    if (e.t1_ns is None) == (e.gamma1_mhz is None):
        raise ValidationError("give exactly one of emitter.T1_ns / emitter.Gamma1_MHz")
    for name, val in (("emitter.T1_ns", e.t1_ns), ("emitter.Gamma1_MHz", e.gamma1_mhz),
                      ("emitter.Gamma2_MHz", e.gamma2_mhz)):
        if val is not None and val <= 0:
            raise ValidationError(f"{name} must be > 0")
    d = cfg.detector
    if not 0 < d.efficiency <= 1:
        raise ValidationError("detector.efficiency must be in (0, 1]")
    for name, val in (("detector.dead_time_ns", d.dead_time_ns),
                      ("detector.jitter_ps", d.jitter_ps)):
        if val < 0:
            raise ValidationError(f"{name} must be >= 0")
    for name, val in (("detector.rep_period_us", d.rep_period_us),
                      ("detector.bin_width_ns", d.bin_width_ns),
                      ("trace.dt_out_ns", cfg.trace.dt_out_ns)):
        if val <= 0:
            raise ValidationError(f"{name} must be > 0")
    if cfg.trace.n_pulses < 0:
        raise ValidationError("trace.n_pulses must be >= 0")
    for comp in cfg.field:
        if comp.kind not in ("gaussian", "rectangular", "sampled"):
            raise ValidationError(f"unknown field kind '{comp.kind}'")
        if comp.kind == "sampled" and not comp.file:
            raise ValidationError("sampled field components need a file")
        if comp.file_mode not in ("intensity", "amplitude"):
            raise ValidationError("field file_mode must be intensity or amplitude")
        if comp.peak_mhz < 0:
            raise ValidationError("field peak_MHz must be >= 0")
    if not 0 <= cfg.jitter.sigma_t_rel < 0.5:
        raise ValidationError("jitter.sigma_t_rel must be in [0, 0.5)")
    if cfg.powerscan.points < 2 or cfg.powerscan.samples < 1:
        raise ValidationError("powerscan needs >= 2 points and >= 1 sample")
    if cfg.sweep.det_points < 2 or cfg.sweep.amp_points < 1:
        raise ValidationError("sweep needs >= 2 detuning points and >= 1 amplitude")
    if cfg.template.ratio_db > 0 or cfg.template.third_ratio_db > 0:
        raise ValidationError("template dB ratios must be <= 0")
    if cfg.fit.model not in ("population", "first_detected"):
        raise ValidationError("fit.model must be population or first_detected")
    if cfg.seed < 0:
        raise ValidationError("rng.seed must be >= 0")


def _config_items(cfg: ExperimentConfig):
    """All keys of a config in file spelling, serialized values, sorted."""
    items = []

    def emit(section: str, obj):
        for f in fields(obj):
            val = getattr(obj, f.name)
            if val == "":
                continue  # empty strings (unset paths) are omitted
            if val is None:
                sval = "none"
            elif isinstance(val, bool):
                sval = "true" if val else "false"
            elif isinstance(val, float):
                sval = _fmt(val)
            else:
                sval = str(val)
            items.append((f"{section}.{_file_key(f.name)}", sval))

    emit("emitter", cfg.emitter)
    items.append(("field.count", str(len(cfg.field))))
    for i, comp in enumerate(cfg.field, start=1):
        emit(f"field.{i}", comp)
    emit("detector", cfg.detector)
    emit("trace", cfg.trace)
    emit("powerscan", cfg.powerscan)
    emit("jitter", cfg.jitter)
    emit("sweep", cfg.sweep)
    emit("template", cfg.template)
    emit("fit", cfg.fit)
    items.append(("rng.seed", str(cfg.seed)))
    items.append(("output.dir", cfg.output_dir))
    items.append(("crosssection.amplitude_MHz", _fmt(cfg.crosssection_amp_mhz)))
    return sorted(items)


def serialize_config(cfg: ExperimentConfig) -> str:
    return "\n".join(f"{k} = {v}" for k, v in _config_items(cfg)) + "\n"


# ---------------------------------------------------------------------------
# Domain object builders (SI conversion happens here)
# ---------------------------------------------------------------------------

def build_emitter(cfg: ExperimentConfig) -> EmitterModel:
    e = cfg.emitter
    if e.t1_ns is not None:
        g1 = 1.0 / (e.t1_ns * NS)
    else:
        g1 = e.gamma1_mhz * MHZ
    g2 = e.gamma2_mhz * MHZ if e.gamma2_mhz is not None else None
    return EmitterModel(gamma1=g1, gamma2=g2, detuning=e.detuning_mhz * MHZ)


def build_envelope(comp: FieldComponentConfig, base_dir: Path | None = None):
    if comp.kind == "gaussian":
        return GaussianEnvelope(peak=comp.peak_mhz * MHZ,
                                fwhm=comp.fwhm_ns * NS,
                                center=comp.center_ns * NS)
    if comp.kind == "rectangular":
        return RectangularEnvelope(peak=comp.peak_mhz * MHZ,
                                   duration=comp.duration_ns * NS,
                                   center=comp.center_ns * NS)
    path = Path(comp.file)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    record = ingest_trace(path.read_text(), mode=comp.file_mode)
    amps = record.values
    peak = float(np.max(amps))
    if peak <= 0:
        raise ValidationError(f"sampled envelope {comp.file} is identically zero")
    return SampledEnvelope(record.times_ns * NS,
                           amps / peak * comp.peak_mhz * MHZ)


def build_drive_field(cfg: ExperimentConfig, base_dir: Path | None = None) -> DriveField:
    comps = []
    for comp in cfg.field:
        env = build_envelope(comp, base_dir)
        phase = PhaseLaw(offset=comp.phase_rad, chirp=comp.chirp_mhz * MHZ)
        fc = FieldComponent(env, phase)
        if comp.area_pi is not None:
            single = scale_to_area(DriveField.single(env, phase),
                                   comp.area_pi * math.pi)
            fc = single.components[0]
        comps.append(fc)
    return DriveField(comps)


def build_detector(cfg: ExperimentConfig) -> DetectorModel:
    d = cfg.detector
    return DetectorModel(efficiency=d.efficiency, dead_time=d.dead_time_ns * NS,
                         timing_jitter_sigma=d.jitter_ps * 1e-12,
                         rep_period=d.rep_period_us * 1e-6,
                         bin_width=d.bin_width_ns * NS)


def build_template(cfg: ExperimentConfig) -> CompositeFieldTemplate:
    t = cfg.template
    third = None
    if t.third_enabled:
        third = ThirdComponent(fwhm=t.third_fwhm_ns * NS,
                               ratio_db=t.third_ratio_db,
                               frequency_offset=t.third_offset_mhz * MHZ)
    return CompositeFieldTemplate(
        pedestal_fwhm=t.pedestal_fwhm_ns * NS, main_fwhm=t.main_fwhm_ns * NS,
        ratio_db=t.ratio_db, chirp=t.chirp_mhz * MHZ, center=t.center_ns * NS,
        pedestal_enabled=t.pedestal_enabled, main_enabled=t.main_enabled,
        third=third)


# ---------------------------------------------------------------------------
# Trace records
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TraceRecord:
    """Two-column series (time in ns, value) with '#key=value' metadata."""

    times_ns: np.ndarray
    values: np.ndarray
    metadata: dict

    def __post_init__(self):
        if self.times_ns.size != self.values.size:
            raise ValueError("times and values must have equal length")


def ingest_trace(text_or_path, mode: str = "counts") -> TraceRecord:
    """Parse a two-column trace; mode='intensity' takes sqrt of the values.

    Header lines start with '#' and may carry key=value metadata. Time must
    be strictly increasing; values must be finite (and non-negative for
    intensity mode).
    """
    if isinstance(text_or_path, Path):
        text = text_or_path.read_text()
    else:
        text = str(text_or_path)
        if "\n" not in text and text.endswith((".csv", ".txt", ".dat")):
            text = Path(text).read_text()
    meta: dict[str, str] = {}
    t_list: list[float] = []
    v_list: list[float] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if "=" in body:
                k, _, v = body.partition("=")
                meta[k.strip()] = v.strip()
            continue
        parts = line.replace(",", " ").split()
        if len(parts) < 2:
            raise ParseError("expected two numeric columns", line=lineno)
        try:
            t_list.append(float(parts[0]))
            v_list.append(float(parts[1]))
        except ValueError:
            raise ParseError(f"non-numeric data {line!r}", line=lineno) from None
    if len(t_list) < 2:
        raise ParseError("trace needs at least two rows")
    t = np.asarray(t_list)
    v = np.asarray(v_list)
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
        raise ParseError("trace contains non-finite values")
    if np.any(np.diff(t) <= 0):
        raise NonMonotonicTime("trace time column must be strictly increasing")
    if mode == "intensity":
        if np.any(v < 0):
            raise ValidationError("intensity values must be >= 0")
        v = np.sqrt(v)
    elif mode != "counts" and mode != "amplitude":
        raise ValidationError("mode must be counts, amplitude, or intensity")
    return TraceRecord(times_ns=t, values=v, metadata=meta)


# ---------------------------------------------------------------------------
# Output writers
# ---------------------------------------------------------------------------

def _write_csv(path: Path, header_lines, columns, names):
    lines = [f"# {h}" for h in header_lines]
    lines.append("# " + ",".join(names))
    for row in zip(*columns):
        lines.append(",".join(_fmt(x) for x in row))
    path.write_text("\n".join(lines) + "\n")


def write_manifest(path: Path, command: str, cfg_text: str, seed: int,
                   outputs: list[str], wall_time: float, extra: dict | None = None):
    doc = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": cfg_text,
        "outputs": outputs,
        "wall_time_s": wall_time,
    }
    if extra:
        doc["extra"] = extra
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_histogram_csv(path: Path, hist: TcspcHistogram, header_lines):
    lines = [f"# {h}" for h in header_lines]
    lines.append(f"# n_pulses={hist.n_pulses}")
    lines.append("# bin_start_ns,bin_end_ns,counts")
    e = hist.bin_edges / NS
    for i, c in enumerate(hist.counts):
        lines.append(f"{_fmt(e[i])},{_fmt(e[i + 1])},{int(c)}")
    path.write_text("\n".join(lines) + "\n")


def write_sweep_csv(path: Path, result: SweepResult, header_lines):
    lines = [f"# {h}" for h in header_lines]
    lines.append("# detuning_MHz," + ",".join(_fmt(d / MHZ)
                                              for d in result.detunings))
    lines.append("# amplitude_MHz rows follow, one per line: amplitude, signal...")
    for i, a in enumerate(result.amplitudes):
        row = ",".join(_fmt(x) for x in result.signal[i])
        lines.append(f"{_fmt(a / MHZ)},{row}")
    path.write_text("\n".join(lines) + "\n")


def write_sweep_long(path: Path, result: SweepResult, header_lines):
    lines = [f"# {h}" for h in header_lines]
    lines.append("# detuning_MHz,amplitude_MHz,signal")
    for i, a in enumerate(result.amplitudes):
        for j, d in enumerate(result.detunings):
            lines.append(f"{_fmt(d / MHZ)},{_fmt(a / MHZ)},{_fmt(result.signal[i, j])}")
    path.write_text("\n".join(lines) + "\n")


def read_sweep_long(path: Path) -> SweepResult:
    det, amp, sig = [], [], []
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        d, a, s = (float(x) for x in line.split(","))
        det.append(d)
        amp.append(a)
        sig.append(s)
    det = np.asarray(det) * MHZ
    amp = np.asarray(amp) * MHZ
    sig = np.asarray(sig)
    dets = np.unique(det)
    amps = np.unique(amp)
    matrix = np.full((amps.size, dets.size), np.nan)
    di = np.searchsorted(dets, det)
    ai = np.searchsorted(amps, amp)
    matrix[ai, di] = sig
    if np.any(np.isnan(matrix)):
        raise ParseError("long-format sweep file does not cover a full grid")
    return SweepResult(detunings=dets, amplitudes=amps, signal=matrix)


def write_report(path_txt: Path, path_json: Path, payload: dict, header_lines):
    lines = [f"# {h}" for h in header_lines]
    for k, v in payload.items():
        lines.append(f"{k} = {_fmt(v) if isinstance(v, float) else v}")
    path_txt.write_text("\n".join(lines) + "\n")
    path_json.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _load_config(args) -> tuple[ExperimentConfig, list[str], str]:
    if getattr(args, "config", None):
        text = Path(args.config).read_text()
    else:
        text = ""
    cfg, provenance = parse_config(text)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg, provenance, serialize_config(cfg)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_trace(args) -> int:
    t_start = time.monotonic()
    cfg, _, cfg_text = _load_config(args)
    base_dir = Path(args.config).parent if args.config else None
    emitter = build_emitter(cfg)
    field = build_drive_field(cfg, base_dir)
    support = field.support()
    t0 = cfg.trace.t_start_ns * NS
    if cfg.trace.t_end_ns is not None:
        t1 = cfg.trace.t_end_ns * NS
    else:
        t1 = (support[1] if support else t0) + 6.0 / emitter.gamma1
    traj = integrate(emitter, field, BlochState(0.0), (t0, t1),
                     cfg.trace.dt_out_ns * NS)
    times, rates = emission_rate(traj, emitter)
    out = _out_dir(cfg)
    header = [f"rabisim trace v{__version__}", f"field_hash={traj.field_hash}",
              f"detuning_MHz={_fmt(emitter.detuning / MHZ)}"]
    trace_path = out / "trace.csv"
    _write_csv(trace_path, header,
               (times / NS, traj.rho_ee, rates),
               ("t_ns", "rho_ee", "emission_rate_per_s"))
    outputs = [str(trace_path)]
    if cfg.trace.n_pulses > 0:
        detector = build_detector(cfg)
        hist = simulate_tcspc(emitter, field, detector, cfg.trace.n_pulses,
                              cfg.seed)
        hist_path = out / "histogram.csv"
        write_histogram_csv(hist_path, hist, header + [f"seed={cfg.seed}"])
        outputs.append(str(hist_path))
        density = first_detected_density(times, rates, detector.efficiency)
        dens_path = out / "first_detected.csv"
        _write_csv(dens_path, header, (times / NS, density),
                   ("t_ns", "first_detected_density_per_s"))
        outputs.append(str(dens_path))
    write_manifest(out / "trace_manifest.json", "trace", cfg_text, cfg.seed,
                   outputs, time.monotonic() - t_start)
    print(f"trace: wrote {', '.join(outputs)}")
    return 0


def cmd_power_scan(args) -> int:
    t_start = time.monotonic()
    cfg, _, cfg_text = _load_config(args)
    emitter = build_emitter(cfg)
    ps = cfg.powerscan
    amps = np.linspace(ps.amp_min_mhz, ps.amp_max_mhz, ps.points) * MHZ
    if amps[0] == 0.0:
        amps = amps[1:]
    template = PowerScanTemplate(main_fwhm=ps.base_fwhm_ns * NS)
    jm = JitterModel(sigma_t_rel=cfg.jitter.sigma_t_rel,
                     edge_sigma=cfg.jitter.edge_ps * 1e-12)
    scan = averaged_power_scan(emitter, template, amps, jm, ps.samples,
                               cfg.seed,
                               rep_period=cfg.detector.rep_period_us * 1e-6)
    out = _out_dir(cfg)
    path = out / "power_scan.csv"
    header = [f"rabisim power-scan v{__version__}", f"seed={cfg.seed}",
              f"sigma_T_rel={_fmt(jm.sigma_t_rel)}",
              f"samples={ps.samples}"]
    _write_csv(path, header,
               (scan.amplitudes / MHZ, scan.signal, scan.stderr, scan.area_std),
               ("amplitude_MHz", "signal", "stderr", "area_std_rad"))
    write_manifest(out / "power_scan_manifest.json", "power-scan", cfg_text,
                   cfg.seed, [str(path)], time.monotonic() - t_start)
    print(f"power-scan: wrote {path}")
    return 0


def cmd_sweep2d(args) -> int:
    t_start = time.monotonic()
    cfg, _, cfg_text = _load_config(args)
    emitter = build_emitter(cfg)
    template = build_template(cfg)
    sw = cfg.sweep
    dets = np.linspace(sw.det_min_mhz, sw.det_max_mhz, sw.det_points) * MHZ
    amps = np.linspace(sw.amp_min_mhz, sw.amp_max_mhz, sw.amp_points) * MHZ
    result = sweep_2d(emitter, template, dets, amps,
                      rep_period=cfg.detector.rep_period_us * 1e-6)
    out = _out_dir(cfg)
    header = [f"rabisim sweep2d v{__version__}",
              f"ratio_dB={_fmt(template.ratio_db)}",
              f"chirp_MHz={_fmt(template.chirp / MHZ)}"]
    matrix_path = out / "sweep.csv"
    long_path = out / "sweep_long.csv"
    write_sweep_csv(matrix_path, result, header)
    write_sweep_long(long_path, result, header)
    write_manifest(out / "sweep_manifest.json", "sweep2d", cfg_text, cfg.seed,
                   [str(matrix_path), str(long_path)],
                   time.monotonic() - t_start)
    print(f"sweep2d: wrote {matrix_path}, {long_path}")
    return 0


def cmd_cross_section(args) -> int:
    t_start = time.monotonic()
    cfg, _, cfg_text = _load_config(args)
    amp = (args.amplitude_mhz if args.amplitude_mhz is not None
           else cfg.crosssection_amp_mhz) * MHZ
    result = read_sweep_long(Path(args.source))
    dets, row, actual = cross_section(result, amp)
    out = _out_dir(cfg)
    path = out / "cross_section.csv"
    header = [f"rabisim cross-section v{__version__}",
              f"requested_amplitude_MHz={_fmt(amp / MHZ)}",
              f"row_amplitude_MHz={_fmt(actual / MHZ)}"]
    _write_csv(path, header, (dets / MHZ, row), ("detuning_MHz", "signal"))
    write_manifest(out / "cross_section_manifest.json", "cross-section",
                   cfg_text, cfg.seed, [str(path)], time.monotonic() - t_start)
    print(f"cross-section: wrote {path} (row at {actual / MHZ:.6g} MHz)")
    return 0


def cmd_fit_trace(args) -> int:
    t_start = time.monotonic()
    cfg, _, cfg_text = _load_config(args)
    emitter = build_emitter(cfg)
    data = ingest_trace(Path(args.data).read_text())
    pulse = ingest_trace(Path(args.pulse).read_text(), mode=args.pulse_mode)
    peak = float(np.max(pulse.values))
    if peak <= 0:
        raise ValidationError("pulse file is identically zero")
    envelope = SampledEnvelope(pulse.times_ns * NS, pulse.values / peak)
    fit = fit_trace(data.times_ns * NS, data.values, envelope, emitter,
                    model=cfg.fit.model, efficiency=cfg.detector.efficiency,
                    max_iter=cfg.fit.max_iter)
    out = _out_dir(cfg)
    payload = {
        "omega_max_rad_s": fit.omega_max,
        "omega_max_over_2pi_MHz": fit.omega_max / MHZ,
        "pulse_area_rad": fit.area,
        "pulse_area_over_pi": fit.area / math.pi,
        "scale": fit.result.param("scale"),
        "t0_ns": fit.result.param("t0") / NS,
        "background": fit.result.param("background"),
        "norm": fit.result.param("norm"),
        "cost": fit.result.cost,
        "status": fit.result.status,
        "n_iter": fit.result.n_iter,
    }
    write_report(out / "fit_trace.txt", out / "fit_trace.json", payload,
                 [f"rabisim fit-trace v{__version__}"])
    write_manifest(out / "fit_trace_manifest.json", "fit-trace", cfg_text,
                   cfg.seed, [str(out / "fit_trace.txt"),
                              str(out / "fit_trace.json")],
                   time.monotonic() - t_start)
    print(f"fit-trace: Omega_max/2pi = {fit.omega_max / MHZ:.4g} MHz, "
          f"area = {fit.area / math.pi:.4g} pi")
    return 0


def cmd_fit_power_scan(args) -> int:
    t_start = time.monotonic()
    cfg, _, cfg_text = _load_config(args)
    rows = np.loadtxt(args.data, delimiter=",", comments="#", ndmin=2)
    if rows.shape[1] < 2:
        raise ParseError("power-scan file needs amplitude and signal columns")
    scan = PowerScan(
        amplitudes=rows[:, 0] * MHZ, signal=rows[:, 1],
        stderr=rows[:, 2] if rows.shape[1] > 2 else np.zeros(rows.shape[0]),
        area_std=rows[:, 3] if rows.shape[1] > 3 else np.zeros(rows.shape[0]))
    fit = fit_power_scan(scan, max_iter=cfg.fit.max_iter)
    out = _out_dir(cfg)
    payload = {
        "period_MHz": fit.period / MHZ,
        "pi_pulse_amplitude_MHz": fit.pi_pulse_amplitude / MHZ,
        "modulation_offset": fit.modulation_offset,
        "modulation_slope_per_MHz": fit.modulation_slope * MHZ,
        "background_offset": fit.background_offset,
        "background_slope_per_MHz": fit.background_slope * MHZ,
        "phase_rad": fit.phase,
        "cost": fit.result.cost,
        "status": fit.result.status,
    }
    write_report(out / "fit_power_scan.txt", out / "fit_power_scan.json",
                 payload, [f"rabisim fit-power-scan v{__version__}"])
    write_manifest(out / "fit_power_scan_manifest.json", "fit-power-scan",
                   cfg_text, cfg.seed,
                   [str(out / "fit_power_scan.txt")],
                   time.monotonic() - t_start)
    print(f"fit-power-scan: period = {fit.period / MHZ:.5g} MHz, "
          f"pi-pulse at {fit.pi_pulse_amplitude / MHZ:.5g} MHz")
    return 0


def cmd_pi_pulse(args) -> int:
    from scipy.constants import c as c_light, h as h_planck

    t_start = time.monotonic()
    duration = args.t_ns * NS
    rep_rate = args.rep_khz * 1e3
    wavelength = args.wavelength_nm * 1e-9
    omega_pi = math.pi / duration
    photon_energy_power = args.photons * rep_rate * h_planck * c_light / wavelength
    check = photons_per_pulse(photon_energy_power, rep_rate, wavelength)
    payload = {
        "pulse_duration_ns": args.t_ns,
        "rep_rate_kHz": args.rep_khz,
        "wavelength_nm": args.wavelength_nm,
        "photons_per_pulse": args.photons,
        "avg_power_W": photon_energy_power,
        "rect_pi_omega_rad_s": omega_pi,
        "rect_pi_omega_over_2pi_MHz": omega_pi / MHZ,
        "photons_check": check,
    }
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "pi_pulse.txt", out / "pi_pulse.json", payload,
                 [f"rabisim pi-pulse v{__version__}"])
    write_manifest(out / "pi_pulse_manifest.json", "pi-pulse",
                   "", 0, [str(out / "pi_pulse.txt")],
                   time.monotonic() - t_start)
    print(f"pi-pulse: average power {photon_energy_power:.6g} W delivers "
          f"{check:.6g} photons/pulse; rectangular-equivalent "
          f"Omega/2pi = {omega_pi / MHZ:.6g} MHz")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return run_selftest(verbose=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rabisim",
        description="Pulsed two-level emitter simulations and fits")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="config file (key = value lines)")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="override rng.seed")

    p = sub.add_parser("trace", help="excited-population trace (+ optional MC histogram)")
    add_common(p)
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("power-scan", help="jitter-averaged signal vs drive amplitude")
    add_common(p)
    p.set_defaults(fn=cmd_power_scan)

    p = sub.add_parser("sweep2d", help="detuning x amplitude fluorescence map")
    add_common(p)
    p.set_defaults(fn=cmd_sweep2d)

    p = sub.add_parser("cross-section", help="extract one amplitude row of a sweep")
    add_common(p)
    p.add_argument("--source", required=True, help="sweep_long.csv from sweep2d")
    p.add_argument("--amplitude-mhz", type=float, dest="amplitude_mhz")
    p.set_defaults(fn=cmd_cross_section)

    p = sub.add_parser("fit-trace", help="fit a decay histogram with Bloch dynamics")
    add_common(p)
    p.add_argument("--data", required=True, help="two-column histogram (t_ns, counts)")
    p.add_argument("--pulse", required=True, help="measured pulse file (t_ns, value)")
    p.add_argument("--pulse-mode", default="intensity",
                   choices=("intensity", "amplitude"))
    p.set_defaults(fn=cmd_fit_trace)

    p = sub.add_parser("fit-power-scan", help="fit the washout model to a power scan")
    add_common(p)
    p.add_argument("--data", required=True, help="power_scan.csv")
    p.set_defaults(fn=cmd_fit_power_scan)

    p = sub.add_parser("pi-pulse", help="pi-pulse photon/power bookkeeping")
    p.add_argument("--t-ns", type=float, required=True, dest="t_ns")
    p.add_argument("--wavelength-nm", type=float, required=True,
                   dest="wavelength_nm")
    p.add_argument("--rep-khz", type=float, required=True, dest="rep_khz")
    p.add_argument("--photons", type=float, default=500.0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_pi_pulse)

    p = sub.add_parser("selftest", help="run the analytic-oracle checks")
    p.set_defaults(fn=cmd_selftest)

    return parser


def run_command(argv) -> int:
    """Entry point used by tests: returns the process exit status.

    0 success, 2 usage error, 3 validation/parse error, 4 numerical failure.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.fn(args)
    except (ParseError, ValidationError, NonMonotonicTime, OutOfRange,
            FileNotFoundError, ValueError) as exc:
        print(f"ERROR kind={type(exc).__name__} msg={exc}", file=sys.stderr)
        return 3
    except (StepFailure, InvariantBreach, NonConvergedQuadrature,
            UnreachableArea, FitDiverged, SingularJacobian,
            DegenerateTail) as exc:
        print(f"ERROR kind={type(exc).__name__} msg={exc}", file=sys.stderr)
        return 4
    except RabisimError as exc:
        print(f"ERROR kind={type(exc).__name__} msg={exc}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))
