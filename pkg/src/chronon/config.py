"""Sectioned ``key = value`` run configuration.

Every section maps onto a dataclass; unknown sections or keys are rejected so
typos fail loudly. Values are parsed according to the type of the field's
default (comma-separated lists for tuples, ``true``/``false`` for booleans).
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .qdsim import DEFAULT_SETTINGS, ClockParams, LinkParams, SourceParams, fss_omega


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 1
    duration_s: float = 60.0
    out: str = "out"
    threads: int = 0  # 0 = logical cores
    bin_width_ps: int = 16
    label: str = "run"
    write_tags: bool = False


@dataclass
class SourceSection(SourceParams):
    fss_uev: float = 4.71

    def params(self) -> SourceParams:
        kw = {f.name: getattr(self, f.name) for f in fields(SourceParams)}
        kw["fss_omega_rad_per_ps"] = fss_omega(self.fss_uev)
        return SourceParams(**kw)


@dataclass
class SearchSection:
    """Peak search windows, relative to the coarse offset for the one-way peak."""
    one_way_lo_ps: int = -500_000_000_000
    one_way_hi_ps: int = 500_000_000_000
    round_trip_lo_ps: int = 0
    round_trip_hi_ps: int = 500_000_000_000
    coarse_bin_ps: int = 1_000_000_000
    factor: int = 100
    half_window_bins: int = 50
    threshold: float = 5.0
    coarse_span_s: float = 5.0


@dataclass
class FitSection:
    pre_ps: int = 3000
    post_ps: int = 7000
    phases: int = 4
    residual_threshold: float = 2.0
    # fit the polarization beat; sync histograms are polarization-unresolved
    beat: bool = False


@dataclass
class SyncSection:
    coarse_offset_s: int = 0
    # a number in ps, or "calibrate" for a reference run at zero clock offset
    kappa_ps: str = "0"
    calibration_duration_s: float = 0.0  # 0 = same as the run
    verify_inserted_delay_ps: float = 0.0  # > 0 adds a delay-insertion run
    tolerance_ps: float = 20.0


@dataclass
class G2Section:
    enabled: bool = False
    duration_s: float = 10.0
    rep_period_ps: float = 12500.0
    emit_prob: float = 0.05
    lifetime_ps: float = 1140.0
    background_per_pulse: float = 0.0
    blink_on_ms: float = 0.0
    blink_off_ms: float = 0.0
    jitter_sigma_ps: float = 20.0
    bin_width_ps: int = 64
    half_window_periods: int = 8
    irf_ps: float = 50.0
    irf_mode: str = "sigma"
    far_index: int = 5


@dataclass
class TomoSection:
    enabled: bool = False
    duration_s: float = 0.05
    pair_prob: float = 0.5
    reflectance: float = 0.0
    jitter_sigma_ps: float = 10.0
    window_bins: int = 84
    lead_bins: int = 0
    n_resamples: int = 100
    restarts: int = 5
    min_counts: int = 16
    subtract_background: bool = False
    waveplate_theta_rad: float = 0.0
    waveplate_phi_rad: float = 0.0
    waveplate_target: str = "exciton"
    settings: tuple = DEFAULT_SETTINGS


SECTIONS = {
    "run": RunSection,
    "source": SourceSection,
    "link": LinkParams,
    "clock": ClockParams,
    "search": SearchSection,
    "fit": FitSection,
    "sync": SyncSection,
    "g2": G2Section,
    "tomo": TomoSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    source: SourceSection = field(default_factory=SourceSection)
    link: LinkParams = field(default_factory=LinkParams)
    clock: ClockParams = field(default_factory=ClockParams)
    search: SearchSection = field(default_factory=SearchSection)
    fit: FitSection = field(default_factory=FitSection)
    sync: SyncSection = field(default_factory=SyncSection)
    g2: G2Section = field(default_factory=G2Section)
    tomo: TomoSection = field(default_factory=TomoSection)

    @property
    def threads(self) -> int:
        return self.run.threads if self.run.threads > 0 else (os.cpu_count() or 1)

    def validate(self) -> "RunConfig":
        try:
            self.source.params().validate()
            self.link.validate()
            self.clock.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.run.duration_s <= 0:
            raise ConfigError("run.duration_s must be > 0")
        if self.run.bin_width_ps < 1:
            raise ConfigError("run.bin_width_ps must be >= 1")
        if self.sync.kappa_ps != "calibrate":
            try:
                float(self.sync.kappa_ps)
            except ValueError:
                raise ConfigError("sync.kappa_ps must be a number or 'calibrate'") from None
        return self

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        for name in SECTIONS:
            sec = getattr(self, name)
            parser[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)
                            if not (name == "source" and f.name == "fss_omega_rad_per_ps")}
        from io import StringIO
        buf = StringIO()
        parser.write(buf)
        return buf.getvalue()


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(float(raw)) if "e" in raw.lower() else int(raw.replace("_", ""))
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], str):
                return tuple(items)
            return tuple(float(s) for s in items)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def section_help() -> str:
    """Every section, key and default, for ``--help``."""
    lines = []
    for name, cls in SECTIONS.items():
        lines.append(f"[{name}]")
        inst = cls()
        for f in fields(cls):
            if name == "source" and f.name == "fss_omega_rad_per_ps":
                continue
            lines.append(f"  {f.name} = {_format(getattr(inst, f.name))}")
    return "\n".join(lines)


def load_config(path: str | os.PathLike | None = None, text: str | None = None) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            parser.read_string(p.read_text(), source=str(p))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig()
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        current = getattr(cfg, sec)
        names = {f.name for f in fields(current)}
        updates = {}
        for key, raw in parser[sec].items():
            if key not in names or (sec == "source" and key == "fss_omega_rad_per_ps"):
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            updates[key] = _parse(raw, getattr(current, key), f"[{sec}] {key}")
        setattr(cfg, sec, replace(current, **updates))
    return cfg.validate()
