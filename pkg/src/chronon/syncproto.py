"""Two-way synchronization arithmetic.

Sign convention: the offset is subscriber clock minus master clock. The
one-way correlation is ``X@B - XX@A`` and peaks at propagation + offset; the
round-trip correlation ``X_returned@A - XX@A`` peaks at the round-trip time.

Offsets are kept as an integer number of seconds (``coarse_offset_s``, known
a priori) plus picosecond-scale fine parts, so that offsets of days keep
sub-picosecond resolution. Exact decimal renderings are provided for reports.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from decimal import Decimal

import numpy as np

from .peakfit import CascadeFit
from .timetags import TagStream

C_M_PER_S = 299_792_458
PS_PER_S = 10**12


class SyncProtocolError(ValueError):
    pass


def _dec(x: float) -> Decimal:
    return Decimal(repr(float(x)))


@dataclass
class SyncReport:
    tau_one_way_ps: float
    tau_one_way_err_ps: float
    tau_round_trip_ps: float
    tau_round_trip_err_ps: float
    coarse_offset_s: int = 0
    kappa_ps: float = 0.0
    kappa_err_ps: float = 0.0
    inserted_delay_estimate_ps: float | None = None

    @property
    def compensated_fine_ps(self) -> float:
        return self.tau_one_way_ps - self.tau_round_trip_ps / 2 - self.kappa_ps

    @property
    def raw_offset_s(self) -> float:
        return self.coarse_offset_s + self.tau_one_way_ps * 1e-12

    @property
    def compensated_offset_s(self) -> float:
        return self.coarse_offset_s + self.compensated_fine_ps * 1e-12

    @property
    def raw_offset_decimal(self) -> Decimal:
        return Decimal(self.coarse_offset_s) + _dec(self.tau_one_way_ps) / PS_PER_S

    @property
    def compensated_offset_decimal(self) -> Decimal:
        fine = _dec(self.tau_one_way_ps) - _dec(self.tau_round_trip_ps) / 2 - _dec(self.kappa_ps)
        return Decimal(self.coarse_offset_s) + fine / PS_PER_S

    @property
    def raw_offset_err_ps(self) -> float:
        return self.tau_one_way_err_ps

    @property
    def compensated_offset_err_ps(self) -> float:
        return math.sqrt(self.tau_one_way_err_ps**2 + (self.tau_round_trip_err_ps / 2) ** 2 + self.kappa_err_ps**2)

    @property
    def one_way_propagation_ps(self) -> float:
        return self.tau_round_trip_ps / 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(
            raw_offset_s=str(self.raw_offset_decimal),
            raw_offset_err_ps=self.raw_offset_err_ps,
            compensated_offset_s=str(self.compensated_offset_decimal),
            compensated_fine_ps=self.compensated_fine_ps,
            compensated_offset_err_ps=self.compensated_offset_err_ps,
            one_way_propagation_ps=self.one_way_propagation_ps,
        )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyncReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def summary(self) -> str:
        return (
            f"one-way peak     {self.tau_one_way_ps:.1f} +/- {self.tau_one_way_err_ps:.1f} ps\n"
            f"round-trip peak  {self.tau_round_trip_ps:.1f} +/- {self.tau_round_trip_err_ps:.1f} ps\n"
            f"kappa            {self.kappa_ps:.1f} +/- {self.kappa_err_ps:.1f} ps\n"
            f"raw offset       {self.raw_offset_decimal} s\n"
            f"compensated      {self.compensated_offset_decimal} s "
            f"(+/- {self.compensated_offset_err_ps:.1f} ps)\n"
        )


def _tau_rel(fit: CascadeFit, coarse_offset_s: int) -> float:
    # integer part first so offsets of days keep ps resolution
    return float(fit.origin_ps - int(coarse_offset_s) * PS_PER_S) + fit.tau_max_local_ps


def compute_sync(fit_oneway: CascadeFit, fit_roundtrip: CascadeFit, coarse_offset_s: int = 0,
                 kappa_ps: float = 0.0, kappa_err_ps: float = 0.0) -> SyncReport:
    """Combine the one-way and round-trip peak maxima into a SyncReport."""
    for name, f in (("one-way", fit_oneway), ("round-trip", fit_roundtrip)):
        if f is None or not np.isfinite(f.tau_max_local_ps):
            raise ValueError(f"{name} fit missing or not converged")
    coarse = int(coarse_offset_s)
    if coarse != coarse_offset_s:
        raise SyncProtocolError("coarse offset must be an integer number of seconds")
    tau_ow = _tau_rel(fit_oneway, coarse)
    if abs(tau_ow) >= 0.5 * PS_PER_S:
        raise SyncProtocolError(
            f"one-way peak {tau_ow * 1e-12:.6f} s from the coarse offset; coarse offset inconsistent"
        )
    tau_rt = _tau_rel(fit_roundtrip, 0)
    return SyncReport(tau_ow, float(fit_oneway.tau_max_err_ps), tau_rt, float(fit_roundtrip.tau_max_err_ps),
                      coarse, float(kappa_ps), float(kappa_err_ps))


def kappa_from_reference(reference: SyncReport, known_offset_ps: float = 0.0) -> tuple[float, float]:
    """Calibration constant from a run with known offset (e.g. co-located clocks).

    Absorbs everything that makes ``tau_ow - tau_rt / 2`` differ from the
    offset: detector cabling and the position of the fitted maximum relative
    to the cascade start. Returns ``(kappa_ps, kappa_err_ps)``.
    """
    k = reference.tau_one_way_ps + reference.coarse_offset_s * PS_PER_S - reference.tau_round_trip_ps / 2
    k -= known_offset_ps
    err = math.sqrt(reference.tau_one_way_err_ps**2 + (reference.tau_round_trip_err_ps / 2) ** 2)
    return float(k), err


@dataclass
class DelayVerification:
    one_way_shift_ps: float
    round_trip_shift_ps: float
    ratio: float
    ratio_err: float
    passed: bool
    tolerance: float
    raw_offset_shift_ps: float
    one_way_shift_err_ps: float
    round_trip_shift_err_ps: float

    def to_dict(self) -> dict:
        return asdict(self)


def verify_delay_insertion(before: SyncReport, after: SyncReport, tolerance: float = 0.1) -> DelayVerification:
    """Compare runs before/after inserting fiber; a common-path delay gives ratio 2."""
    for name, r in (("before", before), ("after", after)):
        if r is None or not (np.isfinite(r.tau_one_way_ps) and np.isfinite(r.tau_round_trip_ps)):
            raise ValueError(f"{name} report is missing a fit")
    ow = (after.tau_one_way_ps - before.tau_one_way_ps) + (after.coarse_offset_s - before.coarse_offset_s) * PS_PER_S
    rt = after.tau_round_trip_ps - before.tau_round_trip_ps
    ow_err = math.hypot(after.tau_one_way_err_ps, before.tau_one_way_err_ps)
    rt_err = math.hypot(after.tau_round_trip_err_ps, before.tau_round_trip_err_ps)
    if ow == 0:
        ratio, ratio_err = math.inf, math.inf
    else:
        ratio = rt / ow
        ratio_err = abs(ratio) * math.hypot(rt_err / rt if rt else 0.0, ow_err / ow)
    raw_shift = float((after.raw_offset_decimal - before.raw_offset_decimal) * PS_PER_S)
    return DelayVerification(ow, rt, ratio, ratio_err, bool(abs(ratio - 2) < tolerance), tolerance, raw_shift,
                             ow_err, rt_err)


def path_length_from_roundtrip(tau_rt_ps: float, group_index: float = 1.468) -> float:
    """One-way fiber length in metres for a round-trip time."""
    if tau_rt_ps < 0:
        raise ValueError("round-trip time must be >= 0")
    if group_index < 1:
        raise ValueError("group index must be >= 1")
    return tau_rt_ps * 1e-12 * C_M_PER_S / (2 * group_index)


def apply_offset(stream: TagStream, report: SyncReport, channels=None) -> TagStream:
    """Subtract the compensated offset from the subscriber timestamps.

    ``channels`` selects which channels are in subscriber time (default: all).
    Timestamps that would go negative are clamped to 0 with a warning.
    """
    fine = report.compensated_fine_ps
    if not np.isfinite(fine):
        raise ValueError("compensated offset is not finite")
    offset = int(report.coarse_offset_s) * PS_PER_S + int(round(fine))
    if offset == 0:
        return stream
    mask = np.ones(len(stream), bool) if channels is None else np.isin(stream.channels, list(channels))
    t = stream.times.copy()
    sel = t[mask]
    if offset > 0:
        low = sel < np.uint64(offset)
        if low.any():
            warnings.warn(f"{int(low.sum())} timestamps earlier than the offset; clamped to 0", RuntimeWarning)
        sel = np.where(low, np.uint64(0), sel - np.uint64(offset))
    else:
        sel = sel + np.uint64(-offset)
    t[mask] = sel
    return TagStream.from_arrays(t, stream.channels, stream.channel_count, **stream.meta)
