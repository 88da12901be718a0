"""Closed-loop analysis stages and their file outputs.

Each stage returns plain data and, when given an output directory, writes
CSV/JSON files whose content depends only on the configuration and seed.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, replace
from decimal import Decimal
from pathlib import Path

import numpy as np

from .config import RunConfig
from .correlator import CorrelationHistogram, autocorrelate, correlate, find_peak, g2_normalize
from .peakfit import CascadeFit, fit_cascade, fit_g2, irf_sigma_from, residual_report
from .qdsim import simulate_hbt, simulate_run, simulate_tomography_set
from .syncproto import PS_PER_S, SyncReport, compute_sync, kappa_from_reference, verify_delay_insertion
from .timetags import TagStream, write_stream
from .tomography import TimeBinSeries, TomoConfig, WaveplateCorrection, tomo_timeseries

log = logging.getLogger(__name__)

CH_XX, CH_X_SUB, CH_X_RET = 0, 1, 2


# --- file helpers -----------------------------------------------------------

def write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Decimal):
        return str(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_histogram(h: CorrelationHistogram, path: Path, **extra) -> None:
    """CSV ``tau_ps,counts,g2`` (bin centres) plus a ``.json`` sidecar."""
    try:
        g2 = g2_normalize(h)
    except ValueError:
        g2 = np.full(h.n_bins, np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau_ps", "counts", "g2"])
        for c, n, g in zip(h.centers, h.counts, g2):
            w.writerow([repr(float(c)), int(n), repr(float(g))])
    side = {"tau_start_ps": h.tau_start_ps, "bin_width_ps": h.bin_width_ps, "n_bins": h.n_bins,
            "n_a": h.n_a, "n_b": h.n_b, **extra}
    write_json(side, path.with_suffix(".json"))


def read_histogram(path: str | Path) -> CorrelationHistogram:
    path = Path(path)
    side_path = path.with_suffix(".json")
    tau, counts = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            tau.append(float(row["tau_ps"]))
            counts.append(int(row["counts"]))
    if len(tau) < 2:
        raise ValueError(f"{path}: histogram needs at least 2 bins")
    if side_path.is_file():
        side = json.loads(side_path.read_text())
        return CorrelationHistogram(int(side["tau_start_ps"]), int(side["bin_width_ps"]),
                                    np.array(counts, np.int64), int(side.get("n_a", 0)), int(side.get("n_b", 0)))
    bw = int(round(tau[1] - tau[0]))
    return CorrelationHistogram(int(round(tau[0] - bw / 2)), bw, np.array(counts, np.int64), 0, 0)


def write_tomo(series: TimeBinSeries, out: Path, prefix: str = "tomo") -> None:
    with open(out / f"{prefix}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "tau_ps", "F", "dF", "C", "dC", "valid", "counts"])
        for k, tau, f, df, c, dc, valid, n in series.rows():
            w.writerow([k, repr(tau), repr(f), repr(df), repr(c), repr(dc), int(valid), int(n)])
    mats = {str(k): rho.to_json_dict() for k, rho in enumerate(series.rho) if rho is not None}
    best = series.best_bin() if series.valid.any() else None
    write_json({"bin_width_ps": series.bin_width_ps, "settings": list(series.settings),
                "correction": asdict(series.correction), "best_bin": best,
                "best": None if best is None else {"tau_ps": float(series.tau_ps[best]),
                                                   "fidelity": float(series.fidelity[best]),
                                                   "fidelity_err": float(series.fidelity_err[best]),
                                                   "concurrence": float(series.concurrence[best]),
                                                   "concurrence_err": float(series.concurrence_err[best])},
                "density_matrices": mats}, out / f"{prefix}_density.json")


# --- sync -------------------------------------------------------------------

def locate_and_fit(stream: TagStream, cfg: RunConfig, channel_a: int, window: tuple[int, int],
                   threads: int = 1) -> tuple[CorrelationHistogram, CascadeFit, dict]:
    """find_peak on (channel_a - XX), then a fine histogram and a cascade fit."""
    s = cfg.search
    a = stream.channel_times(channel_a)
    b = stream.channel_times(CH_XX)
    bw = cfg.run.bin_width_ps
    res = find_peak(a, b, window, bw, coarse_bin_ps=s.coarse_bin_ps, factor=s.factor,
                    half_window_bins=s.half_window_bins, threshold=s.threshold,
                    coarse_span_ps=s.coarse_span_s * PS_PER_S, threads=threads)
    lo = res.tau_peak_ps - cfg.fit.pre_ps
    n = -(-(cfg.fit.pre_ps + cfg.fit.post_ps) // bw)
    h = correlate(a, b, lo, lo + n * bw, bw, threads=threads)
    fit = fit_cascade(h, omega=cfg.source.params().fss_omega_rad_per_ps, phases=cfg.fit.phases,
                      fixed=None if cfg.fit.beat else {"B": 0.0})
    info = {"tau_peak_ps": res.tau_peak_ps, "significance": res.significance,
            "stages": [list(st) for st in res.refined_stages]}
    return h, fit, info


def sync_run(stream: TagStream, cfg: RunConfig, kappa=(0.0, 0.0), out: Path | None = None, prefix: str = "",
             threads: int = 1) -> tuple[SyncReport, dict]:
    coarse = cfg.sync.coarse_offset_s * PS_PER_S
    ow_window = (coarse + cfg.search.one_way_lo_ps, coarse + cfg.search.one_way_hi_ps)
    rt_window = (cfg.search.round_trip_lo_ps, cfg.search.round_trip_hi_ps)
    h_ow, fit_ow, info_ow = locate_and_fit(stream, cfg, CH_X_SUB, ow_window, threads)
    h_rt, fit_rt, info_rt = locate_and_fit(stream, cfg, CH_X_RET, rt_window, threads)
    report = compute_sync(fit_ow, fit_rt, cfg.sync.coarse_offset_s, *kappa)
    if out is not None:
        for name, h, fit, info in (("oneway", h_ow, fit_ow, info_ow), ("roundtrip", h_rt, fit_rt, info_rt)):
            write_histogram(h, out / f"{prefix}{name}_hist.csv", peak_search=info,
                            channels=[CH_X_SUB if name == "oneway" else CH_X_RET, CH_XX])
            write_json(fit.to_dict(), out / f"{prefix}fit_{name}.json")
            rr = residual_report(fit, h, threshold=cfg.fit.residual_threshold)
            (out / f"{prefix}fit_{name}_residuals.txt").write_text(rr.to_text())
        write_json(report.to_dict(), out / f"{prefix}sync_report.json")
        (out / f"{prefix}sync_summary.txt").write_text(report.summary())
    details = {"one_way": {"search": info_ow, "chi2_red": fit_ow.chi2_red, "t0_ps": fit_ow.t0_ps,
                           "tau_max_ps": fit_ow.tau_max_ps},
               "round_trip": {"search": info_rt, "chi2_red": fit_rt.chi2_red, "t0_ps": fit_rt.t0_ps,
                              "tau_max_ps": fit_rt.tau_max_ps}}
    return report, details


def _simulate(cfg: RunConfig, seed, duration_s: float, **overrides):
    link = replace(cfg.link, **overrides.get("link", {}))
    clock = replace(cfg.clock, **overrides.get("clock", {}))
    return simulate_run(cfg.source.params(), link, clock, None, duration_s, seed)


def _offset_check(report: SyncReport, truth_offset_ps: int, tolerance_ps: float) -> dict:
    truth = Decimal(truth_offset_ps) / PS_PER_S
    err_ps = float((report.compensated_offset_decimal - truth) * PS_PER_S)
    raw_err_ps = float((report.raw_offset_decimal - truth) * PS_PER_S)
    bound = max(3 * report.compensated_offset_err_ps, tolerance_ps)
    return {"truth_offset_s": str(truth), "compensated_error_ps": err_ps, "raw_error_ps": raw_err_ps,
            "bound_ps": bound, "pass": bool(abs(err_ps) < bound)}


def sync_stage(cfg: RunConfig, out: Path | None, threads: int) -> dict:
    seeds = np.random.SeedSequence(cfg.run.seed).spawn(3)
    stream, truth = _simulate(cfg, seeds[0], cfg.run.duration_s)
    if out is not None:
        write_json(truth.to_dict(), out / "ground_truth.json")
        if cfg.run.write_tags:
            write_stream(stream, out / "run.qtt")

    kappa = (0.0, 0.0)
    result: dict = {}
    if cfg.sync.kappa_ps == "calibrate":
        dur = cfg.sync.calibration_duration_s or cfg.run.duration_s
        ref_stream, _ = _simulate(cfg, seeds[1], dur, clock={"offset_s": 0.0, "offset_ps": 0.0})
        ref_cfg = replace(cfg, sync=replace(cfg.sync, coarse_offset_s=0))
        ref_report, _ = sync_run(ref_stream, ref_cfg, (0.0, 0.0), out, "calibration_", threads)
        kappa = kappa_from_reference(ref_report, 0.0)
        del ref_stream
        result["calibration"] = {"kappa_ps": kappa[0], "kappa_err_ps": kappa[1],
                                 "duration_s": dur}
    else:
        kappa = (float(cfg.sync.kappa_ps), 0.0)

    report, details = sync_run(stream, cfg, kappa, out, "", threads)
    del stream
    result.update(report=report.to_dict(), fits=details,
                  offset_check=_offset_check(report, truth.offset_total_ps, cfg.sync.tolerance_ps),
                  ground_truth={"offset_total_ps": truth.offset_total_ps,
                                "round_trip_peak_start_ps": truth.round_trip_peak_start_ps,
                                "one_way_peak_start_ps": truth.one_way_peak_start_ps})

    if cfg.sync.verify_inserted_delay_ps > 0:
        d = cfg.sync.verify_inserted_delay_ps
        s2, truth2 = _simulate(cfg, seeds[2], cfg.run.duration_s,
                               link={"inserted_delay_ps": cfg.link.inserted_delay_ps + d})
        report2, _ = sync_run(s2, cfg, kappa, out, "inserted_", threads)
        del s2
        ver = verify_delay_insertion(report, report2)
        if out is not None:
            write_json(ver.to_dict(), out / "delay_verification.json")
        result["delay_verification"] = {**ver.to_dict(), "inserted_delay_ps": d,
                                        "one_way_shift_error_ps": ver.one_way_shift_ps - d,
                                        "round_trip_shift_error_ps": ver.round_trip_shift_ps - 2 * d}
    return result


# --- g2 ---------------------------------------------------------------------

def g2_stage(cfg: RunConfig, out: Path | None, threads: int, stream: TagStream | None = None) -> dict:
    g = cfg.g2
    if stream is None:
        seed = np.random.SeedSequence(cfg.run.seed).spawn(5)[3]
        stream = simulate_hbt(g.duration_s, seed, rep_period_ps=g.rep_period_ps, emit_prob=g.emit_prob,
                              lifetime_ps=g.lifetime_ps, background_per_pulse=g.background_per_pulse,
                              blink_on_ms=g.blink_on_ms, blink_off_ms=g.blink_off_ms,
                              jitter_sigma_ps=g.jitter_sigma_ps)
    half = int(g.half_window_periods * g.rep_period_ps)
    half -= half % g.bin_width_ps
    h = autocorrelate(stream.channel_times(0), -half, half, g.bin_width_ps, b=stream.channel_times(1),
                      threads=threads)
    fit = fit_g2(h, g.rep_period_ps, irf_sigma_ps=irf_sigma_from(g.irf_ps, g.irf_mode), far_index=g.far_index)
    if out is not None:
        write_histogram(h, out / "g2_hist.csv", channels=[0, 1])
        write_json(fit.to_dict(), out / "g2_fit.json")
    return {"g2_zero": fit.g2_zero, "g2_zero_err": fit.g2_zero_err, "tau_decay_ps": fit.tau_decay_ps,
            "chi2_red": fit.chi2_red}


# --- tomography ---------------------------------------------------------------

def tomo_config(cfg: RunConfig, threads: int) -> TomoConfig:
    t = cfg.tomo
    return TomoConfig(bin_width_ps=cfg.run.bin_width_ps, window_bins=t.window_bins, lead_bins=t.lead_bins,
                      n_resamples=t.n_resamples, restarts=t.restarts, min_counts=t.min_counts, seed=cfg.run.seed,
                      threads=threads, subtract_background=t.subtract_background, settings=tuple(t.settings))


def tomo_series(cfg: RunConfig, threads: int, streams=None, peak_tau_ps: int | None = None):
    """Simulate (unless ``streams`` is given) and reconstruct the time-bin series."""
    t = cfg.tomo
    if streams is None:
        seed = int(np.random.SeedSequence(cfg.run.seed).spawn(5)[4].generate_state(1)[0])
        link = replace(cfg.link, one_way_delay_ps=0.0, inserted_delay_ps=0.0, reflectance=t.reflectance)
        clock = replace(cfg.clock, offset_s=0.0, offset_ps=0.0, jitter_sigma_ps=(t.jitter_sigma_ps,) * 3)
        src = replace(cfg.source.params(), pair_prob=t.pair_prob)
        streams = simulate_tomography_set(src, link, clock, t.duration_s, seed, tuple(t.settings))
        peak_tau_ps = link.detector_delay_ps[1] - link.detector_delay_ps[0] if peak_tau_ps is None else peak_tau_ps
    corr = WaveplateCorrection(t.waveplate_theta_rad, t.waveplate_phi_rad, t.waveplate_target)
    return tomo_timeseries(streams, corr, tomo_config(cfg, threads), int(round(peak_tau_ps or 0)))


def tomo_stage(cfg: RunConfig, out: Path | None, threads: int, streams=None, peak_tau_ps: int | None = None) -> dict:
    series = tomo_series(cfg, threads, streams, peak_tau_ps)
    if out is not None:
        write_tomo(series, out)
    v = series.valid
    best = series.best_bin() if v.any() else None
    return {"valid_bins": int(v.sum()), "n_bins": int(v.size),
            "best_bin": best,
            "max_fidelity": None if best is None else float(series.fidelity[best]),
            "max_fidelity_err": None if best is None else float(series.fidelity_err[best]),
            "concurrence_at_max": None if best is None else float(series.concurrence[best]),
            "min_concurrence": float(np.nanmin(series.concurrence[v])) if v.any() else None}


# --- everything -------------------------------------------------------------

def run_pipeline(cfg: RunConfig, out: Path | None = None, threads: int | None = None) -> dict:
    threads = threads or cfg.threads
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config_used.ini").write_text(cfg.to_ini())
    report: dict = {"label": cfg.run.label, "seed": cfg.run.seed, "duration_s": cfg.run.duration_s}
    report["sync"] = sync_stage(cfg, out, threads)
    if cfg.tomo.enabled:
        report["tomo"] = tomo_stage(cfg, out, threads)
    if cfg.g2.enabled:
        report["g2"] = g2_stage(cfg, out, threads)
    flags = {"offset": report["sync"]["offset_check"]["pass"]}
    if "delay_verification" in report["sync"]:
        flags["delay_verification"] = report["sync"]["delay_verification"]["passed"]
    report["pass"] = flags
    report["all_pass"] = all(flags.values())
    if out is not None:
        write_json(report, out / "pipeline_report.json")
    return report
