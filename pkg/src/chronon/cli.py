"""``chronon`` command-line entry point.

Exit codes: 0 success, 1 analysis error (no peak, fit or reconstruction
failure), 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .config import ConfigError, RunConfig, load_config, section_help
from .correlator import NoPeakFoundError, NormalizationError, autocorrelate, correlate, find_peak
from .peakfit import CascadeFit, FitError, fit_cascade, residual_report
from .syncproto import SyncProtocolError, SyncReport, compute_sync, verify_delay_insertion
from .timetags import TagFormatError, read_stream, write_stream
from .tomography import ReconstructionError

ANALYSIS_ERRORS = (NoPeakFoundError, FitError, ReconstructionError, NormalizationError, SyncProtocolError)
USAGE_ERRORS = (ConfigError, TagFormatError, FileNotFoundError, ValueError, configparser.Error)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="sectioned key=value config file (see `chronon --help`)")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--out", type=Path, help="output directory (default: [run] out)")
    p.add_argument("--bin-width-ps", type=int, help="override [run] bin_width_ps (default 16)")
    p.add_argument("--threads", type=int, help="worker count (default: logical cores)")
    p.add_argument("--json-errors", action="store_true", help="print errors as JSON on stderr")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="chronon", formatter_class=argparse.RawDescriptionHelpFormatter,
                     description="Entanglement-assisted two-way clock synchronization toolkit.",
                     epilog="config sections, keys and defaults:\n" + section_help())
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="simulate tag files")
    p.add_argument("--kind", choices=("sync", "tomo", "hbt"), default="sync")

    p = sub.add_parser("correlate", parents=[common], help="histogram of t_a - t_b")
    p.add_argument("tags", type=Path)
    p.add_argument("--a", type=int, required=True, help="channel of t_a")
    p.add_argument("--b", type=int, required=True, help="channel of t_b")
    p.add_argument("--start-ps", type=int, required=True)
    p.add_argument("--end-ps", type=int, required=True)
    p.add_argument("--name", default="hist")

    p = sub.add_parser("find-peak", parents=[common], help="multi-resolution peak search")
    p.add_argument("tags", type=Path)
    p.add_argument("--a", type=int, required=True)
    p.add_argument("--b", type=int, required=True)
    p.add_argument("--window-ps", type=int, nargs=2, required=True, metavar=("LO", "HI"))
    p.add_argument("--name", default="peak")

    p = sub.add_parser("fit", parents=[common], help="cascade fit of a histogram CSV")
    p.add_argument("hist", type=Path)
    p.add_argument("--name", default="fit")

    p = sub.add_parser("g2", parents=[common], help="autocorrelation and g2(0) fit")
    p.add_argument("tags", type=Path, nargs="?", help="two-channel tag file (default: simulate from [g2])")

    p = sub.add_parser("sync", parents=[common], help="SyncReport from two fit JSONs")
    p.add_argument("fit_oneway", type=Path)
    p.add_argument("fit_roundtrip", type=Path)
    p.add_argument("--kappa-ps", type=float, help="override [sync] kappa_ps")
    p.add_argument("--name", default="sync_report")

    p = sub.add_parser("verify-delay", parents=[common], help="compare SyncReports before/after a delay")
    p.add_argument("before", type=Path)
    p.add_argument("after", type=Path)
    p.add_argument("--tolerance", type=float, default=0.1)

    p = sub.add_parser("tomo", parents=[common], help="time-binned polarization tomography")
    p.add_argument("manifest", type=Path, nargs="?",
                   help="settings manifest ([settings] label = file; [channels] x, xx); default: simulate")
    p.add_argument("--peak-ps", type=int, default=None, help="cascade start (default 0 / from simulation)")

    sub.add_parser("pipeline", parents=[common], help="full closed loop on one config")
    return parser


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    run = cfg.run
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if args.out is not None:
        run = replace(run, out=str(args.out))
    if args.bin_width_ps is not None:
        if args.bin_width_ps < 1:
            raise ConfigError("--bin-width-ps must be >= 1")
        run = replace(run, bin_width_ps=args.bin_width_ps)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        run = replace(run, threads=args.threads)
    return replace(cfg, run=run)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=pl._json_default))


def cmd_simulate(args, cfg):
    out = _out(cfg)
    seeds = np.random.SeedSequence(cfg.run.seed).spawn(5)
    if args.kind == "sync":
        stream, truth = pl._simulate(cfg, seeds[0], cfg.run.duration_s)
        write_stream(stream, out / "run.qtt")
        pl.write_json(truth.to_dict(), out / "ground_truth.json")
        _emit({"tags": str(out / "run.qtt"), "counts": stream.counts().tolist()})
    elif args.kind == "hbt":
        g = cfg.g2
        from .qdsim import simulate_hbt
        stream = simulate_hbt(g.duration_s, seeds[3], rep_period_ps=g.rep_period_ps, emit_prob=g.emit_prob,
                              lifetime_ps=g.lifetime_ps, background_per_pulse=g.background_per_pulse,
                              blink_on_ms=g.blink_on_ms, blink_off_ms=g.blink_off_ms,
                              jitter_sigma_ps=g.jitter_sigma_ps)
        write_stream(stream, out / "hbt.qtt")
        _emit({"tags": str(out / "hbt.qtt"), "counts": stream.counts().tolist()})
    else:
        from .qdsim import simulate_tomography_set
        t = cfg.tomo
        link = replace(cfg.link, one_way_delay_ps=0.0, inserted_delay_ps=0.0, reflectance=t.reflectance)
        clock = replace(cfg.clock, offset_s=0.0, offset_ps=0.0, jitter_sigma_ps=(t.jitter_sigma_ps,) * 3)
        src = replace(cfg.source.params(), pair_prob=t.pair_prob)
        seed = int(seeds[4].generate_state(1)[0])
        streams = simulate_tomography_set(src, link, clock, t.duration_s, seed, tuple(t.settings))
        man = configparser.ConfigParser()
        man.optionxform = str
        man["channels"] = {"x": "1", "xx": "0"}
        man["settings"] = {}
        for label, s in streams.items():
            write_stream(s, out / f"tomo_{label}.qtt")
            man["settings"][label] = f"tomo_{label}.qtt"
        with open(out / "tomo_manifest.ini", "w") as fh:
            man.write(fh)
        _emit({"manifest": str(out / "tomo_manifest.ini")})
    return 0


def cmd_correlate(args, cfg):
    out = _out(cfg)
    s = read_stream(args.tags)
    bw = cfg.run.bin_width_ps
    a, b = s.channel_times(args.a), s.channel_times(args.b)
    if args.a == args.b:
        h = autocorrelate(a, args.start_ps, args.end_ps, bw, threads=cfg.threads)
    else:
        h = correlate(a, b, args.start_ps, args.end_ps, bw, threads=cfg.threads)
    pl.write_histogram(h, out / f"{args.name}.csv", channels=[args.a, args.b])
    _emit({"csv": str(out / f"{args.name}.csv"), "n_a": h.n_a, "n_b": h.n_b, "n_bins": h.n_bins})
    return 0


def cmd_find_peak(args, cfg):
    out = _out(cfg)
    s = read_stream(args.tags)
    sc = cfg.search
    res = find_peak(s.channel_times(args.a), s.channel_times(args.b), tuple(args.window_ps),
                    cfg.run.bin_width_ps, coarse_bin_ps=sc.coarse_bin_ps, factor=sc.factor,
                    half_window_bins=sc.half_window_bins, threshold=sc.threshold,
                    coarse_span_ps=sc.coarse_span_s * 1e12, threads=cfg.threads)
    info = {"tau_peak_ps": res.tau_peak_ps, "significance": res.significance,
            "stages": [list(x) for x in res.refined_stages], "diagnostics": res.diagnostics}
    pl.write_histogram(res.histogram, out / f"{args.name}.csv", channels=[args.a, args.b])
    pl.write_json(info, out / f"{args.name}_search.json")
    _emit({k: info[k] for k in ("tau_peak_ps", "significance")})
    return 0


def cmd_fit(args, cfg):
    out = _out(cfg)
    h = pl.read_histogram(args.hist)
    fit = fit_cascade(h, omega=cfg.source.params().fss_omega_rad_per_ps, phases=cfg.fit.phases,
                      fixed=None if cfg.fit.beat else {"B": 0.0})
    pl.write_json(fit.to_dict(), out / f"{args.name}.json")
    (out / f"{args.name}_residuals.txt").write_text(residual_report(fit, h, threshold=cfg.fit.residual_threshold)
                                                   .to_text())
    _emit({"tau_max_ps": fit.tau_max_ps, "tau_max_err_ps": fit.tau_max_err_ps, "chi2_red": fit.chi2_red})
    return 0


def cmd_g2(args, cfg):
    out = _out(cfg)
    stream = read_stream(args.tags) if args.tags else None
    res = pl.g2_stage(cfg, out, cfg.threads, stream)
    _emit(res)
    return 0


def cmd_sync(args, cfg):
    out = _out(cfg)
    f_ow = CascadeFit.from_dict(json.loads(args.fit_oneway.read_text()))
    f_rt = CascadeFit.from_dict(json.loads(args.fit_roundtrip.read_text()))
    if args.kappa_ps is not None:
        kappa = args.kappa_ps
    elif cfg.sync.kappa_ps == "calibrate":
        raise ConfigError("kappa_ps = calibrate needs the pipeline command; pass --kappa-ps instead")
    else:
        kappa = float(cfg.sync.kappa_ps)
    rep = compute_sync(f_ow, f_rt, cfg.sync.coarse_offset_s, kappa)
    pl.write_json(rep.to_dict(), out / f"{args.name}.json")
    (out / f"{args.name}.txt").write_text(rep.summary())
    sys.stdout.write(rep.summary())
    return 0


def cmd_verify_delay(args, cfg):
    out = _out(cfg)
    before = SyncReport.from_dict(json.loads(args.before.read_text()))
    after = SyncReport.from_dict(json.loads(args.after.read_text()))
    ver = verify_delay_insertion(before, after, args.tolerance)
    pl.write_json(ver.to_dict(), out / "delay_verification.json")
    _emit(ver.to_dict())
    return 0


def _read_manifest(path: Path):
    man = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    man.optionxform = str
    man.read_string(path.read_text())
    if "settings" not in man:
        raise ConfigError(f"{path}: missing [settings] section")
    x = man.getint("channels", "x", fallback=1)
    xx = man.getint("channels", "xx", fallback=0)
    streams = {}
    for label, fname in man["settings"].items():
        s = read_stream(path.parent / fname)
        streams[label] = (s.channel_times(x), s.channel_times(xx))
    return streams


def cmd_tomo(args, cfg):
    out = _out(cfg)
    streams = _read_manifest(args.manifest) if args.manifest else None
    res = pl.tomo_stage(cfg, out, cfg.threads, streams, args.peak_ps)
    _emit(res)
    return 0


def cmd_pipeline(args, cfg):
    out = _out(cfg)
    report = pl.run_pipeline(cfg, out, cfg.threads)
    _emit({"all_pass": report["all_pass"], "pass": report["pass"],
           "offset_check": report["sync"]["offset_check"]})
    return 0


COMMANDS = {"simulate": cmd_simulate, "correlate": cmd_correlate, "find-peak": cmd_find_peak, "fit": cmd_fit,
            "g2": cmd_g2, "sync": cmd_sync, "verify-delay": cmd_verify_delay, "tomo": cmd_tomo,
            "pipeline": cmd_pipeline}


def _report_error(exc: Exception, code: int, as_json: bool) -> int:
    if as_json:
        payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        stages = getattr(exc, "stages", None)
        if stages is not None:
            payload["stages"] = stages
        print(json.dumps(payload, default=pl._json_default), file=sys.stderr)
    else:
        print(f"chronon: {type(exc).__name__}: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json-errors" in argv
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        return _report_error(exc, 2, as_json)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load(args)
        return COMMANDS[args.command](args, cfg)
    except ANALYSIS_ERRORS as exc:
        return _report_error(exc, 1, args.json_errors)
    except USAGE_ERRORS as exc:
        return _report_error(exc, 2, args.json_errors)


if __name__ == "__main__":
    sys.exit(main())
