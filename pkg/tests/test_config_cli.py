import json

import numpy as np
import pytest

from chronon.cli import main
from chronon.config import ConfigError, RunConfig, load_config, section_help
from chronon.timetags import TagStream, write_stream

SMALL = """
[run]
seed = 5
duration_s = 2
[source]
pair_prob = 0.01
[clock]
offset_s = 0.25
[tomo]
duration_s = 0.002
n_resamples = 0
restarts = 1
window_bins = 16
"""


def test_defaults_roundtrip_through_ini():
    cfg = RunConfig()
    again = load_config(text=cfg.to_ini())
    assert again == cfg


def test_values_parsed_by_type():
    cfg = load_config(text="[run]\nseed = 9\nwrite_tags = yes\n[link]\ndetector_delay_ps = 1, 2, 3\n"
                           "[search]\ncoarse_bin_ps = 1e9\n")
    assert cfg.run.seed == 9 and cfg.run.write_tags is True
    assert cfg.link.detector_delay_ps == (1.0, 2.0, 3.0)
    assert cfg.search.coarse_bin_ps == 10**9


@pytest.mark.parametrize("text", ["[nope]\na = 1\n", "[run]\nsede = 1\n", "[run]\nseed = one\n",
                                  "[source]\nfss_omega_rad_per_ps = 1\n", "[sync]\nkappa_ps = maybe\n",
                                  "[run]\nduration_s = -1\n"])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        load_config(text=text)


def test_section_help_lists_everything():
    text = section_help()
    for sec in ("[run]", "[source]", "[link]", "[clock]", "[sync]", "[g2]", "[tomo]"):
        assert sec in text


def test_shipped_configs_load():
    from pathlib import Path
    cfgs = sorted(Path(__file__).resolve().parents[1].joinpath("configs").glob("*.ini"))
    assert len(cfgs) >= 4
    for p in cfgs:
        load_config(p)


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["simulate", "--bogus"]) == 2
    assert main(["frobnicate"]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nsede = 1\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--threads", "0", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "sede" in err


def test_json_errors(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "missing.ini"), "--json-errors"]) == 2
    payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert payload["exit_code"] == 2 and payload["error"] == "ConfigError"


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "pipeline" in capsys.readouterr().out


def test_no_peak_is_analysis_error(tmp_path, capsys):
    rng = np.random.default_rng(0)
    t = np.sort(rng.integers(0, 10**12, 4000)).astype(np.uint64)
    ch = rng.integers(0, 2, t.size).astype(np.uint16)
    write_stream(TagStream.from_arrays(t, ch, 2), tmp_path / "noise.qtt")
    code = main(["find-peak", str(tmp_path / "noise.qtt"), "--a", "1", "--b", "0", "--window-ps",
                 str(-5 * 10**11), str(5 * 10**11), "--out", str(tmp_path), "--json-errors"])
    assert code == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "NoPeakFoundError"


def test_cli_chain_simulate_correlate_fit_sync(tmp_path, capsys):
    cfg = tmp_path / "small.ini"
    cfg.write_text(SMALL)
    common = ["--config", str(cfg), "--out", str(tmp_path), "--threads", "1"]
    assert main(["simulate", *common]) == 0
    truth = json.loads((tmp_path / "ground_truth.json").read_text())
    tags = str(tmp_path / "run.qtt")
    ow = int(truth["one_way_peak_start_ps"])
    rt = int(truth["round_trip_peak_start_ps"])
    assert main(["correlate", tags, "--a", "1", "--b", "0", "--start-ps", str(ow - 3008), "--end-ps",
                 str(ow + 6992), "--name", "ow", *common]) == 0
    assert main(["correlate", tags, "--a", "2", "--b", "0", "--start-ps", str(rt - 3008), "--end-ps",
                 str(rt + 6992), "--name", "rt", *common]) == 0
    assert main(["fit", str(tmp_path / "ow.csv"), "--name", "fit_ow", *common]) == 0
    assert main(["fit", str(tmp_path / "rt.csv"), "--name", "fit_rt", *common]) == 0
    capsys.readouterr()
    assert main(["sync", str(tmp_path / "fit_ow.json"), str(tmp_path / "fit_rt.json"), "--kappa-ps", "137",
                 *common]) == 0
    rep = json.loads((tmp_path / "sync_report.json").read_text())
    # 0.25 s offset recovered to well under a nanosecond with a nominal kappa
    assert abs(rep["compensated_fine_ps"] - 0.25e12) < 200
    assert "compensated" in capsys.readouterr().out


def test_cli_verify_delay(tmp_path, capsys):
    before = {"tau_one_way_ps": 1000.0, "tau_one_way_err_ps": 1.0, "tau_round_trip_ps": 5000.0,
              "tau_round_trip_err_ps": 1.0}
    after = dict(before, tau_one_way_ps=5480.0, tau_round_trip_ps=13960.0)
    (tmp_path / "b.json").write_text(json.dumps(before))
    (tmp_path / "a.json").write_text(json.dumps(after))
    assert main(["verify-delay", str(tmp_path / "b.json"), str(tmp_path / "a.json"), "--out", str(tmp_path)]) == 0
    out = json.loads((tmp_path / "delay_verification.json").read_text())
    assert out["ratio"] == pytest.approx(2.0) and out["passed"]


def test_cli_tomo_from_manifest(tmp_path):
    cfg = tmp_path / "small.ini"
    cfg.write_text(SMALL)
    common = ["--config", str(cfg), "--out", str(tmp_path), "--threads", "1"]
    assert main(["simulate", "--kind", "tomo", *common]) == 0
    assert (tmp_path / "tomo_manifest.ini").is_file()
    assert main(["tomo", str(tmp_path / "tomo_manifest.ini"), *common]) == 0
    assert (tmp_path / "tomo.csv").is_file()
