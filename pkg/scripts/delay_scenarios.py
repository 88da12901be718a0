"""Run the two fiber-insertion scenarios and tabulate the shifts.

    python scripts/delay_scenarios.py --out out/scenarios
"""
from __future__ import annotations

import argparse
from pathlib import Path

from chronon.config import load_config
from chronon.pipeline import run_pipeline

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("out/scenarios"))
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("configs", nargs="*", default=[CONFIGS / "delay_4p48ns.ini", CONFIGS / "delay_0p30ns.ini"])
    args = ap.parse_args()
    print(f"{'scenario':<16}{'inserted':>10}{'one-way':>12}{'round-trip':>12}{'ratio':>16}{'offset err':>12}")
    for path in args.configs:
        cfg = load_config(path)
        rep = run_pipeline(cfg, args.out / cfg.run.label, args.threads)
        v = rep["sync"]["delay_verification"]
        err = rep["sync"]["offset_check"]["compensated_error_ps"]
        print(f"{cfg.run.label:<16}{cfg.sync.verify_inserted_delay_ps:>10.0f}{v['one_way_shift_ps']:>12.1f}"
              f"{v['round_trip_shift_ps']:>12.1f}{v['ratio']:>9.4f} +/- {v['ratio_err']:.3f}{err:>12.1f}")


if __name__ == "__main__":
    main()
