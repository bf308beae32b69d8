"""Run a sweep from a YAML config and print the aggregate table.

    python scripts/run_experiment.py configs/desk.yaml --out artifacts/desk
"""
import argparse
import logging
import time

from mpsmra import experiment as ex
from mpsmra.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    t0 = time.perf_counter()
    out = ex.run_experiment(cfg, args.out)
    rows = ex.read_metrics(out / "metrics.csv")
    print(ex.format_table(ex.aggregate(rows)))
    print(f"wrote {out} in {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
