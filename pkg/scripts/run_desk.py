"""Run the full method on the desk benchmark for every configured seed and print the aggregate."""

import argparse
import logging
import time
from pathlib import Path

from tsbn.cli import run_experiment
from tsbn.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.yaml")
    p.add_argument("--output", type=Path, default=ROOT / "runs" / "desk")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    t0 = time.perf_counter()
    agg = run_experiment(load_config(args.config), args.output)["aggregate"]
    print(f"wall time {time.perf_counter() - t0:.0f}s")
    for k, v in agg.items():
        print(f"{k:18s} mean {v['mean']:.4f}  variance {v['variance']:.6f}")


if __name__ == "__main__":
    main()
