"""Run the four ablation variants on the desk benchmark and print the table."""

import argparse
import logging
from pathlib import Path

from tsbn.cli import run_ablation
from tsbn.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.yaml")
    p.add_argument("--output", type=Path, default=ROOT / "runs" / "desk-ablation")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    rows = run_ablation(load_config(args.config), args.output)
    print((args.output / "ablation.md").read_text())
    for r in rows:
        print(f"{r['label']:18s} final TP share of task 1: {r['collapse']:.2f}")


if __name__ == "__main__":
    main()
