#!/usr/bin/env python3
"""Train the shipped overfit configuration and print the resulting metrics."""

import argparse
import json
import pathlib
import sys

from bevfuse.config import load_config
from bevfuse.pipeline import train_run

ROOT = pathlib.Path(__file__).resolve().parent.parent


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "overfit.yaml"))
    ap.add_argument("--out", default="runs/overfit")
    args = ap.parse_args()
    report = train_run(load_config(args.config), args.out)
    print(json.dumps({k: report[k] for k in
                      ("initial_loss", "final_loss", "ap")}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
