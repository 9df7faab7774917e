"""Run the desk-scale ablation ladder and print the table with wall-clock time."""

from __future__ import annotations

import argparse
import logging
import time
from pathlib import Path

import torch

from crossuda.config import load_config
from crossuda.pipeline import run_ablation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"))
    ap.add_argument("--run-dir", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    start = time.time()
    run_dir = Path(args.run_dir)
    run_ablation(load_config(args.config), run_dir)
    print((run_dir / "ablation.md").read_text())
    print(f"wall clock: {(time.time() - start) / 60:.1f} min")


if __name__ == "__main__":
    main()
