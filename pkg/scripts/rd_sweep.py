"""RD table and plot for a set of checkpoints on held-out synthetic images.

    python3 scripts/rd_sweep.py checkpoints/*.ckpt --csv rd.csv --svg rd.svg
"""
import argparse

import torch

from vpnc.data import load_dataset, synthetic_dataset
from vpnc.harness import rd_sweep, rows_to_csv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("checkpoints", nargs="+")
    ap.add_argument("--dataset", default=None, help="directory of PNG ERPs (default: 4 synthetic images)")
    ap.add_argument("--csv", default="rd.csv")
    ap.add_argument("--svg", default=None)
    args = ap.parse_args()
    torch.set_num_threads(1)
    images = load_dataset(args.dataset) if args.dataset else synthetic_dataset(4, 128, seed=1000)
    rows, _ = rd_sweep(args.checkpoints, images, args.csv, args.svg)
    print(rows_to_csv(rows), end="")


if __name__ == "__main__":
    main()
