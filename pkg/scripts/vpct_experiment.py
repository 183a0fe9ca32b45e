"""Paired training of the joint codec with and without VPCT over the lambda set.

Writes results/vpct_experiment.{json,csv,svg}. About 20 minutes on one CPU core
with the defaults.

    python3 scripts/vpct_experiment.py [--steps 500] [--out results]
"""
import argparse
import os
import sys

import torch

from vpnc.experiment import PairedConfig, run_paired, to_json
from vpnc.harness import RDPoint, rd_plot_svg
from vpnc.tensor import atomic_write


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lambdas", type=float, nargs="+", default=None)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = PairedConfig(steps=args.steps, seed=args.seed)
    if args.lambdas:
        cfg.lambdas = tuple(args.lambdas)
    res = run_paired(cfg, log=lambda m: print(m, flush=True))
    os.makedirs(args.out, exist_ok=True)
    atomic_write(os.path.join(args.out, "vpct_experiment.json"), to_json(res).encode())
    atomic_write(os.path.join(args.out, "vpct_experiment.csv"), res["csv"].encode())
    atomic_write(os.path.join(args.out, "vpct_experiment.svg"), rd_plot_svg([RDPoint(**p) for p in res["points"]]))
    s = res["summary"]
    print(f"viewport 1 change      {100 * s['viewport1_change']:+.2f}%")
    print(f"viewports 2..6 change  {100 * s['later_change']:+.2f}%")
    print(f"per viewport           {[round(100 * c, 2) for c in s['per_viewport_change']]}")
    print(f"VPCT dominates at      {s['dominance_count']} of {len(s['dominates'])} lambdas")
    print(f"redundancy lower at    {s['redundancy_lower_count']} of {len(s['dominates'])} lambdas")
    return 0 if (s["pass_viewport1"] and s["pass_later"] and s["pass_dominance"]) else 1


if __name__ == "__main__":
    sys.exit(main())
