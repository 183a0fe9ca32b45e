"""Train one model per lambda of the standard set and write the checkpoints.

    python3 scripts/train_lambdas.py --kind joint [--vpct] --steps 500 --out checkpoints
"""
import argparse
import os

import torch

from vpnc.backbone import LAMBDAS
from vpnc.experiment import DESK_MODEL
from vpnc.harness import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--kind", default="joint", choices=("factorized", "hyperprior", "joint", "reference"))
    ap.add_argument("--vpct", action="store_true")
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lambdas", type=float, nargs="+", default=list(LAMBDAS))
    ap.add_argument("--out", default="checkpoints")
    args = ap.parse_args()
    torch.set_num_threads(1)
    os.makedirs(args.out, exist_ok=True)
    tag = args.kind + ("_vpct" if args.vpct else "")
    for lam in args.lambdas:
        cfg = TrainConfig(lam=lam, max_steps=args.steps, lr=args.lr, seed=args.seed, kind=args.kind,
                          vpct=args.vpct, synthetic_count=32, model=dict(DESK_MODEL))
        path = os.path.join(args.out, f"{tag}_{lam:g}.ckpt")
        res = train(cfg, checkpoint=path, log_path=path.replace(".ckpt", ".jsonl"))
        v = res.validation
        print(f"{path}: BPI {v.bpi:.0f}  V-PSNR {v.v_psnr:.3f} dB  V-SSIM {v.v_ssim:.4f}", flush=True)


if __name__ == "__main__":
    main()
