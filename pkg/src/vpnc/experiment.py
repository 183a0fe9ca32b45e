"""Paired desk-scale comparison of the joint codec with and without VPCT."""
from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import LAMBDAS
from .data import synthetic_dataset
from .codec import coding_model
from .harness import RDPoint, TrainConfig, monotonicity_flags, redundancy_maps, rows_to_csv, train

DESK_MODEL = dict(N=48, M=48, hyper_channels=32, hyper_features=48, context_channels=48, fusion_hidden=96,
                  vpct_dim=64, vpct_global=32, vpct_heads=4)


@dataclass
class PairedConfig:
    lambdas: tuple = LAMBDAS
    steps: int = 500
    batch_size: int = 4
    lr: float = 1e-3
    lr_drop: float = 0.8
    seed: int = 0
    train_images: int = 32
    eval_images: int = 4
    erp_height: int = 128
    viewport: tuple = (64, 64)
    kind: str = "joint"
    model: dict = field(default_factory=lambda: dict(DESK_MODEL))

    def train_config(self, lam: float, vpct: bool) -> TrainConfig:
        return TrainConfig(lam=lam, batch_size=self.batch_size, max_steps=self.steps, lr=self.lr, seed=self.seed,
                           kind=self.kind, vpct=vpct, erp_height=self.erp_height, viewport=self.viewport,
                           model=dict(self.model), val_count=0, lr_drop=self.lr_drop)


def source_digest() -> str:
    """SHA-256 over the package sources, so a recorded run can be matched to the code."""
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode() + b"\0" + f.read_bytes())
    return h.hexdigest()


def viewport_bits(p: RDPoint) -> np.ndarray:
    """Mean payload bits (z + y) of each viewport in coding order."""
    return np.asarray(p.viewport_y_bits) + np.asarray(p.viewport_z_bits)


def later_redundancy(model, images, plan) -> float:
    """Mean |redundancy map| over viewports 2..V of ``images``."""
    cm = coding_model(model)
    vals = [np.abs(m).mean() for erp in images for m in redundancy_maps(cm, erp, plan)[1:]]
    return float(np.mean(vals))


def summarize(pairs: list[tuple[RDPoint, RDPoint]]) -> dict:
    """Directional statistics over (without VPCT, with VPCT) point pairs."""
    off = np.stack([viewport_bits(a) for a, _ in pairs])
    on = np.stack([viewport_bits(b) for _, b in pairs])
    first_change = float(on[:, 0].sum() / off[:, 0].sum() - 1.0)
    later_off = float(off[:, 1:].mean())
    later_on = float(on[:, 1:].mean())
    per_view = (on.sum(axis=0) / off.sum(axis=0) - 1.0).tolist()
    dominated = [bool(b.bpi <= a.bpi and b.v_psnr >= a.v_psnr) for a, b in pairs]
    return {
        "viewport1_change": first_change,
        "later_mean_bits_off": later_off,
        "later_mean_bits_on": later_on,
        "later_change": later_on / later_off - 1.0,
        "per_viewport_change": per_view,
        "dominates": dominated,
        "dominance_count": int(sum(dominated)),
        "pass_viewport1": abs(first_change) <= 0.02,
        "pass_later": later_on < later_off,
        "pass_dominance": sum(dominated) >= 4,
    }


def run_paired(cfg: PairedConfig, log=print) -> dict:
    images = synthetic_dataset(cfg.train_images, cfg.erp_height, seed=cfg.seed + 1)
    held_out = synthetic_dataset(cfg.eval_images, cfg.erp_height, seed=cfg.seed + 1000)
    pairs, points, redundancy = [], [], []
    t0 = time.time()
    for lam in cfg.lambdas:
        pair, red = [], []
        for vpct in (False, True):
            tc = cfg.train_config(lam, vpct)
            res = train(tc, images=images, val_images=held_out)
            p = res.validation
            pair.append(p)
            points.append(p)
            red.append(later_redundancy(res.model, held_out, tc.plan))
            log(f"lambda={lam:<7g} vpct={int(vpct)}  bpi={p.bpi:8.1f}  v_psnr={p.v_psnr:7.3f}  "
                f"v_ssim={p.v_ssim:.4f}  viewport bits={np.round(viewport_bits(p)).astype(int).tolist()}  "
                f"[{time.time() - t0:.0f}s]")
        pairs.append(tuple(pair))
        redundancy.append(red)
    summary = summarize(pairs)
    summary["later_redundancy"] = redundancy
    summary["redundancy_lower_count"] = int(sum(on <= off for off, on in redundancy))
    flags = monotonicity_flags(points)
    rows = [{"model": p.model, "vpct": int(p.vpct), "lambda": p.lam, "bpi": p.bpi, "v_psnr": p.v_psnr,
             "v_ssim": p.v_ssim, "status": flags.get(i, "ok")} for i, p in enumerate(points)]
    rows.sort(key=lambda r: (r["lambda"], r["vpct"]))
    return {"config": asdict(cfg), "source_digest": source_digest(), "points": [p.to_dict() for p in points], "summary": summary,
            "csv": rows_to_csv(rows), "seconds": time.time() - t0}


def to_json(result: dict) -> str:
    return json.dumps(result, indent=2, default=float)


def load_current(path, cfg: PairedConfig) -> dict | None:
    """A recorded result at ``path`` if it was produced by this code and config, else None."""
    try:
        with open(path) as fh:
            rec = json.load(fh)
    except (OSError, ValueError):
        return None
    same_cfg = json.loads(to_json({"c": asdict(cfg)}))["c"] == rec.get("config")
    return rec if same_cfg and rec.get("source_digest") == source_digest() else None
