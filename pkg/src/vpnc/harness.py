"""Training, evaluation and rate-distortion analysis."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .backbone import CodecConfig, rate_bits
from .bitstream import HEADER_SIZE
from .codec import (
    CodedImage,
    coding_model,
    compress_erp,
    estimate_viewport_bits,
    payload_body_bits,
    reconstruct_erp,
)
from .data import InputError, load_dataset, png_bytes, synthetic_dataset
from .geometry import ExtractionPlan, FieldOfView, default_plan, extract_all, plan_coverage
from .model import ViewportCodec, load_model, save_model
from .tensor import NonFiniteError, ShapeError, atomic_write, set_deterministic

# rates are normalized per viewport pixel and MSE is taken on the 0..255 scale
# during training, so that the usual lambda set spans a useful range
DISTORTION_SCALE = 255.0 ** 2

# V-PSNR of an exact reconstruction
EXACT = math.inf


# -- loss and metrics --------------------------------------------------------------


def loss(x: torch.Tensor, x_hat: torch.Tensor, rate_y, rate_z, lam: float) -> torch.Tensor:
    """``R_y + R_z + lam * MSE(x, x_hat)``.

    Rates are in bits (any consistent normalization); the distortion is the
    mean squared error of the inputs as given.
    """
    rate_y = torch.as_tensor(rate_y, dtype=x.dtype)
    rate_z = torch.as_tensor(rate_z, dtype=x.dtype)
    if (rate_y < 0).any() or (rate_z < 0).any():
        raise ValueError(f"rates must be non-negative, got R_y={float(rate_y)}, R_z={float(rate_z)}")
    return rate_y + rate_z + lam * torch.mean((x - x_hat) ** 2)


def _eval_viewports(erp, plan):
    return np.stack([vp.pixels for vp in extract_all(erp, plan)])


def _eval_plan(erp, plan):
    return plan if plan is not None else default_plan(erp.shape[0])


def _check_pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(mse: float) -> float:
    return EXACT if mse == 0 else 10.0 * math.log10(1.0 / mse)


def v_psnr(original: np.ndarray, reconstructed: np.ndarray, plan: ExtractionPlan | None = None) -> float:
    """PSNR of the MSE pooled over every evaluation-viewport pixel.

    Returns :data:`EXACT` (``inf``) for an exact match.
    """
    a, b = _check_pair(original, reconstructed)
    plan = _eval_plan(a, plan)
    mse = float(np.mean((_eval_viewports(a, plan) - _eval_viewports(b, plan)) ** 2))
    return psnr(mse)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of two ``(H, W, C)`` images on a [0, 1] scale.

    Gaussian 11x11 window (sigma 1.5), K1=0.01, K2=0.03, population
    statistics, only windows fully inside the image are averaged.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    pad = 5
    if a.shape[0] <= 2 * pad or a.shape[1] <= 2 * pad:
        raise ShapeError(f"SSIM needs images larger than 11x11, got {a.shape[:2]}")

    def filt(t):
        return gaussian_filter(t, 1.5, truncate=3.5)

    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        ux, uy = filt(x), filt(y)
        vx = filt(x * x) - ux * ux
        vy = filt(y * y) - uy * uy
        vxy = filt(x * y) - ux * uy
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        vals.append(s[pad:-pad, pad:-pad].mean())
    return float(np.mean(vals))


def v_ssim(original: np.ndarray, reconstructed: np.ndarray, plan: ExtractionPlan | None = None) -> float:
    """SSIM averaged over the evaluation viewports."""
    a, b = _check_pair(original, reconstructed)
    plan = _eval_plan(a, plan)
    va, vb = _eval_viewports(a, plan), _eval_viewports(b, plan)
    return float(np.mean([ssim(p, q) for p, q in zip(va, vb)]))


def bpi(stream: bytes) -> int:
    """Bits per 360-degree image: every byte of the stream, header included."""
    return 8 * len(stream)


# -- redundancy maps ----------------------------------------------------------------


def redundancy_map(y: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> np.ndarray:
    """Channel-averaged ``(y - mu) / sigma^2`` for one viewport latent ``(1|.., M, h, w)``."""
    if not (y.shape == mu.shape == sigma.shape):
        raise ShapeError(f"redundancy map: shapes {tuple(y.shape)}, {tuple(mu.shape)}, {tuple(sigma.shape)}")
    r = (y - mu) / sigma ** 2
    r = r.detach().double().numpy()
    return r.reshape(-1, *r.shape[-3:]).mean(axis=(0, 1))


def redundancy_png(rmap: np.ndarray) -> bytes:
    """Grayscale PNG of ``|map|`` scaled so the largest magnitude is white."""
    m = np.abs(rmap)
    top = m.max()
    return png_bytes(m / top if top > 0 else m)


def redundancy_maps(model: ViewportCodec, erp: np.ndarray, plan: ExtractionPlan,
                    coded: CodedImage | None = None) -> list[np.ndarray]:
    """Maps for every viewport of one image using the coder's (mu, sigma).

    ``model`` must be the float64 coding copy.
    """
    if not model.uses_gaussian:
        raise ValueError("redundancy maps need a Gaussian entropy model")
    if coded is None:
        coded = compress_erp(model, erp, plan)
    x = torch.from_numpy(np.stack([vp.pixels.transpose(2, 0, 1) for vp in extract_all(erp, plan)])).double()
    with torch.no_grad():
        y = model.analyze(x)
    return [redundancy_map(y[i: i + 1], mu, sigma) for i, (mu, sigma) in enumerate(zip(coded.mu, coded.sigma))]


# -- training ------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lam: float = 0.013
    batch_size: int = 4
    epochs: int = 1
    max_steps: int | None = None
    lr: float = 1e-4
    seed: int = 0
    kind: str = "joint"
    vpct: bool = False
    dataset: str | None = None        # directory of PNG ERPs; None: synthetic images
    synthetic_count: int = 16
    erp_height: int = 128
    fov: tuple = (90.0, 90.0)
    viewport: tuple = (64, 64)
    model: dict = field(default_factory=dict)   # extra CodecConfig fields
    threads: int = 1
    log_every: int = 10
    val_count: int = 2
    clip_grad: float = 1.0
    lr_drop: float | None = None      # fraction of steps after which lr is cut 10x

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be a positive real, got {self.lam}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be >= 1")
        self.fov = tuple(float(f) for f in self.fov)
        self.viewport = tuple(int(v) for v in self.viewport)

    @property
    def plan(self) -> ExtractionPlan:
        return plan_coverage(FieldOfView(*self.fov), self.viewport)

    def codec_config(self) -> CodecConfig:
        return CodecConfig(kind=self.kind, vpct=self.vpct, viewport=self.viewport, lam=self.lam,
                           seed=self.seed, **self.model)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fov"], d["viewport"] = list(self.fov), list(self.viewport)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    model: ViewportCodec
    log: list[dict]
    validation: "RDPoint | None" = None


def _batch(images, idx, plan, rng):
    """(B, V, 3, H, W) float32 viewport groups; each image rolled by a random longitude."""
    groups = []
    for i in idx:
        erp = images[i]
        erp = np.roll(erp, int(rng.integers(erp.shape[1])), axis=1)
        groups.append(np.stack([vp.pixels.transpose(2, 0, 1) for vp in extract_all(erp, plan)]))
    return torch.from_numpy(np.stack(groups)).float()


def rd_terms(model: ViewportCodec, x: torch.Tensor, generator=None) -> dict:
    """Per-pixel rates and MSE for a batch of viewport groups."""
    out = model(x, generator=generator)
    npix = x.shape[0] * x.shape[1] * x.shape[-2] * x.shape[-1]
    r_y = rate_bits(out["y_likelihood"]) / npix
    r_z = rate_bits(out["z_likelihood"]) / npix if "z_likelihood" in out else torch.zeros((), dtype=x.dtype)
    return {"out": out, "bpp_y": r_y, "bpp_z": r_z, "mse": torch.mean((out["x_hat"] - x) ** 2)}


def train(cfg: TrainConfig, checkpoint: str | None = None, log_path: str | None = None,
          images: list | None = None, val_images: list | None = None) -> TrainResult:
    """Train one codec. Deterministic for fixed ``cfg.seed`` and ``cfg.threads``.

    Without ``images`` the training set comes from ``cfg.dataset`` or, if that
    is unset, from the synthetic generator. Validation images (by default
    ``cfg.val_count`` fresh synthetic ones) are coded for real after training
    and their RD point is stored in the checkpoint metadata.
    """
    set_deterministic(cfg.threads, cfg.seed)
    if images is None:
        images = load_dataset(cfg.dataset) if cfg.dataset else synthetic_dataset(
            cfg.synthetic_count, cfg.erp_height, seed=cfg.seed)
    if not images:
        raise InputError("empty training set")
    if val_images is None and cfg.val_count:
        val_images = synthetic_dataset(cfg.val_count, images[0].shape[0], seed=cfg.seed + 10_000)
    plan = cfg.plan
    model = ViewportCodec(cfg.codec_config())
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    per_epoch = max(1, math.ceil(len(images) / cfg.batch_size))
    total = cfg.epochs * per_epoch if cfg.max_steps is None else cfg.max_steps
    log: list[dict] = []
    lines: list[str] = []
    step, epoch = 0, 0
    t0 = time.time()
    while step < total:
        order = rng.permutation(len(images))
        acc = {"loss": 0.0, "bpp": 0.0, "mse": 0.0, "n": 0}
        for b in range(per_epoch):
            if step >= total:
                break
            idx = order[b * cfg.batch_size: (b + 1) * cfg.batch_size]
            if len(idx) < cfg.batch_size:
                idx = np.concatenate([idx, order[: cfg.batch_size - len(idx)]])
            if cfg.lr_drop is not None and step == int(cfg.lr_drop * total):
                for group in opt.param_groups:
                    group["lr"] = cfg.lr * 0.1
            x = _batch(images, idx, plan, rng)
            try:
                terms = rd_terms(model, x, gen)
            except NonFiniteError as exc:
                raise NonFiniteError(f"non-finite loss at batch {step} ({exc})") from None
            L = loss(x, terms["out"]["x_hat"], terms["bpp_y"], terms["bpp_z"], cfg.lam * DISTORTION_SCALE)
            if not torch.isfinite(L):
                raise NonFiniteError(f"non-finite loss at batch {step}")
            opt.zero_grad()
            L.backward()
            if cfg.clip_grad:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_grad)
            opt.step()
            bpp = float(terms["bpp_y"].detach() + terms["bpp_z"].detach())
            rec = {"step": step, "loss": L.item(), "rate_bits": bpp * x[0].numel() / 3,
                   "bpp": bpp, "mse": terms["mse"].item()}
            for k in ("loss", "bpp", "mse"):
                acc[k] += rec[k]
            acc["n"] += 1
            if step % cfg.log_every == 0 or step == total - 1:
                log.append(rec)
                lines.append(json.dumps(rec))
            step += 1
        n = max(acc.pop("n"), 1)
        rec = {"epoch": epoch, **{k: v / n for k, v in acc.items()}, "seconds": round(time.time() - t0, 2)}
        log.append(rec)
        lines.append(json.dumps(rec))
        epoch += 1
    if log_path:
        atomic_write(log_path, ("\n".join(lines) + "\n").encode())
    model.eval()
    validation = None
    if val_images:
        validation = evaluate(model, val_images, plan=plan, lam=cfg.lam)
    if checkpoint:
        extra = {"train": cfg.to_dict()}
        if validation is not None:
            extra["validation"] = validation.to_dict()
        save_model(checkpoint, model, extra)
    return TrainResult(model, log, validation)


# -- evaluation ------------------------------------------------------------------------


@dataclass
class RDPoint:
    model: str
    vpct: bool
    lam: float
    bpi: float
    v_psnr: float
    v_ssim: float
    viewport_y_bits: list = field(default_factory=list)   # mean per viewport, y payload bits
    viewport_z_bits: list = field(default_factory=list)
    estimate_bits: float = 0.0     # likelihood-based, summed over payloads, mean per image
    body_bits: float = 0.0         # range-coder bodies, mean per image

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImageResult:
    stream: bytes
    coded: CodedImage
    reconstruction: np.ndarray
    v_psnr: float
    v_ssim: float


def code_image(cmodel: ViewportCodec, erp: np.ndarray, plan: ExtractionPlan, lam: float | None = None,
               model_hash: bytes | None = None, eval_plan: ExtractionPlan | None = None) -> ImageResult:
    coded = compress_erp(cmodel, erp, plan, lam, model_hash)
    data = coded.to_bytes()
    rec = reconstruct_erp(coded, plan, erp.shape[:2])
    return ImageResult(data, coded, rec, v_psnr(erp, rec, eval_plan), v_ssim(erp, rec, eval_plan))


def evaluate(model: ViewportCodec, images, plan: ExtractionPlan | None = None, lam: float | None = None,
             eval_plan: ExtractionPlan | None = None) -> RDPoint:
    """Code every image for real and average BPI, V-PSNR and V-SSIM."""
    cfg = model.config
    if plan is None:
        plan = default_plan(images[0].shape[0]).with_dims(cfg.viewport)
    cmodel = coding_model(model)
    mhash = model.model_hash()
    bits, ps, ss, est, body = [], [], [], [], []
    yb, zb = [], []
    for erp in images:
        res = code_image(cmodel, erp, plan, lam if lam is not None else cfg.lam, mhash, eval_plan)
        bits.append(bpi(res.stream))
        ps.append(res.v_psnr)
        ss.append(res.v_ssim)
        records = res.coded.stream.records
        zb.append([8 * len(z) for z, _ in records])
        yb.append([8 * len(y) for _, y in records])
        est.append(sum(a + b for a, b in estimate_viewport_bits(cmodel, res.coded)))
        body.append(sum(payload_body_bits(z) + payload_body_bits(y) for z, y in records))
    return RDPoint(cfg.kind, cfg.vpct, float(lam if lam is not None else cfg.lam), float(np.mean(bits)),
                   float(np.mean(ps)), float(np.mean(ss)), np.mean(yb, axis=0).tolist(),
                   np.mean(zb, axis=0).tolist(), float(np.mean(est)), float(np.mean(body)))


def per_viewport_bits(stream: bytes) -> dict:
    """Bit accounting of one ``.vpnc`` stream: header, then per-viewport z/y payloads."""
    from .bitstream import Bitstream

    bs = Bitstream.from_bytes(stream)
    rows = [{"viewport": i, "z_bits": 8 * len(z), "y_bits": 8 * len(y), "record_bits": rb}
            for i, ((z, y), rb) in enumerate(zip(bs.records, bs.record_bits()))]
    return {"header_bits": 8 * HEADER_SIZE, "viewports": rows, "total_bits": bpi(stream)}


# -- sweeps ---------------------------------------------------------------------------

CSV_COLUMNS = ("model", "vpct", "lambda", "bpi", "v_psnr", "v_ssim", "status")


def _fmt(v):
    if isinstance(v, float):
        return "exact" if v == EXACT else f"{v:.6g}"
    return str(v)


def monotonicity_flags(points: list[RDPoint]) -> dict[int, str]:
    """Index -> description for points that break ``lambda up => bpi up, quality up``."""
    flags: dict[int, list[str]] = {}
    groups: dict[tuple, list[int]] = {}
    for i, p in enumerate(points):
        groups.setdefault((p.model, p.vpct), []).append(i)
    for idx in groups.values():
        idx = sorted(idx, key=lambda i: points[i].lam)
        for a, b in zip(idx, idx[1:]):
            pa, pb = points[a], points[b]
            for name in ("bpi", "v_psnr", "v_ssim"):
                if getattr(pb, name) < getattr(pa, name):
                    flags.setdefault(b, []).append(f"{name} below lambda={pa.lam:g}")
    return {i: "non-monotone: " + "; ".join(v) for i, v in flags.items()}


def rd_sweep(checkpoints: list[str], images: list[np.ndarray], csv_path: str | None = None,
             svg_path: str | None = None) -> tuple[list[dict], list[RDPoint]]:
    """Evaluate each checkpoint and emit one CSV row per checkpoint sorted by lambda.

    Missing or unreadable checkpoints keep a row whose status names the problem.
    """
    rows, points, pending = [], [], []
    for path in checkpoints:
        if not Path(path).is_file():
            pending.append(({"model": "", "vpct": "", "lambda": math.nan}, f"missing checkpoint {path}"))
            continue
        model, meta = load_model(path)
        p = evaluate(model, images)
        points.append(p)
    flags = monotonicity_flags(points)
    for i, p in enumerate(points):
        rows.append({"model": p.model, "vpct": int(p.vpct), "lambda": p.lam, "bpi": p.bpi, "v_psnr": p.v_psnr,
                     "v_ssim": p.v_ssim, "status": flags.get(i, "ok")})
    for base, status in pending:
        rows.append({**base, "bpi": "", "v_psnr": "", "v_ssim": "", "status": status})
    rows.sort(key=lambda r: (math.inf if r["lambda"] != r["lambda"] else r["lambda"], str(r["model"]),
                             str(r["vpct"])))
    if csv_path:
        atomic_write(csv_path, rows_to_csv(rows).encode())
    if svg_path and points:
        atomic_write(svg_path, rd_plot_svg(points))
    return rows, points


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        lam = r["lambda"]
        w.writerow([r["model"], r["vpct"], "" if lam != lam else _fmt(lam)] +
                   [_fmt(r[k]) for k in ("bpi", "v_psnr", "v_ssim")] + [r["status"]])
    return buf.getvalue()


def rd_plot_svg(points: list[RDPoint]) -> bytes:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    groups: dict[tuple, list[RDPoint]] = {}
    for p in points:
        groups.setdefault((p.model, p.vpct), []).append(p)
    for (name, vp), pts in sorted(groups.items()):
        pts = sorted(pts, key=lambda p: p.lam)
        ax.plot([p.bpi for p in pts], [p.v_psnr for p in pts], "o-",
                label=f"{name}{' + VPCT' if vp else ''}")
    ax.set_xlabel("bits per image")
    ax.set_ylabel("V-PSNR (dB)")
    ax.grid(alpha=0.3)
    ax.legend()
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", bbox_inches="tight")
    plt.close(fig)
    return buf.getvalue()
