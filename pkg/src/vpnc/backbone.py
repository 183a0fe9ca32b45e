"""Autoencoder and canonical entropy-model pieces of the viewport codec."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensor import MASK_SENTINEL, ShapeError, masked_attention

SIGMA_MIN = 1e-4
P_MIN = 2.0 ** -16
DOWNSAMPLE = 16
# pixels are centered on this value before g_a and after g_s
PIXEL_OFFSET = 0.5
# init gain of g_a's last layer (and 1/gain on g_s's first) so that latents
# start well above the unit quantization step
LATENT_GAIN = 16.0

MODEL_KINDS = ("factorized", "hyperprior", "joint", "reference")
LAMBDAS = (0.0018, 0.0035, 0.0075, 0.013, 0.025, 0.048)


@dataclass
class CodecConfig:
    kind: str = "joint"
    N: int = 192                 # transform width
    M: int = 192                 # latent channels C_y
    hyper_channels: int = 128    # hyper-latent channels
    hyper_features: int = 192    # theta_h channels
    context_channels: int = 192  # theta_c channels
    reference_channels: int = 64
    reference_dim: int = 64
    fusion_hidden: int = 384
    vpct: bool = False
    vpct_layers: int = 2
    vpct_heads: int = 4
    vpct_dim: int = 192
    vpct_global: int = 64        # C_g
    max_views: int = 64
    viewport: tuple = (256, 256)  # (W_vp, H_vp)
    lam: float = 0.013
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        self.viewport = tuple(int(v) for v in self.viewport)
        W, H = self.viewport
        if W % DOWNSAMPLE or H % DOWNSAMPLE:
            raise ValueError(f"viewport {W}x{H} must be divisible by {DOWNSAMPLE}; pad the viewport")
        if self.has_hyper and (W % (4 * DOWNSAMPLE) or H % (4 * DOWNSAMPLE)):
            raise ValueError(f"hyperprior models need viewport sides divisible by {4 * DOWNSAMPLE}, got {W}x{H}")

    @property
    def latent_hw(self) -> tuple[int, int]:
        return self.viewport[1] // DOWNSAMPLE, self.viewport[0] // DOWNSAMPLE

    @property
    def has_hyper(self) -> bool:
        return self.kind != "factorized"

    @property
    def has_context(self) -> bool:
        return self.kind in ("joint", "reference")

    @property
    def autoregressive(self) -> bool:
        return self.has_context or self.vpct

    def architecture(self) -> dict:
        """Everything that fixes parameter shapes and semantics (no seed, no lambda)."""
        d = asdict(self)
        for k in ("lam", "seed", "extra"):
            d.pop(k)
        d["viewport"] = list(self.viewport)
        return d

    def to_json(self) -> str:
        d = asdict(self)
        d["viewport"] = list(self.viewport)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str) -> "CodecConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def conv(cin, cout, k=5, stride=2):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def deconv(cin, cout, k=5, stride=2):
    return nn.ConvTranspose2d(cin, cout, k, stride=stride, padding=k // 2, output_padding=stride - 1)


class AnalysisTransform(nn.Module):
    """g_a: four stride-2 5x5 convolutions with leaky ReLU in between."""

    def __init__(self, N, M):
        super().__init__()
        self.net = nn.Sequential(
            conv(3, N), nn.LeakyReLU(),
            conv(N, N), nn.LeakyReLU(),
            conv(N, N), nn.LeakyReLU(),
            conv(N, M),
        )

    def forward(self, x):
        H, W = x.shape[-2:]
        if H % DOWNSAMPLE or W % DOWNSAMPLE:
            raise ShapeError(f"g_a: input {H}x{W} not divisible by {DOWNSAMPLE}; pad the viewport first")
        return self.net(x - PIXEL_OFFSET)


class SynthesisTransform(nn.Module):
    def __init__(self, N, M):
        super().__init__()
        self.M = M
        self.net = nn.Sequential(
            deconv(M, N), nn.LeakyReLU(),
            deconv(N, N), nn.LeakyReLU(),
            deconv(N, N), nn.LeakyReLU(),
            deconv(N, 3),
        )

    def forward(self, y_hat):
        if y_hat.shape[-3] != self.M:
            raise ShapeError(f"g_s: expected {self.M} latent channels, got {y_hat.shape[-3]}")
        x = self.net(y_hat) + PIXEL_OFFSET
        # clamping while training would zero the gradient of every out-of-range pixel
        return x if self.training else x.clamp(0.0, 1.0)


class HyperAnalysis(nn.Module):
    def __init__(self, M, Z):
        super().__init__()
        self.net = nn.Sequential(
            conv(M, M, k=3, stride=1), nn.LeakyReLU(),
            conv(M, M), nn.LeakyReLU(),
            conv(M, Z),
        )

    def forward(self, y):
        return self.net(y)


class HyperSynthesis(nn.Module):
    def __init__(self, Z, M, out):
        super().__init__()
        self.net = nn.Sequential(
            deconv(Z, M), nn.LeakyReLU(),
            deconv(M, M), nn.LeakyReLU(),
            conv(M, out, k=3, stride=1),
        )

    def forward(self, z_hat):
        return self.net(z_hat)


def round_half_away(x):
    """Round to nearest integer, ties away from zero (torch or numpy)."""
    if isinstance(x, torch.Tensor):
        return torch.sign(x) * torch.floor(x.abs() + 0.5)
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(y: torch.Tensor, mode: str, mean: torch.Tensor | None = None,
             generator: torch.Generator | None = None) -> torch.Tensor:
    """``train``: additive U(-1/2, 1/2) noise. ``infer``: mean-removed rounding."""
    if mode == "train":
        u = torch.rand(y.shape, generator=generator, dtype=y.dtype, device=y.device) - 0.5
        return y + u
    if mode != "infer":
        raise ValueError(f"unknown quantizer mode {mode!r}")
    if mean is None:
        return round_half_away(y)
    return round_half_away(y - mean) + mean


def std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


def gaussian_likelihood(y_hat, mu, sigma, floor: bool = True):
    """Probability mass of the unit bin around ``y_hat`` under N(mu, sigma^2)."""
    sigma = sigma.clamp_min(SIGMA_MIN)
    v = (y_hat - mu).abs()
    p = std_normal_cdf((0.5 - v) / sigma) - std_normal_cdf((-0.5 - v) / sigma)
    return p.clamp_min(P_MIN) if floor else p


def rate_bits(p: torch.Tensor) -> torch.Tensor:
    return -torch.log2(p).sum()


class FactorizedDensity(nn.Module):
    """Per-channel learned monotone CDF (1 -> 3 -> 3 -> 1 filters).

    ``cdf(x) = sigmoid(f(x))`` where ``f`` is a composition of affine maps with
    softplus-positive matrices and tanh-gated residual nonlinearities, so it
    is non-decreasing in ``x``.
    """

    def __init__(self, channels: int, filters=(3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """``x`` is (C, 1, L); returns logits of the CDF with the same shape."""
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            x = torch.matmul(F.softplus(m).to(x.dtype), x) + b.to(x.dtype)
            if i < len(self.factors):
                x = x + torch.tanh(self.factors[i].to(x.dtype)) * torch.tanh(x)
        return x

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))

    def _per_channel(self, y: torch.Tensor) -> torch.Tensor:
        # (B, C, H, W) -> (C, 1, B*H*W)
        if y.shape[1] != self.channels:
            raise ShapeError(f"factorized density: expected {self.channels} channels, got {y.shape[1]}")
        return y.transpose(0, 1).reshape(self.channels, 1, -1)

    def likelihood(self, y_hat: torch.Tensor, floor: bool = True) -> torch.Tensor:
        flat = self._per_channel(y_hat)
        upper = self.logits(flat + 0.5)
        lower = self.logits(flat - 0.5)
        sign = -torch.sign(upper + lower).detach()
        p = (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()
        if floor:
            p = p.clamp_min(P_MIN)
        B, C, H, W = y_hat.shape
        return p.reshape(C, B, H, W).transpose(0, 1)

    def pmf_table(self, lo: int, hi: int) -> np.ndarray:
        """float64 ``(C, hi - lo + 1)`` masses of each integer in ``[lo, hi]`` (unfloored)."""
        k = torch.arange(lo, hi + 1, dtype=torch.float64)
        x = k.expand(self.channels, 1, -1)
        with torch.no_grad():
            upper = self.logits(x + 0.5)
            lower = self.logits(x - 0.5)
            sign = -torch.sign(upper + lower)
            p = (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()
        return p[:, 0, :].numpy()


def causal_kernel_mask(k: int) -> torch.Tensor:
    """1 at taps strictly before the center in raster order, 0 elsewhere."""
    m = torch.zeros(k, k)
    c = k // 2
    m[:c, :] = 1
    m[c, :c] = 1
    return m


class ContextModel(nn.Module):
    """Masked 5x5 convolution over the quantized latent (spatial-only causal mask).

    The center tap and every raster-later tap are zeroed for all channel pairs,
    so features at ``n`` read only positions strictly before ``n``.
    """

    def __init__(self, M, out, k=5):
        super().__init__()
        self.k = k
        self.conv = nn.Conv2d(M, out, k, padding=k // 2)
        self.register_buffer("mask", causal_kernel_mask(k)[None, None], persistent=False)

    def weight(self):
        return self.conv.weight * self.mask.to(self.conv.weight.dtype)

    def forward(self, y_hat):
        return F.conv2d(y_hat, self.weight(), self.conv.bias, padding=self.k // 2)

    def at(self, y_hat, r, c):
        """Features at a single position; ``y_hat`` is (B, M, H, W)."""
        p = self.k // 2
        padded = F.pad(y_hat, (p, p, p, p))
        window = padded[:, :, r: r + self.k, c: c + self.k]
        return F.conv2d(window, self.weight(), self.conv.bias)[:, :, 0, 0]


class ReferenceLite(nn.Module):
    """Causal single-head attention from each position's context features over
    all raster-earlier latent positions.

    Position 0 has no keys and returns a learned default vector.
    """

    def __init__(self, M, ctx, dim, out):
        super().__init__()
        self.q = nn.Linear(ctx, dim)
        self.k = nn.Linear(M, dim)
        self.v = nn.Linear(M, out)
        self.default = nn.Parameter(torch.zeros(out))

    @staticmethod
    def strict_mask(n: int, dtype=torch.float32) -> torch.Tensor:
        q = torch.arange(n)[:, None]
        k = torch.arange(n)[None, :]
        return torch.where(k < q, 0.0, MASK_SENTINEL).to(dtype)

    def forward(self, y_hat, ctx):
        B, M, H, W = y_hat.shape
        n = H * W
        tokens = y_hat.flatten(2).transpose(1, 2)
        queries = ctx.flatten(2).transpose(1, 2)
        out = masked_attention(self.q(queries), self.k(tokens), self.v(tokens),
                               self.strict_mask(n, y_hat.dtype))
        first = torch.zeros(n, 1, dtype=torch.bool, device=out.device)
        first[0] = True
        out = torch.where(first, self.default.to(out.dtype), out)
        return out.transpose(1, 2).reshape(B, -1, H, W)

    def at(self, y_hat, ctx_n, n):
        """``ctx_n``: (B, ctx) features at raster position ``n``."""
        B = y_hat.shape[0]
        if n == 0:
            return self.default.to(y_hat.dtype).expand(B, -1)
        tokens = y_hat.flatten(2).transpose(1, 2)[:, :n]
        q = self.q(ctx_n)[:, None]
        return masked_attention(q, self.k(tokens), self.v(tokens))[:, 0]
