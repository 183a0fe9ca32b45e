"""Cross-viewport context: causal attention masks, the intra-/inter-view
transformer layers, and the fusion layer that turns local and global priors
into Gaussian parameters.

Mask indexing: rows are queries, columns are keys. A token sequence for the
viewport being coded is shifted right by one position (a learned start token
fills slot 0), so a query at raster position ``n`` that may see keys
``k <= n`` of its own viewport only ever reads latents strictly before ``n``.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import SIGMA_MIN
from .tensor import LN_EPS, MASK_SENTINEL, MultiHeadAttention, ShapeError, reset_parameters


def intra_allowed(n: int) -> np.ndarray:
    q = np.arange(n)[:, None]
    k = np.arange(n)[None, :]
    return k <= q


def cross_allowed(n: int, i: int) -> np.ndarray:
    q = np.arange(n)[:, None]
    k = np.arange((i + 1) * n)[None, :]
    return k <= q + i * n


def _additive(allowed: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.where(allowed, 0.0, MASK_SENTINEL)).to(dtype)


def build_intra_mask(n: int, dtype=torch.float32) -> torch.Tensor:
    if n < 1:
        raise ValueError(f"token count must be >= 1, got {n}")
    return _additive(intra_allowed(n), dtype)


def build_cross_mask(n: int, i: int, dtype=torch.float32) -> torch.Tensor:
    if n < 1 or i < 0:
        raise ValueError(f"need n >= 1 and i >= 0, got n={n}, i={i}")
    return _additive(cross_allowed(n, i), dtype)


def batched_cross_allowed(n: int, views: int) -> np.ndarray:
    """Mask for all viewports at once.

    Rows: ``views * n`` queries (viewport-major). Columns: ``views * n`` plain
    memory tokens followed by ``views * n`` shifted tokens. Row block ``i``
    reproduces :func:`cross_allowed` ``(n, i)`` with its first ``i * n`` columns
    taken from plain viewports ``0..i-1`` and its last ``n`` from shifted ``i``.
    """
    out = np.zeros((views * n, 2 * views * n), dtype=bool)
    for i in range(views):
        cross = cross_allowed(n, i)
        rows = slice(i * n, (i + 1) * n)
        out[rows, : i * n] = cross[:, : i * n]
        out[rows, views * n + i * n: views * n + (i + 1) * n] = cross[:, i * n:]
    return out


def format_mask(mask: torch.Tensor) -> str:
    """Rows = queries, columns = keys; ``0`` allowed, ``-inf`` blocked."""
    rows = []
    for row in mask.tolist():
        rows.append(" ".join("0" if v == 0 else "-inf" for v in row))
    return "\n".join(rows)


class MLP(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class IntraViewBlock(nn.Module):
    """Pre-norm masked self-attention + MLP, both residual."""

    def __init__(self, dim, heads, mlp_ratio=2):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = MultiHeadAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = MLP(dim, mlp_ratio * dim)

    def forward(self, s, mask):
        n = s.shape[-2]
        if mask.shape != (n, n):
            raise ShapeError(f"intra-view block: mask {tuple(mask.shape)} for {n} tokens")
        s = s + self.attn(self.ln1(s), mask=mask.to(s.dtype))
        return s + self.mlp(self.ln2(s))


class InterViewBlock(nn.Module):
    """Queries from the current viewport, keys/values from all available viewports."""

    def __init__(self, dim, heads, mlp_ratio=2):
        super().__init__()
        self.ln_q = nn.LayerNorm(dim, eps=LN_EPS)
        self.ln_m = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = MultiHeadAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = MLP(dim, mlp_ratio * dim)

    def forward(self, s, memory, mask):
        if mask.shape != (s.shape[-2], memory.shape[-2]):
            raise ShapeError(
                f"inter-view block: mask {tuple(mask.shape)} for {s.shape[-2]} queries "
                f"and {memory.shape[-2]} memory tokens")
        s = s + self.attn(self.ln_q(s), self.ln_m(memory), mask=mask.to(s.dtype))
        return s + self.mlp(self.ln2(s))


class VPCT(nn.Module):
    """Stack of (intra-view, inter-view) layers producing the global prior."""

    def __init__(self, latent_channels, tokens, dim=192, heads=4, layers=2, out=64, max_views=64):
        super().__init__()
        self.tokens = tokens
        self.max_views = max_views
        self.embed = nn.Linear(latent_channels, dim)
        self.pos = nn.Parameter(torch.randn(tokens, dim) * 0.02)
        self.view = nn.Parameter(torch.randn(max_views, dim) * 0.02)
        self.start = nn.Parameter(torch.zeros(dim))
        self.layers = nn.ModuleList(
            nn.ModuleList([IntraViewBlock(dim, heads), InterViewBlock(dim, heads)]) for _ in range(layers))
        self.ln_out = nn.LayerNorm(dim, eps=LN_EPS)
        self.out = nn.Linear(dim, out)

    def _embed(self, y_hat, views):
        """``y_hat`` (..., V, M, H, W) -> plain and shifted embeddings (..., V, N, d)."""
        tok = y_hat.flatten(-2).transpose(-1, -2)
        if tok.shape[-2] != self.tokens:
            raise ShapeError(f"VPCT built for {self.tokens} tokens, got {tok.shape[-2]}")
        if views > self.max_views:
            raise ShapeError(f"VPCT supports at most {self.max_views} viewports, got {views}")
        e = self.embed(tok)
        bias = self.pos.to(e.dtype) + self.view[:views, None].to(e.dtype)
        start = self.start.to(e.dtype).expand(*e.shape[:-2], 1, e.shape[-1])
        shifted = torch.cat([start, e[..., :-1, :]], dim=-2)
        return e + bias, shifted + bias

    def _finish(self, s, hw):
        out = self.out(self.ln_out(s))
        return out.transpose(-1, -2).reshape(*out.shape[:-2], out.shape[-1], *hw)

    def forward(self, y_hat: torch.Tensor) -> torch.Tensor:
        """Global priors for every viewport of every batch item.

        ``y_hat``: (B, V, M, H, W) quantized (or noised) latents in coding order.
        Returns (B, V, C_g, H, W).
        """
        B, V = y_hat.shape[:2]
        hw = y_hat.shape[-2:]
        n = self.tokens
        plain, shifted = self._embed(y_hat, V)
        dtype = plain.dtype
        intra = build_intra_mask(n, dtype)
        cross = _additive(batched_cross_allowed(n, V), dtype)
        memory = torch.cat([plain.reshape(B, V * n, -1), shifted.reshape(B, V * n, -1)], dim=1)
        s = shifted
        for intra_blk, inter_blk in self.layers:
            s = intra_blk(s, intra)
            s = inter_blk(s.reshape(B, V * n, -1), memory, cross).reshape(B, V, n, -1)
        return self._finish(s, hw)

    def forward_view(self, latents: list[torch.Tensor]) -> torch.Tensor:
        """Global prior for the last viewport in ``latents`` (each (B, M, H, W)).

        Only viewports ``0..i`` are read; this is the path both encoder and
        decoder use during entropy coding.
        """
        if not latents:
            raise ValueError("forward_view needs at least the current viewport's latent")
        i = len(latents) - 1
        hw = latents[-1].shape[-2:]
        n = self.tokens
        plain, shifted = self._embed(torch.stack(latents, dim=1), i + 1)
        dtype = plain.dtype
        memory = torch.cat([plain[:, :i].flatten(1, 2), shifted[:, i]], dim=1)
        intra = build_intra_mask(n, dtype)
        cross = build_cross_mask(n, i, dtype)
        s = shifted[:, i]
        for intra_blk, inter_blk in self.layers:
            s = intra_blk(s, intra)
            s = inter_blk(s, memory, cross)
        return self._finish(s, hw)


class Fusion(nn.Module):
    """Three 1x1 convolutions with leaky ReLU between, producing (mu, sigma).

    The first convolution is split into a local and a global branch whose
    outputs are summed, which equals one convolution over the concatenated
    priors. When both are present the global branch starts at zero, so a
    codec with VPCT computes exactly the same function at initialization as
    the one without it.
    """

    def __init__(self, local_in, global_in, hidden, M):
        super().__init__()
        if local_in + global_in == 0:
            raise ValueError("fusion needs at least one prior")
        self.M = M
        self.local_in, self.global_in = local_in, global_in
        self.local = nn.Conv2d(local_in, hidden, 1) if local_in else None
        self.global_ = nn.Conv2d(global_in, hidden, 1, bias=not local_in) if global_in else None
        self.net = nn.Sequential(
            nn.LeakyReLU(),
            nn.Conv2d(hidden, hidden, 1), nn.LeakyReLU(),
            nn.Conv2d(hidden, 2 * M, 1),
        )

    def reset_parameters(self):
        bound = (3.0 / (self.local_in or self.global_in)) ** 0.5
        with torch.no_grad():
            if self.local is not None:
                self.local.weight.uniform_(-bound, bound)
                self.local.bias.zero_()
            reset_parameters(self.net)
            if self.global_ is not None:
                if self.local is not None:
                    self.global_.weight.zero_()
                else:
                    self.global_.weight.uniform_(-bound, bound)
                    self.global_.bias.zero_()

    def forward(self, local: torch.Tensor | None, global_: torch.Tensor | None = None):
        if (local is None) != (self.local is None) or (global_ is None) != (self.global_ is None):
            raise ShapeError("fusion: priors given do not match the configured branches")
        if local is not None and global_ is not None and local.shape[-2:] != global_.shape[-2:]:
            raise ShapeError(f"fusion: spatial dims {tuple(local.shape[-2:])} vs {tuple(global_.shape[-2:])}")
        h = 0
        if local is not None:
            h = self.local(local)
        if global_ is not None:
            h = h + self.global_(global_)
        mu, s = self.net(h).chunk(2, dim=1)
        return mu, F.softplus(s).clamp_min(SIGMA_MIN)
