"""The viewport codec: transforms + one of the four entropy models, optionally
conditioned on earlier viewports through VPCT."""
from __future__ import annotations

import hashlib
import json

import torch
import torch.nn as nn

from .backbone import (
    LATENT_GAIN,
    AnalysisTransform,
    CodecConfig,
    ContextModel,
    FactorizedDensity,
    HyperAnalysis,
    HyperSynthesis,
    ReferenceLite,
    SynthesisTransform,
    gaussian_likelihood,
    quantize,
)
from .tensor import check_finite, load_checkpoint, reset_parameters, save_checkpoint, state_digest
from .vpct import VPCT, Fusion


class ViewportCodec(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = cfg = config
        torch.manual_seed(cfg.seed)
        self.g_a = AnalysisTransform(cfg.N, cfg.M)
        self.g_s = SynthesisTransform(cfg.N, cfg.M)
        local = 0
        if cfg.has_hyper:
            self.h_a = HyperAnalysis(cfg.M, cfg.hyper_channels)
            self.h_s = HyperSynthesis(cfg.hyper_channels, cfg.M, cfg.hyper_features)
            self.z_density = FactorizedDensity(cfg.hyper_channels)
            local += cfg.hyper_features
        else:
            self.y_density = FactorizedDensity(cfg.M)
        if cfg.has_context:
            self.context = ContextModel(cfg.M, cfg.context_channels)
            local += cfg.context_channels
        if cfg.kind == "reference":
            self.reference = ReferenceLite(cfg.M, cfg.context_channels, cfg.reference_dim, cfg.reference_channels)
            local += cfg.reference_channels
        self.local_channels = local
        reset_parameters(self)
        with torch.no_grad():
            self.g_a.net[-1].weight.mul_(LATENT_GAIN)
            self.g_s.net[0].weight.div_(LATENT_GAIN)
        # the fusion layer's local part and the backbone draw the same random
        # numbers with and without VPCT; the global part starts at zero
        glob = cfg.vpct_global if cfg.vpct else 0
        state = torch.get_rng_state()
        self.fusion = Fusion(local, glob, cfg.fusion_hidden, cfg.M) if local + glob else None
        if self.fusion is not None:
            torch.set_rng_state(state)
            self.fusion.reset_parameters()
        if cfg.vpct:
            h, w = cfg.latent_hw
            self.vpct = VPCT(cfg.M, h * w, cfg.vpct_dim, cfg.vpct_heads, cfg.vpct_layers,
                             cfg.vpct_global, cfg.max_views)
            reset_parameters(self.vpct)

    # -- properties ------------------------------------------------------------

    @property
    def uses_gaussian(self) -> bool:
        return self.fusion is not None

    @property
    def zero_mean(self) -> bool:
        return self.config.kind == "hyperprior" and not self.config.vpct

    def model_hash(self) -> bytes:
        """16-byte digest of architecture + float32 parameters (seed field excluded)."""
        h = hashlib.sha256(json.dumps(self.config.architecture(), sort_keys=True).encode())
        h.update(state_digest({k: v.float() for k, v in self.state_dict().items()}))
        return h.digest()[:16]

    # -- pieces ----------------------------------------------------------------

    def analyze(self, x):
        return self.g_a(x)

    def synthesize(self, y_hat):
        return self.g_s(y_hat)

    def local_prior(self, y_hat, theta_h):
        parts = []
        if theta_h is not None:
            parts.append(theta_h)
        if self.config.has_context:
            ctx = self.context(y_hat)
            parts.append(ctx)
            if self.config.kind == "reference":
                parts.append(self.reference(y_hat, ctx))
        return torch.cat(parts, dim=1) if parts else None

    def entropy_params(self, y_hat, theta_h):
        """Full-pass (mu, sigma) for all viewports.

        ``y_hat``: (B, V, M, h, w); ``theta_h``: (B*V, C_h, h, w) or None.
        Returns tensors shaped (B*V, M, h, w). Only valid for Gaussian models.
        """
        B, V = y_hat.shape[:2]
        flat = y_hat.flatten(0, 1)
        local = self.local_prior(flat, theta_h)
        glob = self.vpct(y_hat).flatten(0, 1) if self.config.vpct else None
        mu, sigma = self.fusion(local, glob)
        if self.zero_mean:
            mu = torch.zeros_like(mu)
        return mu, sigma

    def entropy_params_at(self, y_hat_i, r, c, theta_h_i, previous):
        """(mu, sigma) at one latent position of viewport ``i = len(previous)``.

        ``y_hat_i`` is (1, M, h, w) and may hold arbitrary values at positions
        not yet decoded; only the causal prefix is read. Encoder and decoder
        both go through this function, which is what makes them agree bitwise.
        """
        n = r * y_hat_i.shape[-1] + c
        parts = []
        if theta_h_i is not None:
            parts.append(theta_h_i[:, :, r, c])
        if self.config.has_context:
            ctx = self.context.at(y_hat_i, r, c)
            parts.append(ctx)
            if self.config.kind == "reference":
                parts.append(self.reference.at(y_hat_i, ctx, n))
        local = torch.cat(parts, dim=1)[:, :, None, None] if parts else None
        glob = None
        if self.config.vpct:
            glob = self.vpct.forward_view(list(previous) + [y_hat_i])[:, :, r: r + 1, c: c + 1]
        mu, sigma = self.fusion(local, glob)
        mu, sigma = mu[:, :, 0, 0], sigma[:, :, 0, 0]
        if self.zero_mean:
            mu = torch.zeros_like(mu)
        return mu, sigma

    # -- training pass -----------------------------------------------------------

    def forward(self, x, generator=None):
        """Noise-quantized pass over a batch of viewport groups.

        ``x``: (B, V, 3, H, W). Returns reconstructions and per-viewport
        likelihoods for rate estimation.
        """
        B, V = x.shape[:2]
        flat = x.flatten(0, 1)
        y = self.g_a(flat)
        out = {"y": y}
        theta_h = None
        if self.config.has_hyper:
            z = self.h_a(y)
            z_hat = quantize(z, "train", generator=generator)
            out["z_likelihood"] = self.z_density.likelihood(z_hat)
            theta_h = self.h_s(z_hat)
        y_hat = quantize(y, "train", generator=generator)
        if self.uses_gaussian:
            mu, sigma = self.entropy_params(y_hat.unflatten(0, (B, V)), theta_h)
            out["y_likelihood"] = gaussian_likelihood(y_hat, mu, sigma)
            out["mu"], out["sigma"] = mu, sigma
        else:
            out["y_likelihood"] = self.y_density.likelihood(y_hat)
        out["x_hat"] = self.g_s(y_hat).unflatten(0, (B, V))
        check_finite(out["y_likelihood"], "y likelihood")
        return out


def save_model(path: str, model: ViewportCodec, extra: dict | None = None):
    meta = {"config": json.loads(model.config.to_json()), "model_hash": model.model_hash().hex()}
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path: str, dtype=torch.float32) -> tuple[ViewportCodec, dict]:
    state, meta = load_checkpoint(path)
    cfg = CodecConfig.from_dict(meta["config"])
    model = ViewportCodec(cfg)
    model.load_state_dict(state)
    model.eval()
    return model.to(dtype), meta
