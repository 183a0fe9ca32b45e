"""Whole-image compression: viewport extraction, per-viewport entropy coding in
plan order, and reconstruction back to ERP."""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import gaussian_likelihood, rate_bits, round_half_away
from .bitstream import Bitstream, Header, lambda_index
from .coding import (
    SYMBOL_CLAMP,
    RangeDecoder,
    RangeEncoder,
    StreamError,
    gaussian_table,
    table_from_pmf,
)
from .geometry import ExtractionPlan, FieldOfView, Viewport, extract_all, plan_coverage, reassemble_erp
from .model import ViewportCodec


class ModelMismatchError(ValueError):
    pass


@dataclass
class CodedImage:
    stream: Bitstream
    z_hat: list                        # per viewport (1, Z, h/4, w/4) or None
    y_hat: list[torch.Tensor]          # per viewport (1, M, h, w)
    mu: list[torch.Tensor]
    sigma: list[torch.Tensor]
    recon: list[np.ndarray]            # per viewport (H, W, 3)

    def to_bytes(self) -> bytes:
        return self.stream.to_bytes()


def coding_model(model: ViewportCodec) -> ViewportCodec:
    """Float64 eval-mode copy used on both ends of the coder."""
    return copy.deepcopy(model).double().eval()


def _factorized_tables(density) -> list:
    pmf = density.pmf_table(-SYMBOL_CLAMP, SYMBOL_CLAMP)
    return [table_from_pmf(pmf[c], -SYMBOL_CLAMP, tag=struct.pack("<H", c)) for c in range(pmf.shape[0])]


def _to_tensor(viewports: list[Viewport]) -> torch.Tensor:
    return torch.from_numpy(np.stack([vp.pixels.transpose(2, 0, 1) for vp in viewports])).double()


def _recon(model, y_hat):
    with torch.no_grad():
        x = model.synthesize(y_hat)
    return x[0].permute(1, 2, 0).numpy()


class _Side:
    """One end of the coder: wraps either a fresh RangeEncoder or the given RangeDecoder."""

    def __init__(self, decoder: RangeDecoder | None = None):
        self.dec = decoder
        self.enc = RangeEncoder() if decoder is None else None

    def code(self, dist, value=None) -> int:
        if self.enc is not None:
            self.enc.encode(int(value), dist)
            return int(value)
        return self.dec.decode(dist)


def _code_plain(side: _Side, tables, shape, values=None):
    """Code a (1, C, h, w) integer tensor channel-wise under fixed tables (raster, channel-inner)."""
    _, C, h, w = shape
    out = torch.zeros(1, C, h, w, dtype=torch.float64)
    for r in range(h):
        for c in range(w):
            for ch in range(C):
                v = None if values is None else values[0, ch, r, c].item()
                out[0, ch, r, c] = side.code(tables[ch], v)
    return out


def _code_gaussian(side: _Side, model, y, shape, theta_h, previous):
    """Code one viewport's latent under (mu, sigma) from the entropy model.

    ``y`` is the raw latent on the encoder and None on the decoder.
    """
    _, M, h, w = shape
    y_hat = torch.zeros(shape, dtype=torch.float64)
    mu_map = torch.zeros(shape, dtype=torch.float64)
    sigma_map = torch.zeros(shape, dtype=torch.float64)
    if not model.config.autoregressive:
        mu_full, sigma_full = model.fusion(theta_h, None)
        if model.zero_mean:
            mu_full = torch.zeros_like(mu_full)
    for r in range(h):
        for c in range(w):
            if model.config.autoregressive:
                mu, sigma = model.entropy_params_at(y_hat, r, c, theta_h, previous)
                mu, sigma = mu[0], sigma[0]
            else:
                mu, sigma = mu_full[0, :, r, c], sigma_full[0, :, r, c]
            if y is not None:
                k = round_half_away(y[0, :, r, c] - mu)
            for ch in range(M):
                value = None if y is None else k[ch].item()
                sym = side.code(gaussian_table(sigma[ch].item()), value)
                y_hat[0, ch, r, c] = sym + mu[ch]
            mu_map[0, :, r, c] = mu
            sigma_map[0, :, r, c] = sigma
    return y_hat, mu_map, sigma_map


def _code_viewport(model, side_factory, y_i, previous, latent_shape, hyper_shape, tables):
    """Returns ([z side or None, y side], z_hat, y_hat, mu, sigma)."""
    cfg = model.config
    payloads = []
    theta_h = z_hat = None
    if cfg.has_hyper:
        side = side_factory(0)
        z_hat = None if y_i is None else round_half_away(model.h_a(y_i))
        z_hat = _code_plain(side, tables["z"], hyper_shape, z_hat)
        payloads.append(side)
        theta_h = model.h_s(z_hat)
    else:
        payloads.append(None)
    side = side_factory(1)
    if model.uses_gaussian:
        y_hat, mu, sigma = _code_gaussian(side, model, y_i, latent_shape, theta_h, previous)
    else:
        y_hat = _code_plain(side, tables["y"], latent_shape, None if y_i is None else round_half_away(y_i))
        mu = sigma = None
    payloads.append(side)
    return payloads, z_hat, y_hat, mu, sigma


def _tables(model):
    if model.config.has_hyper:
        return {"z": _factorized_tables(model.z_density)}
    if not model.uses_gaussian:
        return {"y": _factorized_tables(model.y_density)}
    return {}


def _shapes(model):
    h, w = model.config.latent_hw
    return (1, model.config.M, h, w), (1, model.config.hyper_channels, h // 4, w // 4)


def compress_viewports(model: ViewportCodec, x: torch.Tensor):
    """Code a (V, 3, H, W) float64 viewport stack in order. Returns records and latents."""
    records, z_hats, y_hats, mus, sigmas = [], [], [], [], []
    tables = _tables(model)
    latent_shape, hyper_shape = _shapes(model)
    with torch.no_grad():
        y = model.analyze(x)
        if tuple(y.shape[1:]) != latent_shape[1:]:
            raise ModelMismatchError(f"viewports give latent {tuple(y.shape[1:])}, model expects {latent_shape[1:]}")
        for i in range(x.shape[0]):
            sides, z_hat, y_hat, mu, sigma = _code_viewport(
                model, lambda _: _Side(), y[i: i + 1], y_hats, latent_shape, hyper_shape, tables)
            records.append(tuple(b"" if s is None else s.enc.finish() for s in sides))
            z_hats.append(z_hat)
            y_hats.append(y_hat)
            mus.append(mu)
            sigmas.append(sigma)
    return records, z_hats, y_hats, mus, sigmas


def decompress_viewports(model: ViewportCodec, records, return_params: bool = False):
    """Decode viewport records in order. Returns the latents, plus the (mu, sigma)
    maps the decoder used when ``return_params`` is set."""
    tables = _tables(model)
    latent_shape, hyper_shape = _shapes(model)
    y_hats, mus, sigmas = [], [], []
    with torch.no_grad():
        for i, record in enumerate(records):
            decoders = []

            def factory(slot):
                decoders.append(RangeDecoder(record[slot]))
                return _Side(decoders[-1])

            try:
                _, _, y_hat, mu, sigma = _code_viewport(model, factory, None, y_hats, latent_shape, hyper_shape,
                                                        tables)
                for d in decoders:
                    d.verify()
            except StreamError as exc:
                raise type(exc)(f"viewport {i}: {exc.msg}", exc.offset) from None
            y_hats.append(y_hat)
            mus.append(mu)
            sigmas.append(sigma)
    return (y_hats, mus, sigmas) if return_params else y_hats


def plan_for(header: Header) -> ExtractionPlan:
    return plan_coverage(FieldOfView(*header.fov), header.viewport)


def compress_erp(model: ViewportCodec, erp: np.ndarray, plan: ExtractionPlan, lam: float | None = None,
                 model_hash: bytes | None = None) -> CodedImage:
    """``model`` must already be the float64 coding copy."""
    cfg = model.config
    if tuple(plan.viewport_dims) != tuple(cfg.viewport):
        raise ModelMismatchError(f"plan viewport {plan.viewport_dims} != model viewport {cfg.viewport}")
    viewports = extract_all(erp, plan)
    records, z_hats, y_hats, mus, sigmas = compress_viewports(model, _to_tensor(viewports))
    header = Header(
        erp.shape[0], erp.shape[1], (plan.fov.f_h, plan.fov.f_v), tuple(plan.viewport_dims),
        cfg.kind, cfg.vpct, lambda_index(cfg.lam if lam is None else lam),
        model_hash if model_hash is not None else model.model_hash(), len(records))
    recon = [_recon(model, y) for y in y_hats]
    return CodedImage(Bitstream(header, records), z_hats, y_hats, mus, sigmas, recon)


def check_header(model: ViewportCodec, header: Header, model_hash: bytes | None = None):
    cfg = model.config
    expected = model_hash if model_hash is not None else model.model_hash()
    if header.model_hash != expected:
        raise ModelMismatchError("stream was produced with a different checkpoint (model hash mismatch)")
    if header.kind != cfg.kind or header.vpct != cfg.vpct or tuple(header.viewport) != tuple(cfg.viewport):
        raise ModelMismatchError("stream header does not match the model configuration")


def decompress_erp(model: ViewportCodec, data: bytes, model_hash: bytes | None = None) -> tuple[np.ndarray, list]:
    stream = Bitstream.from_bytes(data)
    check_header(model, stream.header, model_hash)
    plan = plan_for(stream.header)
    if len(plan) != stream.header.n_viewports:
        raise StreamError(f"header lists {stream.header.n_viewports} viewports, plan has {len(plan)}")
    y_hats = decompress_viewports(model, stream.records)
    vps = [Viewport(c, plan.fov, _recon(model, y)) for c, y in zip(plan.centers, y_hats)]
    erp = reassemble_erp(vps, (stream.header.erp_height, stream.header.erp_width))
    return erp, y_hats


def reconstruct_erp(coded: CodedImage, plan: ExtractionPlan, erp_dims) -> np.ndarray:
    vps = [Viewport(c, plan.fov, r) for c, r in zip(plan.centers, coded.recon)]
    return reassemble_erp(vps, erp_dims)


def estimate_viewport_bits(model: ViewportCodec, coded: CodedImage) -> list[tuple[float, float]]:
    """Likelihood-based (z bits, y bits) per viewport for the coded symbols."""
    out = []
    with torch.no_grad():
        for z_hat, y_hat, mu, sigma in zip(coded.z_hat, coded.y_hat, coded.mu, coded.sigma):
            zb = float(rate_bits(model.z_density.likelihood(z_hat))) if z_hat is not None else 0.0
            if model.uses_gaussian:
                yb = float(rate_bits(gaussian_likelihood(y_hat, mu, sigma)))
            else:
                yb = float(rate_bits(model.y_density.likelihood(y_hat)))
            out.append((zb, yb))
    return out


def payload_body_bits(payload: bytes) -> int:
    """Range-coder body bits of one payload (its 2-byte check excluded)."""
    return 8 * max(0, len(payload) - 2) if payload else 0
