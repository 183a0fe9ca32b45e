"""Numeric substrate shared by the codec: masked attention, initialization,
finite-difference gradient checks, determinism switches and the checkpoint
archive format.

Dense tensors, layers and reverse-mode gradients come from torch; this module
only adds what the codec needs on top of it.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

MASK_SENTINEL = -1e9
LN_EPS = 1e-5

CKPT_MAGIC = b"VPCK"
CKPT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def set_deterministic(threads: int = 1, seed: int | None = None):
    torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(True)
    if seed is not None:
        torch.manual_seed(seed)


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values at {where}")
    return t


def expect_shape(t: torch.Tensor, expected: tuple, layer: str):
    """``expected`` may contain ``None`` wildcards."""
    ok = t.dim() == len(expected) and all(e is None or e == s for e, s in zip(expected, t.shape))
    if not ok:
        raise ShapeError(f"{layer}: expected shape {expected}, got {tuple(t.shape)}")


def reset_parameters(module: nn.Module):
    """Scaled uniform fan-in weights, zero biases, for every conv/linear below ``module``."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            w = m.weight
            if isinstance(m, nn.ConvTranspose2d):
                # (in, out, kh, kw); each output sees in*kh*kw/stride^2 taps
                fan_in = w.shape[0] * w.shape[2] * w.shape[3] / (m.stride[0] * m.stride[1])
            else:
                fan_in = w[0].numel()
            bound = math.sqrt(3.0 / fan_in)
            with torch.no_grad():
                w.uniform_(-bound, bound)
                if m.bias is not None:
                    m.bias.zero_()


def leaky_relu(x: torch.Tensor, slope: float = 0.01) -> torch.Tensor:
    return F.leaky_relu(x, slope)


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor | None = None):
    """``softmax(q k^T / sqrt(d) + mask) v`` over the last two dims.

    ``mask`` is additive with entries 0 (allowed) or :data:`MASK_SENTINEL`.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)} do not align")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        if mask.shape[-2:] != scores.shape[-2:]:
            raise ShapeError(f"attention: mask {tuple(mask.shape)} vs scores {tuple(scores.shape)}")
        scores = scores + mask
    return torch.softmax(scores, dim=-1) @ v


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"attention dim {dim} not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x, memory=None, mask=None):
        memory = x if memory is None else memory
        *lead, n, d = x.shape
        m = memory.shape[-2]

        def split(t, length):
            return t.reshape(*lead, length, self.heads, d // self.heads).transpose(-3, -2)

        q = split(self.q(x), n)
        k = split(self.k(memory), m)
        v = split(self.v(memory), m)
        out = masked_attention(q, k, v, mask)
        out = out.transpose(-3, -2).reshape(*lead, n, d)
        return self.o(out)


def numerical_grad(f: Callable[[], torch.Tensor], x: torch.Tensor, eps: float = 1e-4,
                   indices=None) -> torch.Tensor:
    """Central finite differences of scalar ``f()`` with respect to ``x`` (in place perturbation).

    With ``indices`` (flat positions) only those entries are computed; the
    rest of the result is zero.
    """
    grad = torch.zeros_like(x)
    flat = x.data.view(-1)
    g = grad.view(-1)
    for i in (range(flat.numel()) if indices is None else indices):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = f().item()
        flat[i] = orig - eps
        fm = f().item()
        flat[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-6) -> float:
    """``max|a - b| / max(max|a|, max|b|, floor)``.

    The floor keeps parameters whose true gradient is zero (for example key
    biases under softmax) from turning round-off into a relative error of 1.
    """
    num = (a - b).abs().max().item()
    den = max(a.abs().max().item(), b.abs().max().item(), floor)
    return num / den


def grad_check(f: Callable[[], torch.Tensor], inputs, eps: float = 1e-4, samples: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between autograd and central differences over ``inputs``.

    ``inputs`` should be float64 leaf tensors with ``requires_grad``. With
    ``samples`` only that many randomly chosen entries per tensor are
    compared, which keeps checks of large layers cheap.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    f().backward()
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for t in inputs:
        analytic = t.grad.detach().clone().view(-1)
        idx = None
        if samples is not None and samples < t.numel():
            idx = torch.randperm(t.numel(), generator=gen)[:samples].tolist()
        with torch.no_grad():
            numeric = numerical_grad(f, t, eps, idx).view(-1)
        if idx is not None:
            analytic, numeric = analytic[idx], numeric[idx]
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# -- checkpoint archive -------------------------------------------------------
#
# magic "VPCK" | u8 version | u32 manifest length | manifest JSON | payload
# The manifest lists each tensor's name, shape, dtype, byte offset and length
# within the payload (raw little-endian), plus a free-form "meta" dict and the
# sha256 of the payload.

_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


def _tensor_bytes(t: torch.Tensor) -> tuple[str, bytes]:
    arr = t.detach().cpu().contiguous().numpy()
    name = str(arr.dtype)
    if name not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {name}")
    return name, arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def serialize_state(state: dict[str, torch.Tensor], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        dtype, raw = _tensor_bytes(state[name])
        entries.append({"name": name, "shape": list(state[name].shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {"tensors": entries, "meta": meta or {}, "sha256": hashlib.sha256(payload).hexdigest()}
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(mbytes)) + mbytes + payload


def deserialize_state(blob: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, mlen = struct.unpack_from("<BI", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 9 + mlen
    try:
        manifest = json.loads(blob[9:start])
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from None
    payload = blob[start:]
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise CheckpointError("checkpoint payload checksum mismatch")
    state = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(e["dtype"]))
    return state, manifest["meta"]


def atomic_write(path: str, data: bytes):
    """Write via a temp file in the same directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str, state: dict[str, torch.Tensor], meta: dict | None = None):
    atomic_write(path, serialize_state(state, meta))


def load_checkpoint(path: str) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as fh:
        return deserialize_state(fh.read())


def state_digest(state: dict[str, torch.Tensor]) -> bytes:
    h = hashlib.sha256()
    for name in sorted(state):
        dtype, raw = _tensor_bytes(state[name])
        h.update(name.encode() + b"\0" + dtype.encode() + repr(list(state[name].shape)).encode())
        h.update(raw)
    return h.digest()
