"""The ``.vpnc`` container. Byte layout is documented in FORMAT.md."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .backbone import LAMBDAS, MODEL_KINDS
from .coding import StreamError

MAGIC = b"VPNC"
VERSION = 1
SUPPORTED_VERSIONS = (1,)

PLAN_COVERAGE = 0
QUANT_MEAN_REMOVED = 1
LAMBDA_CUSTOM = 255

# magic, version, erp h/w, fov h/v, vp w/h, plan id, kind, vpct, lambda idx,
# quant mode, model hash, viewport count
_HEADER = struct.Struct("<4sBIIddHHBBBBB16sH")
HEADER_SIZE = _HEADER.size
_LEN = struct.Struct("<I")


class FormatError(StreamError):
    pass


class VersionError(FormatError):
    pass


def lambda_index(lam: float) -> int:
    for i, v in enumerate(LAMBDAS):
        if abs(v - lam) < 1e-12:
            return i
    return LAMBDA_CUSTOM


@dataclass
class Header:
    erp_height: int
    erp_width: int
    fov: tuple[float, float]
    viewport: tuple[int, int]   # (W_vp, H_vp)
    kind: str
    vpct: bool
    lambda_index: int
    model_hash: bytes
    n_viewports: int
    plan_id: int = PLAN_COVERAGE
    quant_mode: int = QUANT_MEAN_REMOVED
    version: int = VERSION

    def pack(self) -> bytes:
        return _HEADER.pack(
            MAGIC, self.version, self.erp_height, self.erp_width, self.fov[0], self.fov[1],
            self.viewport[0], self.viewport[1], self.plan_id, MODEL_KINDS.index(self.kind),
            int(self.vpct), self.lambda_index, self.quant_mode, self.model_hash, self.n_viewports,
        )


@dataclass
class Bitstream:
    header: Header
    records: list[tuple[bytes, bytes]] = field(default_factory=list)  # (z payload, y payload)

    def to_bytes(self) -> bytes:
        if len(self.records) != self.header.n_viewports:
            raise ValueError(f"header says {self.header.n_viewports} viewports, have {len(self.records)}")
        parts = [self.header.pack()]
        for z, y in self.records:
            parts += [_LEN.pack(len(z)), z, _LEN.pack(len(y)), y]
        return b"".join(parts)

    def record_bits(self) -> list[int]:
        """Bits per viewport record including its two length fields."""
        return [8 * (2 * _LEN.size + len(z) + len(y)) for z, y in self.records]

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_SIZE:
            raise FormatError("stream shorter than its header", len(data))
        fields_ = _HEADER.unpack_from(data, 0)
        magic, version = fields_[0], fields_[1]
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}", 0)
        if version not in SUPPORTED_VERSIONS:
            raise VersionError(f"unsupported stream version {version}", 4)
        (_, _, eh, ew, fh, fv, vw, vh, plan_id, kind, vpct, lam_idx, quant, mhash, nvp) = fields_
        if kind >= len(MODEL_KINDS):
            raise FormatError(f"unknown model kind id {kind}", 4)
        header = Header(eh, ew, (fh, fv), (vw, vh), MODEL_KINDS[kind], bool(vpct), lam_idx, mhash, nvp,
                        plan_id, quant, version)
        pos = HEADER_SIZE
        records = []
        for _ in range(nvp):
            chunk = []
            for _ in range(2):
                if pos + _LEN.size > len(data):
                    raise FormatError("truncated record length", pos)
                (n,) = _LEN.unpack_from(data, pos)
                pos += _LEN.size
                if pos + n > len(data):
                    raise FormatError(f"record claims {n} bytes, stream ends early", pos)
                chunk.append(bytes(data[pos: pos + n]))
                pos += n
            records.append((chunk[0], chunk[1]))
        if pos != len(data):
            raise FormatError(f"{len(data) - pos} trailing bytes after last record", pos)
        return cls(header, records)
