import numpy as np
import pytest

from vpnc.bitstream import (
    HEADER_SIZE,
    LAMBDA_CUSTOM,
    MAGIC,
    Bitstream,
    FormatError,
    Header,
    VersionError,
    lambda_index,
)
from vpnc.backbone import LAMBDAS
from vpnc.codec import ModelMismatchError, coding_model, compress_erp, decompress_erp
from vpnc.coding import StreamError
from vpnc.data import synthetic_erp
from vpnc.geometry import default_plan
from vpnc.harness import bpi, per_viewport_bits
from vpnc.model import ViewportCodec

from conftest import tiny_config


def header(n=2, **kw):
    base = dict(erp_height=128, erp_width=256, fov=(90.0, 90.0), viewport=(64, 64), kind="joint", vpct=True,
                lambda_index=3, model_hash=bytes(range(16)), n_viewports=n)
    return Header(**{**base, **kw})


def test_header_size_and_magic():
    raw = header(0).pack()
    assert len(raw) == HEADER_SIZE == 56
    assert raw[:4] == MAGIC and raw[4] == 1


def test_round_trip_preserves_everything():
    bs = Bitstream(header(3), [(b"", b"\x01\x02"), (b"zz", b"yyy"), (b"", b"")])
    back = Bitstream.from_bytes(bs.to_bytes())
    assert back == bs


def test_record_count_must_match_header():
    with pytest.raises(ValueError):
        Bitstream(header(2), [(b"", b"")]).to_bytes()


def test_truncation_at_every_length_is_rejected():
    data = Bitstream(header(2), [(b"ab", b"cde"), (b"f", b"ghij")]).to_bytes()
    for n in range(len(data)):
        with pytest.raises(StreamError):
            Bitstream.from_bytes(data[:n])


def test_trailing_bytes_rejected():
    data = Bitstream(header(1), [(b"a", b"b")]).to_bytes()
    with pytest.raises(FormatError, match="trailing"):
        Bitstream.from_bytes(data + b"\0")


def test_bad_magic_and_version():
    data = bytearray(Bitstream(header(0)).to_bytes())
    bad = bytearray(data)
    bad[0] = ord("X")
    with pytest.raises(FormatError, match="magic"):
        Bitstream.from_bytes(bytes(bad))
    data[4] = 9
    with pytest.raises(VersionError):
        Bitstream.from_bytes(bytes(data))


def test_lambda_index():
    assert [lambda_index(l) for l in LAMBDAS] == list(range(6))
    assert lambda_index(0.5) == LAMBDA_CUSTOM


def test_bpi_examples():
    assert bpi(b"\0" * 1000) == 8000
    data = Bitstream(header(0)).to_bytes()
    assert bpi(data) == 8 * HEADER_SIZE


@pytest.fixture(scope="module")
def coded():
    model = coding_model(ViewportCodec(tiny_config("hyperprior", False)))
    erp = synthetic_erp(128, np.random.default_rng(0))
    plan = default_plan(128).with_dims((64, 64))
    return model, erp, compress_erp(model, erp, plan).to_bytes()


def test_bpi_additivity(coded):
    _, _, data = coded
    acct = per_viewport_bits(data)
    assert acct["header_bits"] + sum(r["record_bits"] for r in acct["viewports"]) == acct["total_bits"] == bpi(data)
    assert all(r["record_bits"] == r["z_bits"] + r["y_bits"] + 64 for r in acct["viewports"])


def test_decodable_from_header_and_checkpoint(coded):
    model, erp, data = coded
    rec, _ = decompress_erp(model, data)
    assert rec.shape == erp.shape


def test_header_mismatch_rejected(coded):
    _, _, data = coded
    other = coding_model(ViewportCodec(tiny_config("hyperprior", False, seed=5)))
    with pytest.raises(ModelMismatchError):
        decompress_erp(other, data)
