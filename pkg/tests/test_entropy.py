import struct
import zlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from icm_codec.codec_core import CodecConfig, build_codec
from icm_codec.entropy_coding import (
    HEADER_SIZE,
    MAGIC,
    PROB_SCALE,
    Bitstream,
    CodingTable,
    RangeDecoder,
    RangeEncoder,
    build_coding_tables,
    entropy_decode,
    entropy_encode,
    model_pmf,
    quantize_pmf,
)
from icm_codec.errors import ChecksumError, ConfigurationError, ModelMismatchError, TruncatedStreamError


@pytest.fixture(scope="module")
def tables():
    return build_coding_tables(build_codec(CodecConfig.from_profile("tiny"), seed=0).probability_model)


def _peaked_table(channels=32, support=64):
    pmf = np.full(2 * support + 2, 1e-9)
    pmf[support] = 1.0
    return CodingTable(support, np.stack([quantize_pmf(pmf)] * channels))


def test_uniform_pmf_four_symbols():
    assert quantize_pmf([0.25] * 4).tolist() == [16384] * 4


@given(st.lists(st.floats(0, 1), min_size=2, max_size=300))
@settings(max_examples=100, deadline=None)
def test_quantized_pmf_is_valid(pmf):
    freqs = quantize_pmf(pmf)
    assert freqs.sum() == PROB_SCALE
    assert freqs.min() >= 1
    assert len(freqs) == len(pmf)


def test_quantize_pmf_largest_remainder():
    # 3 symbols: scaled mass (65533 * p) = 21844.33 each, so one extra count goes to index 0
    assert quantize_pmf([1 / 3] * 3).tolist() == [21846, 21845, 21845]


def test_table_entropy_close_to_model(tables):
    pm = build_codec(CodecConfig.from_profile("tiny"), seed=0).probability_model
    p = model_pmf(pm)
    p = p / p.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        analytic = -np.where(p > 0, p * np.log2(p), 0.0).sum(axis=1)
    assert np.abs(tables.entropy() - analytic).max() < 0.01


def test_tables_are_hash_stable():
    a = build_coding_tables(build_codec(CodecConfig.from_profile("tiny"), seed=0).probability_model)
    b = build_coding_tables(build_codec(CodecConfig.from_profile("tiny"), seed=0).probability_model)
    c = build_coding_tables(build_codec(CodecConfig.from_profile("tiny"), seed=1).probability_model)
    assert a.model_hash() == b.model_hash()
    assert np.array_equal(a.freqs, b.freqs)
    assert a.model_hash() != c.model_hash()


def test_range_coder_raw_symbols():
    rng = np.random.default_rng(0)
    symbols = rng.integers(0, 1 << 16, size=500).tolist()
    enc = RangeEncoder()
    for s in symbols:
        enc.encode(s, 1)
    dec = RangeDecoder(enc.finish())
    out = []
    for _ in symbols:
        t = dec.decode_target()
        dec.consume(t, 1)
        out.append(t)
    assert out == symbols


def test_all_zero_latent_is_cheap():
    table = _peaked_table()
    latent = np.zeros((32, 8, 8), dtype=np.int64)
    bs = entropy_encode(latent, table)
    assert 8 * len(bs.payload) < 0.1 * latent.size
    assert np.array_equal(entropy_decode(bs, table), latent)


def test_encode_is_deterministic(tables):
    latent = np.random.default_rng(1).integers(-5, 6, size=(32, 4, 4))
    assert entropy_encode(latent, tables).to_bytes() == entropy_encode(latent, tables).to_bytes()


def test_round_trip_random_latents(tables):
    rng = np.random.default_rng(2)
    for i in range(100):
        h, w = rng.integers(1, 5, size=2)
        scale = rng.choice([0.5, 2.0, 8.0])
        latent = np.rint(rng.normal(0, scale, size=(32, h, w))).astype(np.int64)
        data = entropy_encode(latent, tables).to_bytes()
        assert np.array_equal(entropy_decode(data, tables), latent), f"latent {i}"


def test_round_trip_with_escapes(tables):
    latent = np.zeros((32, 2, 2), dtype=np.int64)
    latent[0, 0, 0] = 65
    latent[1, 0, 1] = -64
    latent[2, 1, 1] = -30000
    latent[3, 1, 0] = 32767
    assert np.array_equal(entropy_decode(entropy_encode(latent, tables), tables), latent)


def test_escape_range_limit(tables):
    latent = np.zeros((32, 1, 1), dtype=np.int64)
    latent[0, 0, 0] = 40000
    with pytest.raises(ConfigurationError):
        entropy_encode(latent, tables)


def test_rejects_fractional_latent(tables):
    with pytest.raises(ConfigurationError):
        entropy_encode(np.full((32, 1, 1), 0.5), tables)


def test_accepts_batched_tensor(tables):
    latent = torch.round(torch.randn(1, 32, 2, 3) * 2)
    bs = entropy_encode(latent, tables, original_size=(13, 21))
    assert (bs.height, bs.width, bs.padded_height, bs.padded_width) == (13, 21, 16, 24)
    assert np.array_equal(entropy_decode(bs, tables), latent[0].numpy().astype(np.int64))


def test_code_length_close_to_ideal(tables):
    latent = np.rint(np.random.default_rng(3).normal(0, 3, size=(32, 8, 8))).astype(np.int64)
    bits = tables.symbol_bits(latent)
    measured = 8 * len(entropy_encode(latent, tables).payload)
    assert abs(measured - bits) <= 0.01 * bits + 64


def test_header_layout(tables):
    latent = np.zeros((32, 2, 3), dtype=np.int64)
    data = entropy_encode(latent, tables, original_size=(10, 20)).to_bytes()
    assert HEADER_SIZE == 46
    assert data[:4] == MAGIC
    version, flags, h, w, ph, pw, c, support = struct.unpack_from("<BBIIIIHH", data, 4)
    assert (version, flags, h, w, ph, pw, c, support) == (1, 0, 10, 20, 16, 24, 32, 64)
    assert data[26:42] == tables.model_hash()
    (plen,) = struct.unpack_from("<I", data, 42)
    assert len(data) == HEADER_SIZE + plen + 4
    assert struct.unpack_from("<I", data, HEADER_SIZE + plen)[0] == zlib.crc32(data[: HEADER_SIZE + plen])


def test_corrupted_payload_raises_checksum(tables):
    latent = np.random.default_rng(4).integers(-3, 4, size=(32, 2, 2))
    data = bytearray(entropy_encode(latent, tables).to_bytes())
    data[HEADER_SIZE + 1] ^= 0x40
    with pytest.raises(ChecksumError):
        entropy_decode(bytes(data), tables)


def test_bad_magic(tables):
    data = bytearray(entropy_encode(np.zeros((32, 1, 1), dtype=np.int64), tables).to_bytes())
    data[0:4] = b"XXXX"
    with pytest.raises(ChecksumError):
        Bitstream.from_bytes(bytes(data))


def test_wrong_model_refused(tables):
    other = build_coding_tables(build_codec(CodecConfig.from_profile("tiny"), seed=9).probability_model)
    data = entropy_encode(np.zeros((32, 1, 1), dtype=np.int64), tables).to_bytes()
    with pytest.raises(ModelMismatchError):
        entropy_decode(data, other)


def test_truncated_container(tables):
    data = entropy_encode(np.ones((32, 2, 2), dtype=np.int64), tables).to_bytes()
    with pytest.raises(TruncatedStreamError):
        Bitstream.from_bytes(data[:-3])
    with pytest.raises(TruncatedStreamError):
        Bitstream.from_bytes(data[:20])


def test_truncated_payload_detected(tables):
    latent = np.rint(np.random.default_rng(5).normal(0, 6, size=(32, 4, 4))).astype(np.int64)
    bs = entropy_encode(latent, tables)
    short = Bitstream(**{**bs.__dict__, "payload": bs.payload[: len(bs.payload) // 2]})
    with pytest.raises(TruncatedStreamError):
        entropy_decode(short, tables)
