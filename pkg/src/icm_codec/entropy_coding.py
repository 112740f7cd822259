"""Range coding of quantized latents with per-channel fixed-point tables.

The coder is a carry-less 32-bit range coder (byte-wise renormalization)
driven by 16-bit frequency tables. Out-of-support values are sent as an
escape symbol followed by a raw 16-bit value. The container layout is
documented in ``docs/bitstream_format.md``.
"""

from __future__ import annotations

import bisect
import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .codec_core import ProbabilityModel
from .errors import ChecksumError, ConfigurationError, ModelMismatchError, TruncatedStreamError

PROB_BITS = 16
PROB_SCALE = 1 << PROB_BITS
DEFAULT_SUPPORT = 64

MAGIC = b"ICM1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBBIIIIHH16sI")
HEADER_SIZE = _HEADER.size
FOOTER_SIZE = 4

_MASK = 0xFFFFFFFF
_TOP = 1 << 24
_BOT = 1 << 16
RAW_OFFSET = 1 << 15


class RangeEncoder:
    """Carry-less range coder (Subbotin style) over 32-bit ``low``/``range``."""

    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()

    def encode(self, cum: int, freq: int, total_bits: int = PROB_BITS):
        r = self.range >> total_bits
        self.low = (self.low + r * cum) & _MASK
        self.range = r * freq
        self._normalize()

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) >= _TOP:
                if self.range >= _BOT:
                    return
                self.range = (-self.low) & (_BOT - 1)
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & _MASK
            self.range = (self.range << 8) & _MASK

    def finish(self) -> bytes:
        for _ in range(4):
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & _MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = _MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedStreamError("range decoder ran past the end of the payload")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_target(self, total_bits: int = PROB_BITS) -> int:
        self._r = self.range >> total_bits
        value = ((self.code - self.low) & _MASK) // self._r
        return min(value, (1 << total_bits) - 1)

    def consume(self, cum: int, freq: int):
        self.low = (self.low + self._r * cum) & _MASK
        self.range = self._r * freq
        while True:
            if (self.low ^ (self.low + self.range)) >= _TOP:
                if self.range >= _BOT:
                    return
                self.range = (-self.low) & (_BOT - 1)
            self.code = ((self.code << 8) | self._next_byte()) & _MASK
            self.low = (self.low << 8) & _MASK
            self.range = (self.range << 8) & _MASK


# ---------------------------------------------------------------------------
# coding tables


def quantize_pmf(pmf, precision: int = PROB_BITS) -> np.ndarray:
    """Integer frequencies summing to ``2**precision``, each at least 1.

    Mass is assigned as ``floor(p * (total - n)) + 1``; the remainder goes to
    the largest fractional parts (ties broken by index).
    """
    p = np.asarray(pmf, dtype=np.float64)
    n = p.size
    total = 1 << precision
    if n == 0 or n > total:
        raise ConfigurationError(f"cannot quantize a pmf of {n} symbols to {precision} bits")
    p = np.clip(p, 0.0, None)
    s = p.sum()
    p = p / s if s > 0 else np.full(n, 1.0 / n)
    scaled = p * (total - n)
    freqs = np.floor(scaled).astype(np.int64) + 1
    deficit = total - int(freqs.sum())
    if deficit:
        order = np.argsort(-(scaled - np.floor(scaled)), kind="stable")
        freqs[order[:deficit]] += 1
    return freqs


@dataclass
class CodingTable:
    """Per-channel frequencies over ``[-support, support]`` plus a trailing escape symbol."""

    support: int
    freqs: np.ndarray  # (C, 2 * support + 2), int64
    cum: np.ndarray = field(init=False)

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=np.int64)
        self.cum = np.concatenate(
            [np.zeros((self.freqs.shape[0], 1), dtype=np.int64), np.cumsum(self.freqs, axis=1)], axis=1
        )

    @property
    def channels(self) -> int:
        return self.freqs.shape[0]

    @property
    def escape(self) -> int:
        return 2 * self.support + 1

    def model_hash(self) -> bytes:
        h = hashlib.sha256()
        h.update(struct.pack("<HH", self.channels, self.support))
        h.update(self.freqs.astype("<u4").tobytes())
        return h.digest()[:16]

    def probabilities(self) -> np.ndarray:
        return self.freqs / PROB_SCALE

    def entropy(self) -> np.ndarray:
        """Entropy in bits of each channel's quantized distribution."""
        p = self.probabilities()
        return -(p * np.log2(p)).sum(axis=1)

    def symbol_bits(self, latent) -> float:
        """Ideal code length in bits of an integer latent ``(C, h, w)`` under the table."""
        q = _as_int_latent(latent, self.channels)
        bits = -np.log2(self.probabilities())
        sym = q + self.support
        out_of_range = (sym < 0) | (sym > 2 * self.support)
        sym = np.where(out_of_range, self.escape, sym)
        chan = np.arange(self.channels)[:, None, None]
        return float(bits[chan, sym].sum() + PROB_BITS * out_of_range.sum())


def model_pmf(pm: ProbabilityModel, support: int = DEFAULT_SUPPORT) -> np.ndarray:
    """Model pmf at integers ``[-support, support]`` plus tail mass, shape ``(C, 2L+2)``, float64."""
    values = torch.arange(-support, support + 1, dtype=torch.float64)
    values = values.unsqueeze(0).expand(pm.channels, -1)
    with torch.no_grad():
        probs = pm.pmf(values).numpy()
        lo = pm.cdf(torch.full((pm.channels, 1), -support - 0.5, dtype=torch.float64)).numpy()
        hi = pm.cdf(torch.full((pm.channels, 1), support + 0.5, dtype=torch.float64)).numpy()
    tail = np.clip(lo + (1.0 - hi), 0.0, None)
    return np.concatenate([probs, tail], axis=1)


def build_coding_tables(pm: ProbabilityModel, support: int = DEFAULT_SUPPORT) -> CodingTable:
    pmf = model_pmf(pm, support)
    freqs = np.stack([quantize_pmf(row) for row in pmf])
    return CodingTable(support, freqs)


# ---------------------------------------------------------------------------
# bitstream container


@dataclass
class Bitstream:
    height: int
    width: int
    padded_height: int
    padded_width: int
    channels: int
    support: int
    model_hash: bytes
    payload: bytes
    flags: int = 0

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.channels, self.padded_height // 8, self.padded_width // 8

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            self.flags,
            self.height,
            self.width,
            self.padded_height,
            self.padded_width,
            self.channels,
            self.support,
            self.model_hash,
            len(self.payload),
        )
        body = header + self.payload
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_SIZE + FOOTER_SIZE:
            raise TruncatedStreamError(f"stream of {len(data)} bytes is shorter than the header")
        (magic, version, flags, h, w, ph, pw, c, support, mhash, plen) = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ChecksumError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported bitstream version {version}")
        end = HEADER_SIZE + plen
        if len(data) < end + FOOTER_SIZE:
            raise TruncatedStreamError(f"payload truncated: need {end + FOOTER_SIZE} bytes, have {len(data)}")
        (crc,) = struct.unpack_from("<I", data, end)
        if zlib.crc32(data[:end]) != crc:
            raise ChecksumError("bitstream checksum mismatch")
        return cls(h, w, ph, pw, c, support, mhash, bytes(data[HEADER_SIZE:end]), flags)


def _as_int_latent(latent, channels: int) -> np.ndarray:
    if isinstance(latent, torch.Tensor):
        latent = latent.detach().cpu().numpy()
    arr = np.asarray(latent)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ConfigurationError("entropy coding handles one latent at a time")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != channels:
        raise ConfigurationError(f"latent shape {arr.shape} does not match {channels} channels")
    q = np.rint(arr)
    if not np.array_equal(q, arr):
        raise ConfigurationError("latent must hold integers; quantize with mode='round' first")
    return q.astype(np.int64)


def entropy_encode(
    latent,
    tables: CodingTable,
    original_size: Optional[tuple[int, int]] = None,
) -> Bitstream:
    """Range-code an integer latent ``(C, h, w)`` (or ``(1, C, h, w)``).

    Elements are visited in raster order with channels interleaved at each position.
    """
    q = _as_int_latent(latent, tables.channels)
    c, h, w = q.shape
    if original_size is None:
        original_size = (8 * h, 8 * w)
    L = tables.support
    sym = (q + L).transpose(1, 2, 0).reshape(-1)
    chan = np.tile(np.arange(c), h * w)
    cum, freqs = tables.cum, tables.freqs
    esc = tables.escape
    enc = RangeEncoder()
    for s, ch, v in zip(sym.tolist(), chan.tolist(), (q.transpose(1, 2, 0).reshape(-1)).tolist()):
        if 0 <= s <= 2 * L:
            enc.encode(int(cum[ch, s]), int(freqs[ch, s]))
        else:
            if not -RAW_OFFSET <= v < RAW_OFFSET:
                raise ConfigurationError(f"latent value {v} does not fit the 16-bit escape code")
            enc.encode(int(cum[ch, esc]), int(freqs[ch, esc]))
            enc.encode(v + RAW_OFFSET, 1)
    return Bitstream(
        height=int(original_size[0]),
        width=int(original_size[1]),
        padded_height=8 * h,
        padded_width=8 * w,
        channels=c,
        support=L,
        model_hash=tables.model_hash(),
        payload=enc.finish(),
    )


def entropy_decode(bs, tables: CodingTable) -> np.ndarray:
    """Inverse of :func:`entropy_encode`; accepts a :class:`Bitstream` or raw bytes.

    Returns an int64 array of shape ``(C, h, w)``.
    """
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bytes(bs))
    if bs.model_hash != tables.model_hash() or bs.support != tables.support or bs.channels != tables.channels:
        raise ModelMismatchError("bitstream was produced with a different probability model")
    c, h, w = bs.latent_shape
    L = tables.support
    esc = tables.escape
    cum_rows = [row.tolist() for row in tables.cum]
    freq_rows = [row.tolist() for row in tables.freqs]
    dec = RangeDecoder(bs.payload)
    out = np.empty(c * h * w, dtype=np.int64)
    for i in range(c * h * w):
        ch = i % c
        cum = cum_rows[ch]
        target = dec.decode_target()
        s = bisect.bisect_right(cum, target) - 1
        dec.consume(cum[s], freq_rows[ch][s])
        if s == esc:
            raw = dec.decode_target()
            dec.consume(raw, 1)
            out[i] = raw - RAW_OFFSET
        else:
            out[i] = s - L
    return out.reshape(h, w, c).transpose(2, 0, 1).copy()
