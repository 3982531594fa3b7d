"""AWGN channel, bandwidth bookkeeping and the per-image wire format.

Real channel symbols are the unit of account: CBR = (k_y + k_z + k_r) / m.
The digital side links (hyperlatent bitstream and rate map) are treated as
ideal bit pipes charged at C_z = log2(1 + SNR) bits per symbol.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .rate import FramingError, RateAllocation, RateConfig, pack_rate_map, unpack_rate_map


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float
    seed: int = 0

    @property
    def noise_var(self) -> float:
        return 10.0 ** (-self.snr_db / 10.0)

    @property
    def capacity(self) -> float:
        """C_z in bits per real symbol."""
        return math.log2(1.0 + 10.0 ** (self.snr_db / 10.0))


def awgn(s, cfg: ChannelConfig | float, generator: torch.Generator | None = None):
    """s + n with n ~ N(0, 10^(-snr/10)); assumes unit average power in s.

    Numpy input draws from ``default_rng(cfg.seed)``; tensors draw from
    ``generator`` (or a fresh one seeded with ``cfg.seed``).
    """
    if not isinstance(cfg, ChannelConfig):
        cfg = ChannelConfig(float(cfg))
    std = math.sqrt(cfg.noise_var)
    if isinstance(s, torch.Tensor):
        if generator is None:
            generator = torch.Generator().manual_seed(cfg.seed)
        n = torch.randn(s.shape, generator=generator, dtype=s.dtype, device=s.device)
        return s + std * n
    s = np.asarray(s, dtype=np.float64)
    return s + std * np.random.default_rng(cfg.seed).standard_normal(s.shape)


def side_channel_cost(bits: float, cfg: ChannelConfig) -> float:
    if bits < 0:
        raise ValueError("bit count must be non-negative")
    return bits / cfg.capacity


@dataclass
class Ledger:
    """Channel symbols spent on one image: analog codeword, hyperlatent, rate map."""

    k_y: float = 0.0
    k_z: float = 0.0
    k_r: float = 0.0

    @property
    def total(self) -> float:
        return self.k_y + self.k_z + self.k_r

    def share(self, name: str) -> float:
        return getattr(self, name) / self.total if self.total else 0.0


def cbr(ledger: Ledger, m: int) -> float:
    if m <= 0:
        raise ValueError("source dimension must be positive")
    return ledger.total / m


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------

MAGIC = b"NTSC"
VERSION = 1


@dataclass
class WireFrame:
    grid: tuple
    rate: RateConfig
    snr_db: float
    alloc: RateAllocation
    z_stream: bytes
    z_digest: int
    symbols: np.ndarray


def write_frame(frame: WireFrame) -> bytes:
    """Header | rate map bits | u32 len, u32 crc, z bytes | float32 symbols."""
    gh, gw = frame.grid
    cfg = frame.rate
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIIII", VERSION, gh, gw, cfg.kq, len(cfg.values)))
    buf.write(struct.pack(f"<{len(cfg.values)}I", *cfg.values))
    buf.write(struct.pack("<f", frame.snr_db))
    buf.write(np.packbits(pack_rate_map(frame.alloc, cfg)).tobytes())
    buf.write(struct.pack("<II", len(frame.z_stream), frame.z_digest & 0xFFFFFFFF))
    buf.write(frame.z_stream)
    sym = np.asarray(frame.symbols, dtype="<f4")
    if sym.size != frame.alloc.k_y:
        raise FramingError(f"{sym.size} symbols do not match allocation total {frame.alloc.k_y}")
    buf.write(sym.tobytes())
    return buf.getvalue()


def read_frame(data: bytes, eta: float = 1.0) -> WireFrame:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FramingError("wire frame truncated")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FramingError("bad magic")
    version, gh, gw, kq, nv = struct.unpack("<IIIII", take(20))
    if version != VERSION:
        raise FramingError(f"unsupported wire version {version}")
    values = struct.unpack(f"<{nv}I", take(4 * nv))
    (snr_db,) = struct.unpack("<f", take(4))
    cfg = RateConfig(eta, values, kq)
    l = gh * gw
    nbytes = (l * kq + 7) // 8
    bits = np.unpackbits(np.frombuffer(take(nbytes), dtype=np.uint8))[: l * kq]
    alloc = unpack_rate_map(bits, cfg, l)
    zlen, zcrc = struct.unpack("<II", take(8))
    z_stream = take(zlen)
    k_y = alloc.k_y
    sym = np.frombuffer(take(4 * k_y), dtype="<f4").astype(np.float32)
    if pos != len(view):
        raise FramingError(f"{len(view) - pos} trailing bytes in wire frame")
    return WireFrame((gh, gw), cfg, float(snr_db), alloc, z_stream, zcrc, sym)
