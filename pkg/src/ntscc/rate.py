"""Per-patch channel bandwidth allocation and the rate-map side information."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RateConfigError(ValueError):
    pass


class FramingError(ValueError):
    pass


@dataclass(frozen=True)
class RateConfig:
    eta: float
    values: tuple
    kq: int

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise RateConfigError("empty bandwidth value set")
        if len(vals) != 2 ** self.kq:
            raise RateConfigError(f"value set has {len(vals)} members, need 2**kq = {2 ** self.kq}")
        if any(b <= a for a, b in zip(vals, vals[1:])) or vals[0] <= 0:
            raise RateConfigError("bandwidth values must be positive and strictly increasing")
        if self.eta <= 0:
            raise RateConfigError("eta must be positive")

    @classmethod
    def evenly_spaced(cls, lo: int, hi: int, kq: int = 4, eta: float = 0.2) -> "RateConfig":
        n = 2 ** kq
        step = (hi - lo) // (n - 1)
        if lo + step * (n - 1) != hi:
            raise RateConfigError(f"cannot space {n} integers evenly from {lo} to {hi}")
        return cls(eta, tuple(range(lo, hi + 1, step)), kq)

    def check_channels(self, c: int) -> None:
        if max(self.values) > c:
            raise RateConfigError(f"max bandwidth {max(self.values)} exceeds channel dimension {c}")


@dataclass
class RateAllocation:
    """Indices into ``RateConfig.values`` for each latent patch (patch-major)."""

    index: np.ndarray
    values: tuple

    @property
    def costs(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.int64)[self.index]

    @property
    def k_y(self) -> int:
        return int(self.costs.sum())

    @property
    def num_patches(self) -> int:
        return int(self.index.size)

    def rate_map_bits(self, kq: int) -> int:
        return self.num_patches * kq


def quantize_bandwidth(k, values) -> np.ndarray:
    """Nearest member of ``values`` (ties go to the larger), clamped to its range.

    Returns indices into ``values``; works elementwise on any array shape.
    """
    v = np.asarray(values, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    # a midpoint tie lands in the upper cell because of side="right"
    mids = (v[1:] + v[:-1]) / 2.0
    return np.searchsorted(mids, k, side="right").astype(np.int64)


def allocate(per_patch_bits, cfg: RateConfig) -> RateAllocation:
    bits = np.asarray(per_patch_bits, dtype=np.float64)
    if (bits < 0).any():
        raise ValueError("per-patch bits must be non-negative")
    return RateAllocation(quantize_bandwidth(cfg.eta * bits, cfg.values), cfg.values)


def pack_rate_map(alloc: RateAllocation, cfg: RateConfig) -> np.ndarray:
    """Rate map as a flat uint8 bit vector, kq bits per patch, MSB first."""
    idx = np.asarray(alloc.index, dtype=np.int64).reshape(-1)
    if (idx < 0).any() or (idx >= len(cfg.values)).any():
        raise ValueError("allocation index outside the value set")
    shifts = np.arange(cfg.kq - 1, -1, -1)
    return ((idx[:, None] >> shifts[None, :]) & 1).astype(np.uint8).reshape(-1)


def unpack_rate_map(bits, cfg: RateConfig, num_patches: int) -> RateAllocation:
    b = np.asarray(bits, dtype=np.int64).reshape(-1)
    if b.size != num_patches * cfg.kq:
        raise FramingError(f"rate map holds {b.size} bits, expected {num_patches * cfg.kq}")
    weights = 1 << np.arange(cfg.kq - 1, -1, -1)
    idx = (b.reshape(num_patches, cfg.kq) * weights).sum(axis=1)
    return RateAllocation(idx.astype(np.int64), cfg.values)


def patch_count(height: int, width: int, stages: int) -> int:
    f = 2 ** stages
    if height % f or width % f:
        raise ValueError(f"{height}x{width} is not divisible by {f}")
    return (height // f) * (width // f)
