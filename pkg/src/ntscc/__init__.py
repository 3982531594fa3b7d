"""Nonlinear transform source-channel coding for wireless image transmission."""

from .channel import ChannelConfig, Ledger, awgn, cbr
from .metrics import RDPoint, bd_metrics, ms_ssim, msssim_db, psnr
from .model import NTSCC, CodecConfig
from .rate import RateAllocation, RateConfig, allocate, pack_rate_map, unpack_rate_map
from .transforms import TransformConfig

__version__ = "0.1.0"

__all__ = [
    "ChannelConfig", "Ledger", "awgn", "cbr", "RDPoint", "bd_metrics", "ms_ssim", "msssim_db", "psnr", "NTSCC",
    "CodecConfig", "RateAllocation", "RateConfig", "allocate", "pack_rate_map", "unpack_rate_map",
    "TransformConfig",
]
