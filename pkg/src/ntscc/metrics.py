"""Image quality metrics and Bjontegaard deltas."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP = 100.0
MSSSIM_DB_CAP = 40.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _as_nchw(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).to(torch.float64)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.shape[-1] == 3 and t.shape[1] != 3:
        t = t.permute(0, 3, 1, 2)
    return t


def mse255(x, x_hat) -> float:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((255.0 * (a - b)) ** 2))


def psnr(x, x_hat) -> float:
    """PSNR in dB of [0, 1] images, measured on the 255 scale."""
    err = mse255(x, x_hat)
    if err == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / err))


def _gauss_window(size: int, sigma: float, dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _ssim_terms(x, y, win):
    c = x.shape[1]
    wh = win.view(1, 1, -1, 1).repeat(c, 1, 1, 1)
    ww = win.view(1, 1, 1, -1).repeat(c, 1, 1, 1)

    def blur(t):
        return F.conv2d(F.conv2d(t, wh, groups=c), ww, groups=c)

    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x ** 2
    syy = blur(y * y) - mu_y ** 2
    sxy = blur(x * y) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    return (lum * cs).mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def msssim_setup(side: int) -> tuple[int, int]:
    """(scales, window) for an image side: 5 scales / 11 taps when possible,
    otherwise as many scales (at most 3) as a 7-tap window allows."""
    if side >= 11 * 16:
        return 5, 11
    for scales in (3, 2, 1):
        if side // 2 ** (scales - 1) >= 7:
            return scales, 7
    return 1, max(1, side - (1 - side % 2))


def ms_ssim(x, x_hat, scales: int | None = None, win_size: int | None = None,
            differentiable: bool = False):
    """Multi-scale SSIM of [0, 1] images (HxWx3, NxHxWx3 or NCHW).

    With fewer than five scales the leading standard weights are renormalised.
    Returns a float for numpy input, a per-image tensor when ``differentiable``.
    """
    if differentiable:
        a, b = x, x_hat
        if a.shape[-1] == 3 and a.shape[1] != 3:
            a, b = a.permute(0, 3, 1, 2), b.permute(0, 3, 1, 2)
    else:
        a, b = _as_nchw(x), _as_nchw(x_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    side = min(a.shape[-2:])
    if scales is None or win_size is None:
        s0, w0 = msssim_setup(side)
        scales = scales or s0
        win_size = win_size or w0
    if side // 2 ** (scales - 1) < win_size:
        raise ValueError(f"image side {side} too small for {scales} scales with window {win_size}")
    weights = torch.tensor(MSSSIM_WEIGHTS[:scales], dtype=a.dtype)
    weights = weights / weights.sum()
    win = _gauss_window(win_size, 1.5, a.dtype)
    css = []
    for i in range(scales):
        ssim, cs = _ssim_terms(a, b, win)
        if i < scales - 1:
            css.append(torch.relu(cs))
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
    vals = torch.stack(css + [torch.relu(ssim)], dim=-1)
    out = torch.prod(vals ** weights, dim=-1)
    if differentiable:
        return out
    return float(out.mean())


def msssim_db(v: float) -> float:
    """-10 log10(1 - v), capped at 40 dB."""
    return min(MSSSIM_DB_CAP, -10.0 * math.log10(max(1.0 - v, 10 ** (-MSSSIM_DB_CAP / 10))))


to_db = msssim_db


@dataclass
class RDPoint:
    cbr: float
    psnr_db: float
    msssim: float = float("nan")
    msssim_db: float = float("nan")
    snr_db: float = float("nan")
    cbr_y: float = 0.0
    cbr_z: float = 0.0
    cbr_ratemap: float = 0.0
    model: str = ""
    lam: float = float("nan")
    eta: float = float("nan")
    seed: int = 0
    extra: dict = field(default_factory=dict, repr=False)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        return d


def _points(curve):
    rates, quality = [], []
    for p in curve:
        if isinstance(p, RDPoint):
            rates.append(p.cbr)
            quality.append(p.psnr_db)
        else:
            rates.append(p[0])
            quality.append(p[1])
    r = np.asarray(rates, dtype=np.float64)
    q = np.asarray(quality, dtype=np.float64)
    if r.size < 4:
        raise ValueError("Bjontegaard deltas need at least 4 points per curve")
    if (r <= 0).any():
        raise ValueError("rates must be positive")
    return np.log10(r), q


def _mean_gap(xa, ya, xb, yb):
    lo = max(xa.min(), xb.min())
    hi = min(xa.max(), xb.max())
    if hi <= lo:
        raise ValueError("curves do not overlap")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pa = np.polyint(np.polyfit(xa, ya, 3))
        pb = np.polyint(np.polyfit(xb, yb, 3))
    ia = np.polyval(pa, hi) - np.polyval(pa, lo)
    ib = np.polyval(pb, hi) - np.polyval(pb, lo)
    return (ib - ia) / (hi - lo)


def bd_metrics(curve_a, curve_b) -> tuple[float, float]:
    """(BD-CBR in percent, BD-PSNR in dB) of curve_b relative to curve_a.

    Third-order fits of PSNR over log10(CBR) and vice versa, integrated over
    the overlapping interval. Negative BD-CBR means curve_b saves bandwidth.
    """
    la, qa = _points(curve_a)
    lb, qb = _points(curve_b)
    bd_psnr = _mean_gap(la, qa, lb, qb)
    log_gap = _mean_gap(qa, la, qb, lb)
    return float((10.0 ** log_gap - 1.0) * 100.0), float(bd_psnr)
