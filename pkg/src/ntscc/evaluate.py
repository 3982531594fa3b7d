"""Evaluation: RD points from real transmissions, sweeps, ablations and CSV output."""

from __future__ import annotations

import csv
import io
import logging
import math

import numpy as np
import torch

from .channel import cbr
from .metrics import RDPoint, ms_ssim, msssim_db, msssim_setup, psnr
from .model import NTSCC
from .rate import RateConfig
from .source import SourceImage

log = logging.getLogger(__name__)

CSV_COLUMNS = ("model", "lambda", "eta", "snr_db", "cbr_total", "cbr_y", "cbr_z", "cbr_ratemap",
               "psnr_db", "msssim", "msssim_db", "seed")


def evaluate(model: NTSCC, images: torch.Tensor, snr_db: float, seed: int = 0, side_info: bool = True,
             batch: int = 25, name: str = "", lam: float = float("nan")) -> RDPoint:
    """Transmit ``images`` and average CBR, PSNR and MS-SSIM over images."""
    model.eval()
    rows = []
    side = min(images.shape[1:3])
    scales, win = msssim_setup(side)
    if scales < 5:
        log.debug("images of side %d: MS-SSIM uses %d scales with a %d-tap window", side, scales, win)
    for start in range(0, images.shape[0], batch):
        x = images[start:start + batch]
        out = model.transmit(x, snr_db, seed=seed + start, side_info=side_info)
        m = out["m"]
        for i, led in enumerate(out["ledgers"]):
            xi = x[i].numpy()
            yi = out["x_hat"][i].numpy()
            ms = ms_ssim(xi, yi, scales, win)
            rows.append((cbr(led, m), led.k_y / m, led.k_z / m, led.k_r / m, psnr(xi, yi), ms))
    a = np.asarray(rows, dtype=np.float64).mean(axis=0)
    return RDPoint(cbr=float(a[0]), psnr_db=float(a[4]), msssim=float(a[5]), msssim_db=msssim_db(float(a[5])),
                   snr_db=snr_db, cbr_y=float(a[1]), cbr_z=float(a[2]), cbr_ratemap=float(a[3]), model=name,
                   lam=lam, eta=model.rate.eta if model.fixed_rate is None else float("nan"), seed=seed,
                   extra={"msssim_scales": scales, "msssim_window": win, "images": len(rows)})


def rd_sweep(models: dict, images: torch.Tensor, snr_db: float, seed: int = 0, **kw) -> list[RDPoint]:
    """One RD point per ``{lambda: model}`` entry, ordered by lambda."""
    return [evaluate(m, images, snr_db, seed, name=kw.get("name", "ntscc"), lam=lam)
            for lam, m in sorted(models.items())]


def snr_sweep(model: NTSCC, images: torch.Tensor, snrs, seed: int = 0, **kw) -> list[RDPoint]:
    """Evaluate a model trained at one SNR across several test SNRs."""
    return [evaluate(model, images, float(s), seed, **kw) for s in snrs]


def with_eta(model: NTSCC, eta: float) -> NTSCC:
    """Change the bandwidth scaling of a trained model in place and return it."""
    r = model.rate
    model.rate = RateConfig(eta, r.values, r.kq)
    return model


def calibrate_eta(model: NTSCC, images: torch.Tensor, target: float, snr_db: float, side_info: bool = True,
                  tol: float = 0.01, iters: int = 30) -> float:
    """Bisect eta (log scale) until the measured total CBR is within ``tol`` of ``target``."""
    lo, hi = math.log(model.rate.eta) - 4.0, math.log(model.rate.eta) + 4.0
    best = model.rate.eta
    best_err = float("inf")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        with_eta(model, math.exp(mid))
        got = evaluate(model, images, snr_db, side_info=side_info).cbr
        err = abs(got - target) / target
        if err < best_err:
            best, best_err = math.exp(mid), err
        if err <= tol:
            break
        if got > target:
            hi = mid
        else:
            lo = mid
    with_eta(model, best)
    return best


def fixed_rate_for(target_cbr: float, num_patches: int, m: int, c: int) -> int:
    """Per-patch bandwidth of a fixed-rate model whose CBR is closest to ``target_cbr``."""
    k = int(round(target_cbr * m / num_patches))
    return max(1, min(c, k))


def allocation_by_block(model: NTSCC, images: list[SourceImage], snr_db: float = 10.0) -> dict:
    """Mean allocated bandwidth per synthetic block kind.

    Each ``block_size`` block covers (block_size / factor)^2 latent patches.
    """
    f = model.tcfg.factor
    sums: dict[int, list] = {}
    x = torch.from_numpy(np.stack([im.pixels for im in images]))
    out = model.transmit(x, snr_db)
    costs = model.costs(out["index"])
    for im, cost in zip(images, costs):
        bs = im.block_size // f
        gh, gw = im.pixels.shape[0] // f, im.pixels.shape[1] // f
        grid = cost.reshape(gh, gw)
        per_block = grid.reshape(gh // bs, bs, gw // bs, bs).mean(axis=(1, 3))
        for kind in np.unique(im.blocks):
            sums.setdefault(int(kind), []).extend(per_block[im.blocks == kind].tolist())
    return {k: float(np.mean(v)) for k, v in sums.items()}


def csv_text(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for p in points:
        w.writerow([p.model, p.lam, p.eta, p.snr_db, p.cbr, p.cbr_y, p.cbr_z, p.cbr_ratemap,
                    p.psnr_db, p.msssim, p.msssim_db, p.seed])
    return buf.getvalue()


def write_csv(points, path: str) -> None:
    with open(path, "w", newline="") as f:
        f.write(csv_text(points))


def read_csv(path: str) -> list[RDPoint]:
    out = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            out.append(RDPoint(cbr=float(r["cbr_total"]), psnr_db=float(r["psnr_db"]), msssim=float(r["msssim"]),
                               msssim_db=float(r["msssim_db"]), snr_db=float(r["snr_db"]), cbr_y=float(r["cbr_y"]),
                               cbr_z=float(r["cbr_z"]), cbr_ratemap=float(r["cbr_ratemap"]), model=r["model"],
                               lam=float(r["lambda"]), eta=float(r["eta"]), seed=int(r["seed"])))
    return out
