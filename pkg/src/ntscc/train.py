"""Two-phase optimisation: NTC pretraining, then joint NTSCC training.

Loss units: distortion is the per-pixel MSE on the 255 scale (or 1 - MS-SSIM);
rates are channel symbols per source dimension, i.e. eta * bits_y / m for the
latent and bits_z / (C_z m) for the hyperlatent.

All randomness is derived from (seed, stream name, step), so a run resumed
from a checkpoint replays exactly the batches and noise it would have seen.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .channel import ChannelConfig
from .metrics import ms_ssim
from .model import NTSCC, CodecConfig, rate_terms
from .rate import RateConfig
from .source import DatasetSpec, load_dataset, synth_texture
from .transforms import TransformConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 64.0
    eta: float = 0.2
    lr: float = 1e-4
    batch: int = 10
    steps: int = 1000
    snr_db: float = 10.0
    distortion: str = "mse"
    seed: int = 0
    clip: float = 0.0
    log_every: int = 50
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    # per-step eta drawn log-uniformly from [eta / j, eta * j]; 1 disables
    eta_jitter: float = 1.0

    def __post_init__(self):
        if self.lam <= 0 or self.eta <= 0:
            raise ValueError("lambda and eta must be positive")
        if self.eta_jitter < 1:
            raise ValueError("eta_jitter must be >= 1")
        if self.distortion not in ("mse", "one-minus-msssim"):
            raise ValueError(f"unknown distortion {self.distortion!r}")


def substream_seed(seed: int, name: str, step: int) -> int:
    h = hashlib.sha256(f"{seed}/{name}/{step}".encode()).digest()
    return int.from_bytes(h[:8], "little") & 0x7FFFFFFFFFFFFFFF


def generator(seed: int, name: str, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(substream_seed(seed, name, step))


def synthetic_batch(seed: int, step: int, batch: int, size: int, factor: int) -> torch.Tensor:
    base = substream_seed(seed, "data", step)
    imgs = [synth_texture((base + i) % (2 ** 63), size, factor=factor).pixels for i in range(batch)]
    return torch.from_numpy(np.stack(imgs))


def make_batches(spec: DatasetSpec | None, batch: int, size: int = 32, factor: int = 4
                 ) -> Callable[[int, int], torch.Tensor]:
    """Return ``get(seed, step) -> (B, H, W, 3)``.

    Synthetic data is drawn fresh per step; folder data is read once and
    sampled with the step's seed.
    """
    if spec is None or spec.kind == "synthetic-gauss-texture":
        crop = spec.crop if spec else size
        return lambda seed, step: synthetic_batch(seed, step, batch, crop, factor)
    pool = np.stack([im.pixels for im in load_dataset(spec)])

    def get(seed, step):
        rng = np.random.default_rng(substream_seed(seed, "data", step))
        return torch.from_numpy(pool[rng.integers(0, len(pool), batch)])

    return get


def distortion(x: torch.Tensor, x_hat: torch.Tensor, kind: str = "mse") -> torch.Tensor:
    if kind == "mse":
        return ((255.0 * (x - x_hat)) ** 2).mean()
    return (1.0 - ms_ssim(x, x_hat, differentiable=True)).mean()


def _check_finite(terms: dict, step: int):
    # components first so the diagnostic names the term that broke, not the sum
    for name, value in sorted(terms.items(), key=lambda kv: kv[0] == "loss"):
        if not torch.isfinite(value):
            raise TrainingDiverged(f"non-finite {name} at step {step}: {float(value)}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def ntc_loss(model: NTSCC, x: torch.Tensor, cfg: TrainConfig, noise_gen=None) -> tuple[torch.Tensor, dict]:
    out = model.forward_ntc(x, noise_gen)
    m = x[0].numel()
    k_y, k_z, bits_y, bits_z = rate_terms(out, model.rate, ChannelConfig(cfg.snr_db).capacity, m)
    d_ntc = distortion(x, out["x_ntc"], cfg.distortion)
    rate = k_y + k_z
    loss = cfg.lam * rate + d_ntc
    terms = {"loss": loss, "rate": rate, "d_ntc": d_ntc, "bits_y": bits_y, "bits_z": bits_z}
    return loss, terms


def ntscc_loss(model: NTSCC, x: torch.Tensor, cfg: TrainConfig, noise_gen=None, channel_gen=None,
               side_info: bool = True, index=None) -> tuple[torch.Tensor, dict]:
    """d(x, x_ntscc) + d(x, x_ntc) + lam * (k_y + k_z); the baseline uses d(x, x_hat) only."""
    out = model.forward_ntscc(x, cfg.snr_db, noise_gen, channel_gen, refine=side_info, index=index)
    m = x[0].numel()
    d_ntscc = distortion(x, out["x_hat"], cfg.distortion)
    if model.fixed_rate is not None:
        zero = d_ntscc.new_zeros(())
        terms = {"loss": d_ntscc, "rate": zero, "d_ntscc": d_ntscc, "d_ntc": zero}
        return d_ntscc, dict(terms, out=out)
    k_y, k_z, bits_y, bits_z = rate_terms(out, model.rate, ChannelConfig(cfg.snr_db).capacity, m,
                                          charge_z=side_info)
    d_ntc = distortion(x, out["x_ntc"], cfg.distortion)
    rate = k_y + k_z
    loss = d_ntscc + d_ntc + cfg.lam * rate
    terms = {"loss": loss, "rate": rate, "k_y": k_y, "k_z": k_z, "d_ntscc": d_ntscc, "d_ntc": d_ntc,
             "bits_y": bits_y, "bits_z": bits_z}
    return loss, dict(terms, out=out)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def model_spec(model: NTSCC) -> dict:
    codec = model.codec
    return {
        "transform": dataclasses.asdict(model.tcfg),
        "rate": {"eta": model.rate.eta, "values": list(model.rate.values), "kq": model.rate.kq},
        "codec": {"blocks_enc": len(codec.enc_blocks), "blocks_dec": len(codec.dec_blocks),
                  "rate_tokens": codec.use_tokens, "refine": codec.has_refiner},
        "fixed_rate": model.fixed_rate,
    }


def build_model(spec: dict) -> NTSCC:
    t = dict(spec["transform"])
    t["blocks"] = tuple(t["blocks"])
    r = spec["rate"]
    return NTSCC(TransformConfig(**t), RateConfig(r["eta"], tuple(r["values"]), r["kq"]),
                 CodecConfig(**spec["codec"]), fixed_rate=spec.get("fixed_rate"))


@dataclass
class Checkpoint:
    model: NTSCC
    optimizer_state: dict | None = None
    step: int = 0
    phase: str = "init"
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def state(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "model_spec": model_spec(self.model),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer_state,
            "step": self.step,
            "phase": self.phase,
            "config": json.dumps(self.config, sort_keys=True),
            "history": self.history,
        }

    def save(self, path: str) -> str:
        """Atomic write (temp file + rename); returns the sha256 of the file."""
        d = os.path.dirname(os.path.abspath(path))
        os.makedirs(d, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
        os.close(fd)
        torch.save(self.state(), tmp)
        os.replace(tmp, path)
        return file_sha256(path)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        state = torch.load(path, map_location="cpu", weights_only=False)
        if state.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {state.get('version')}")
        model = build_model(state["model_spec"])
        model.load_state_dict(state["model"])
        return cls(model, state["optimizer"], state["step"], state["phase"], json.loads(state["config"]),
                   state["history"])


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def _set_eta(model: NTSCC, eta: float) -> None:
    if model.rate.eta != eta:
        model.rate = RateConfig(eta, model.rate.values, model.rate.kq)


def step_eta(cfg: TrainConfig, step: int) -> float:
    if cfg.eta_jitter == 1.0:
        return cfg.eta
    u = float(torch.rand((), generator=generator(cfg.seed, "eta", step))) * 2.0 - 1.0
    return cfg.eta * cfg.eta_jitter ** u


def _run(model: NTSCC, cfg: TrainConfig, phase: str, step_loss, batches, params, init: Checkpoint | None):
    torch.manual_seed(substream_seed(cfg.seed, "init", 0) & 0xFFFFFFFF)
    _set_eta(model, cfg.eta)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    start = 0
    history = []
    if init is not None and init.phase == phase and init.optimizer_state is not None:
        opt.load_state_dict(init.optimizer_state)
        start = init.step
        history = list(init.history)
    ckpt = Checkpoint(model, opt.state_dict(), start, phase, dataclasses.asdict(cfg), history)
    for step in range(start, cfg.steps):
        model.train()
        x = batches(cfg.seed, step)
        _set_eta(model, step_eta(cfg, step))
        loss, terms = step_loss(x, step)
        scalars = {k: v.detach() for k, v in terms.items() if isinstance(v, torch.Tensor) and v.ndim == 0}
        _check_finite(scalars, step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.clip > 0:
            torch.nn.utils.clip_grad_norm_(params, cfg.clip)
        opt.step()
        record = {"step": step, **{k: float(v) for k, v in scalars.items()}}
        if cfg.eta_jitter != 1.0:
            record["eta"] = model.rate.eta
        if "out" in terms and model.fixed_rate is None:
            idx = terms["out"]["index"]
            record["mean_alloc"] = float(np.asarray(model.rate.values)[idx.numpy()].mean())
            if (idx == len(model.rate.values) - 1).all():
                log.warning("step %d: every patch allocated the maximum bandwidth", step)
        history.append(record)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("%s step %d %s", phase, step, " ".join(f"{k}={v:.4g}" for k, v in record.items() if k != "step"))
        ckpt.step = step + 1
        if cfg.checkpoint_every and cfg.checkpoint_path and (step + 1) % cfg.checkpoint_every == 0:
            ckpt.optimizer_state = opt.state_dict()
            _set_eta(model, cfg.eta)
            ckpt.save(cfg.checkpoint_path)
    _set_eta(model, cfg.eta)
    ckpt.optimizer_state = opt.state_dict()
    ckpt.history = history
    return ckpt


def pretrain_ntc(model: NTSCC, cfg: TrainConfig, batches=None, init: Checkpoint | None = None) -> Checkpoint:
    """Train g_a, g_s, h_a, h_s and the z density on the NTC objective (no channel)."""
    batches = batches or make_batches(None, cfg.batch, factor=model.tcfg.factor)
    groups = model.parameter_groups()
    params = groups["phi_g"] + groups["theta_g"] + groups["phi_h"] + groups["theta_h"]

    def step_loss(x, step):
        return ntc_loss(model, x, cfg, generator(cfg.seed, "noise", step))

    return _run(model, cfg, "ntc", step_loss, batches, params, init)


def train_ntscc(model: NTSCC, cfg: TrainConfig, batches=None, init: Checkpoint | None = None,
                side_info: bool = True) -> Checkpoint:
    """Joint training of all six parameter groups; codec heads are updated only
    for the rates selected in each batch."""
    batches = batches or make_batches(None, cfg.batch, factor=model.tcfg.factor)
    params = list(model.parameters())
    phase = "fixed" if model.fixed_rate is not None else ("ntscc" if side_info else "ntscc-noside")

    def step_loss(x, step):
        return ntscc_loss(model, x, cfg, generator(cfg.seed, "noise", step),
                          generator(cfg.seed, "channel", step), side_info=side_info)

    return _run(model, cfg, phase, step_loss, batches, params, init)


def transplant(src: NTSCC, dst: NTSCC, prefixes=("g_a.", "g_s.", "h_a.", "h_s.", "density.")) -> None:
    """Copy the transform and entropy-model weights of ``src`` into ``dst``."""
    state = {k: v for k, v in src.state_dict().items() if k.startswith(prefixes)}
    missing = dst.load_state_dict(state, strict=False)
    if missing.unexpected_keys:
        raise ValueError(f"unexpected keys {missing.unexpected_keys}")
