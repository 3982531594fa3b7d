"""Flat ``key = value`` run configuration.

Every key has a type and a default; files may contain ``#`` comments and
blank lines. Unknown keys and unparsable values raise ConfigError.
"""

from __future__ import annotations

import hashlib

from .model import NTSCC, CodecConfig
from .rate import RateConfig
from .source import DatasetSpec
from .train import TrainConfig
from .transforms import TransformConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.replace(" ", "").split(",") if v)


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.replace(" ", "").split(",") if v)


def _opt_int(s: str):
    return None if s.strip().lower() in ("", "none") else int(s)


# key: (parser, default, description)
KEYS = {
    "data.kind": (str, "synthetic-gauss-texture", "image-folder or synthetic-gauss-texture"),
    "data.path": (str, "", "folder of PNG/PPM images (image-folder only)"),
    "data.crop": (int, 32, "square crop side in pixels"),
    "data.count": (int, 200, "images per pass for folders; pool size for eval"),
    "data.seed": (int, 0, "seed of the crop / texture stream"),
    "model.stages": (int, 2, "2 or 4 Transformer stages"),
    "model.blocks": (_ints, (2, 6), "Transformer blocks per stage"),
    "model.c": (int, 128, "latent channels"),
    "model.heads": (int, 8, "attention heads"),
    "model.window": (int, 8, "attention window side"),
    "model.mlp_ratio": (float, 4.0, "MLP hidden width / c"),
    "codec.blocks_enc": (int, 4, "shared Transformer blocks in the channel encoder"),
    "codec.blocks_dec": (int, 4, "shared Transformer blocks in the channel decoder"),
    "codec.rate_tokens": (_bool, True, "condition the codec on learned rate tokens"),
    "codec.refine": (_bool, True, "refine the decoded latent with the hyperprior"),
    "codec.fixed_rate": (_opt_int, None, "fixed per-patch bandwidth (deep JSCC baseline); none = adaptive"),
    "rate.values": (_ints, tuple(range(4, 65, 4)), "bandwidth value set, 2**kq increasing integers"),
    "rate.kq": (int, 4, "rate-map bits per patch"),
    "rate.eta": (float, 0.1, "channel symbols per bit of latent entropy"),
    "train.lambda": (float, 64.0, "rate weight"),
    "train.lr": (float, 1e-4, "Adam learning rate"),
    "train.batch": (int, 10, "batch size"),
    "train.steps": (int, 1000, "optimizer steps"),
    "train.snr_db": (float, 10.0, "training channel SNR"),
    "train.distortion": (str, "mse", "mse or one-minus-msssim"),
    "train.seed": (int, 0, "seed of the data / noise / channel substreams"),
    "train.clip": (float, 0.0, "gradient-norm clip, 0 disables"),
    "train.eta_jitter": (float, 1.0, "per-step eta drawn log-uniformly in [eta/j, eta*j], 1 disables"),
    "train.side_info": (_bool, True, "charge and use the hyperprior side information"),
    "train.log_every": (int, 50, "log interval in steps"),
    "train.checkpoint_every": (int, 0, "periodic checkpoint interval, 0 disables"),
    "eval.snrs": (_floats, (10.0,), "test SNRs in dB"),
    "eval.seed": (int, 0, "channel noise seed at evaluation"),
    "sweep.lambdas": (_floats, (4.0, 64.0, 1024.0), "rate weights trained by the sweep command"),
    "sweep.workers": (int, 1, "worker processes for the sweep"),
}


def defaults() -> dict:
    return {k: v[1] for k, v in KEYS.items()}


def parse_value(key: str, raw: str):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return KEYS[key][0](raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_lines(lines, cfg: dict | None = None, source: str = "<overrides>") -> dict:
    cfg = dict(cfg or defaults())
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        cfg[key.strip()] = parse_value(key.strip(), raw)
    return cfg


def load(path: str | None = None, overrides=()) -> dict:
    cfg = defaults()
    if path:
        try:
            with open(path) as f:
                cfg = parse_lines(f.read().splitlines(), cfg, path)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_lines(overrides, cfg)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def dump(cfg: dict) -> str:
    return "".join(f"{k} = {_fmt(cfg[k])}\n" for k in sorted(cfg))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(dump(cfg).encode()).hexdigest()[:16]


# -- builders ------------------------------------------------------------------

def dataset_spec(cfg: dict, factor: int) -> DatasetSpec:
    return DatasetSpec(cfg["data.kind"], cfg["data.crop"], cfg["data.seed"], cfg["data.count"],
                       cfg["data.path"] or None, factor)


def rate_config(cfg: dict) -> RateConfig:
    return RateConfig(cfg["rate.eta"], cfg["rate.values"], cfg["rate.kq"])


def transform_config(cfg: dict) -> TransformConfig:
    return TransformConfig(cfg["model.stages"], cfg["model.blocks"], cfg["model.c"], cfg["model.heads"],
                           cfg["model.window"], cfg["model.mlp_ratio"])


def build_model(cfg: dict) -> NTSCC:
    codec = CodecConfig(cfg["codec.blocks_enc"], cfg["codec.blocks_dec"], cfg["codec.rate_tokens"],
                        cfg["codec.refine"])
    return NTSCC(transform_config(cfg), rate_config(cfg), codec, fixed_rate=cfg["codec.fixed_rate"])


def train_config(cfg: dict, checkpoint_path: str | None = None) -> TrainConfig:
    return TrainConfig(lam=cfg["train.lambda"], eta=cfg["rate.eta"], lr=cfg["train.lr"], batch=cfg["train.batch"],
                       steps=cfg["train.steps"], snr_db=cfg["train.snr_db"], distortion=cfg["train.distortion"],
                       seed=cfg["train.seed"], clip=cfg["train.clip"], log_every=cfg["train.log_every"],
                       checkpoint_every=cfg["train.checkpoint_every"], checkpoint_path=checkpoint_path,
                       eta_jitter=cfg["train.eta_jitter"])
