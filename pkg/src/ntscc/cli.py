"""Command-line entry point: ``ntscc <command> [flags]``.

Commands: pretrain, train, eval, transmit, ratemap, sweep. Errors end the
process with a non-zero code and one ``error: <Type>: <message>`` line on
stderr; argument errors exit with code 2.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import torch
from PIL import Image

from . import config as config_mod
from .channel import cbr
from .evaluate import csv_text, evaluate
from .metrics import psnr
from .source import read_image, synth_texture, load_dataset
from .train import Checkpoint, file_sha256, make_batches, pretrain_ntc, train_ntscc, transplant

log = logging.getLogger("ntscc")

COMMANDS = ("pretrain", "train", "eval", "transmit", "ratemap", "sweep")


def atomic_write(path: str, data: bytes | str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    with os.fdopen(fd, "wb") as f:
        f.write(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ntscc", description="Nonlinear transform source-channel coding toolkit")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", default="ntscc_out", help="output directory")
    p.add_argument("--seed", type=int, help="shortcut for train.seed, data.seed and eval.seed")
    p.add_argument("--snr", type=float, help="SNR in dB (training and evaluation)")
    p.add_argument("--lambda", dest="lam", type=float, help="shortcut for train.lambda")
    p.add_argument("--eta", type=float, help="shortcut for rate.eta")
    p.add_argument("--checkpoint", help="checkpoint to start from / evaluate")
    p.add_argument("--input", help="image for transmit / ratemap (default: a synthetic texture)")
    return p


def resolve_config(args) -> dict:
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"data.seed={args.seed}", f"eval.seed={args.seed}"]
    if args.snr is not None:
        overrides += [f"train.snr_db={args.snr}", f"eval.snrs={args.snr}"]
    if args.lam is not None:
        overrides.append(f"train.lambda={args.lam}")
    if args.eta is not None:
        overrides.append(f"rate.eta={args.eta}")
    return config_mod.load(args.config, overrides)


def _load_checkpoint(path: str | None, required: bool = True) -> Checkpoint | None:
    if not path:
        if required:
            raise config_mod.ConfigError("this command needs --checkpoint")
        return None
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    log.info("checkpoint %s sha256=%s", path, file_sha256(path))
    return Checkpoint.load(path)


def _save(ckpt: Checkpoint, path: str) -> None:
    digest = ckpt.save(path)
    log.info("wrote %s sha256=%s", path, digest)


def _write_history(history: list, path: str) -> None:
    if not history:
        atomic_write(path, "")
        return
    keys = sorted({k for h in history for k in h}, key=lambda k: (k != "step", k))
    lines = [",".join(keys)] + [",".join(str(h.get(k, "")) for k in keys) for h in history]
    atomic_write(path, "\n".join(lines) + "\n")


def _batches(cfg, model):
    spec = config_mod.dataset_spec(cfg, model.tcfg.factor)
    spec.validate()
    return make_batches(spec, cfg["train.batch"], spec.crop, model.tcfg.factor)


def _eval_images(cfg, factor) -> torch.Tensor:
    spec = config_mod.dataset_spec(cfg, factor)
    return torch.from_numpy(np.stack([im.pixels for im in load_dataset(spec)]))


def _input_image(args, cfg, factor):
    if args.input:
        pixels = read_image(args.input)
        name = os.path.basename(args.input)
    else:
        img = synth_texture(cfg["data.seed"], cfg["data.crop"], factor=factor)
        pixels, name = img.pixels, img.id
    h, w = pixels.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"image {name} of size {h}x{w} is not divisible by {factor}")
    return torch.from_numpy(np.ascontiguousarray(pixels))[None], name


# -- commands --------------------------------------------------------------------

def cmd_pretrain(args, cfg):
    ckpt = _load_checkpoint(args.checkpoint, required=False)
    model = ckpt.model if ckpt else config_mod.build_model(cfg)
    path = os.path.join(args.out, "ntc.pt")
    out = pretrain_ntc(model, config_mod.train_config(cfg, path), _batches(cfg, model), init=ckpt)
    out.config = cfg_snapshot(cfg)
    _save(out, path)
    _write_history(out.history, os.path.join(args.out, "pretrain_log.csv"))


def _ntscc_from(ckpt: Checkpoint, cfg) -> tuple:
    """Fresh codec on top of pretrained transforms, or a resumable NTSCC checkpoint."""
    if ckpt.phase == "ntc":
        model = config_mod.build_model(cfg)
        transplant(ckpt.model, model)
        return model, None
    return ckpt.model, ckpt


def train_one(cfg: dict, ckpt_path: str, out_path: str) -> list:
    ckpt = Checkpoint.load(ckpt_path)
    model, init = _ntscc_from(ckpt, cfg)
    out = train_ntscc(model, config_mod.train_config(cfg, out_path), _batches(cfg, model), init=init,
                      side_info=cfg["train.side_info"])
    out.config = cfg_snapshot(cfg)
    _save(out, out_path)
    return out.history


def cmd_train(args, cfg):
    _load_checkpoint(args.checkpoint)
    history = train_one(cfg, args.checkpoint, os.path.join(args.out, "ntscc.pt"))
    _write_history(history, os.path.join(args.out, "train_log.csv"))


def cmd_eval(args, cfg):
    model = _load_checkpoint(args.checkpoint).model
    images = _eval_images(cfg, model.tcfg.factor)
    name = "fixed" if model.fixed_rate is not None else "ntscc"
    side = cfg["train.side_info"] and model.fixed_rate is None
    points = [evaluate(model, images, s, cfg["eval.seed"], side_info=side, name=name, lam=cfg["train.lambda"])
              for s in cfg["eval.snrs"]]
    atomic_write(os.path.join(args.out, "rd.csv"), csv_text(points))
    for p in points:
        print(f"snr_db={p.snr_db:g} cbr={p.cbr:.5f} psnr_db={p.psnr_db:.3f} msssim_db={p.msssim_db:.3f}")


def cmd_transmit(args, cfg):
    model = _load_checkpoint(args.checkpoint).model
    model.eval()
    x, name = _input_image(args, cfg, model.tcfg.factor)
    snr = cfg["eval.snrs"][0]
    seed = cfg["eval.seed"]
    if model.fixed_rate is None and cfg["train.side_info"]:
        data, out = model.to_wire(x, snr, seed=seed)
        atomic_write(os.path.join(args.out, "frame.ntsc"), data)
    else:
        out = model.transmit(x, snr, seed=seed, side_info=False)
        log.info("no wire frame written: the model runs without side information")
    led = out["ledgers"][0]
    x_hat = out["x_hat"][0].numpy()
    report = {"image": name, "snr_db": snr, "seed": seed, "m": out["m"], "k_y": led.k_y, "k_z": led.k_z,
              "k_r": led.k_r, "cbr": cbr(led, out["m"]), "psnr_db": psnr(x[0].numpy(), x_hat)}
    png = io.BytesIO()
    Image.fromarray(np.round(x_hat * 255).astype(np.uint8)).save(png, format="PNG")
    atomic_write(os.path.join(args.out, "recon.png"), png.getvalue())
    atomic_write(os.path.join(args.out, "ledger.json"), json.dumps(report, indent=1))
    print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in report.items()))


def cmd_ratemap(args, cfg):
    model = _load_checkpoint(args.checkpoint).model
    model.eval()
    if model.fixed_rate is not None:
        raise ValueError("a fixed-rate model has no rate map")
    x, name = _input_image(args, cfg, model.tcfg.factor)
    out = model.transmit(x, cfg["eval.snrs"][0], seed=cfg["eval.seed"])
    gh, gw = x.shape[1] // model.tcfg.factor, x.shape[2] // model.tcfg.factor
    grid = model.costs(out["index"])[0].reshape(gh, gw)
    text = "\n".join(",".join(str(int(v)) for v in row) for row in grid) + "\n"
    atomic_write(os.path.join(args.out, "ratemap.csv"), text)
    print(f"# {name} {gh}x{gw} patches, distinct values {sorted(set(grid.reshape(-1).tolist()))}")
    print(text, end="")


def _sweep_job(job):
    cfg, ckpt_path, out_path = job
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    train_one(cfg, ckpt_path, out_path)
    return out_path


def cmd_sweep(args, cfg):
    if args.checkpoint:
        _load_checkpoint(args.checkpoint)
        ntc_path = args.checkpoint
    else:
        cmd_pretrain(args, cfg)
        ntc_path = os.path.join(args.out, "ntc.pt")
    jobs = []
    for lam in cfg["sweep.lambdas"]:
        sub = dict(cfg, **{"train.lambda": lam})
        jobs.append((sub, ntc_path, os.path.join(args.out, f"ntscc_lam{lam:g}.pt")))
    todo = [j for j in jobs if not os.path.exists(j[2])]
    if cfg["sweep.workers"] > 1 and len(todo) > 1:
        with ProcessPoolExecutor(cfg["sweep.workers"]) as pool:
            list(pool.map(_sweep_job, todo))
    else:
        for j in todo:
            train_one(*j)
    points = []
    images = None
    for sub, _, path in jobs:
        model = Checkpoint.load(path).model
        if images is None:
            images = _eval_images(cfg, model.tcfg.factor)
        for s in cfg["eval.snrs"]:
            points.append(evaluate(model, images, s, cfg["eval.seed"], side_info=sub["train.side_info"],
                                   name="ntscc", lam=sub["train.lambda"]))
    atomic_write(os.path.join(args.out, "sweep.csv"), csv_text(points))
    for p in points:
        print(f"lambda={p.lam:g} snr_db={p.snr_db:g} cbr={p.cbr:.5f} psnr_db={p.psnr_db:.3f}")


def cfg_snapshot(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


HANDLERS = {"pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval, "transmit": cmd_transmit,
            "ratemap": cmd_ratemap, "sweep": cmd_sweep}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        log.info("command=%s config_hash=%s seeds=train:%d,data:%d,eval:%d cache=%s", args.command,
                 config_mod.config_hash(cfg), cfg["train.seed"], cfg["data.seed"], cfg["eval.seed"],
                 os.environ.get("NTSCC_CACHE", "-"))
        HANDLERS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001 - reported as one line
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
