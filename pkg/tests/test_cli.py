import json
import os

import numpy as np
import pytest
from PIL import Image

from ntscc import config
from ntscc.cli import run

TINY = [
    "model.blocks=1,1", "model.c=32", "model.heads=4", "model.window=4", "model.mlp_ratio=2",
    "codec.blocks_enc=1", "codec.blocks_dec=1", "rate.values=" + ",".join(str(v) for v in range(2, 33, 2)),
    "data.crop=16", "data.count=4", "train.batch=2", "train.steps=2", "train.log_every=0", "sweep.lambdas=4,1024",
]


def _args(*extra):
    out = []
    for kv in TINY:
        out += ["--set", kv]
    return out + list(extra)


def test_config_parsing(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\ntrain.lambda = 16\n\nrate.values = 4,8\n")
    cfg = config.load(str(f), ["train.steps=5"])
    assert cfg["train.lambda"] == 16.0 and cfg["rate.values"] == (4, 8) and cfg["train.steps"] == 5
    with pytest.raises(config.ConfigError):
        config.load(None, ["nope=1"])
    with pytest.raises(config.ConfigError):
        config.load(None, ["train.steps=abc"])
    assert config.config_hash(config.defaults()) == config.config_hash(config.load())
    assert config.config_hash(cfg) != config.config_hash(config.load())


def test_every_key_documented():
    readme = open(os.path.join(os.path.dirname(__file__), "..", "README.md")).read()
    missing = [k for k in config.KEYS if f"`{k}`" not in readme]
    assert not missing


def test_unknown_flag_exits_2(capsys):
    assert run(["eval", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_config_single_line_error(capsys):
    assert run(["eval", "--set", "rate.kq=x"]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ConfigError:")


def test_missing_checkpoint(capsys, tmp_path):
    assert run(["eval", "--checkpoint", str(tmp_path / "none.pt")]) == 1
    assert "FileNotFoundError" in capsys.readouterr().err


def test_full_pipeline(tmp_path, capsys):
    out = str(tmp_path)
    assert run(["pretrain", "--out", out] + _args()) == 0
    ntc = os.path.join(out, "ntc.pt")
    assert os.path.exists(ntc) and os.path.exists(os.path.join(out, "pretrain_log.csv"))
    assert run(["train", "--out", out, "--checkpoint", ntc, "--lambda", "16"] + _args()) == 0
    ck = os.path.join(out, "ntscc.pt")
    assert run(["eval", "--out", out, "--checkpoint", ck, "--set", "eval.snrs=4,10"] + _args()) == 0
    rows = open(os.path.join(out, "rd.csv")).read().splitlines()
    assert rows[0].startswith("model,lambda,eta,snr_db,cbr_total") and len(rows) == 3

    capsys.readouterr()
    assert run(["transmit", "--out", out, "--checkpoint", ck, "--snr", "10"] + _args()) == 0
    line = capsys.readouterr().out.strip()
    for key in ("k_y=", "k_z=", "k_r=", "cbr=", "psnr_db="):
        assert key in line
    report = json.load(open(os.path.join(out, "ledger.json")))
    assert report["cbr"] == pytest.approx((report["k_y"] + report["k_z"] + report["k_r"]) / report["m"])
    assert os.path.getsize(os.path.join(out, "frame.ntsc")) > 0
    assert np.asarray(Image.open(os.path.join(out, "recon.png"))).shape == (16, 16, 3)

    img = tmp_path / "in.png"
    Image.fromarray(np.random.default_rng(0).integers(0, 256, (16, 32, 3), dtype=np.uint8)).save(img)
    assert run(["ratemap", "--out", out, "--checkpoint", ck, "--input", str(img)] + _args()) == 0
    grid = open(os.path.join(out, "ratemap.csv")).read().split()
    assert len(grid) == 4 and all(len(r.split(",")) == 8 for r in grid)

    sweep = str(tmp_path / "sweep")
    assert run(["sweep", "--out", sweep, "--checkpoint", ntc] + _args()) == 0
    rows = open(os.path.join(sweep, "sweep.csv")).read().splitlines()
    assert len(rows) == 3
    assert not [f for f in os.listdir(out) if f.endswith(".tmp")]
