import math

import pytest
import torch

from ntscc.channel import ChannelConfig
from ntscc.train import (Checkpoint, TrainConfig, TrainingDiverged, generator, ntc_loss, ntscc_loss, pretrain_ntc,
                         step_eta, substream_seed, synthetic_batch, train_ntscc)

from conftest import small_model


def _batches(seed, step):
    return synthetic_batch(seed, step, 2, 16, 4)


def _cfg(**kw):
    base = dict(lam=64.0, eta=0.2, lr=1e-3, batch=2, steps=2, log_every=0)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=0)
    with pytest.raises(ValueError):
        TrainConfig(distortion="l1")


def test_substreams_are_distinct_and_stable():
    assert substream_seed(0, "noise", 3) == substream_seed(0, "noise", 3)
    assert len({substream_seed(0, n, 3) for n in ("noise", "channel", "data")}) == 3
    assert torch.equal(_batches(1, 4), _batches(1, 4))


def test_loss_decomposition(model):
    x = _batches(0, 0)
    cfg = _cfg()
    with torch.no_grad():
        loss, t = ntscc_loss(model, x, cfg, generator(0, "noise", 0), generator(0, "channel", 0))
    m = x[0].numel()
    out = t["out"]
    resum = ((255 * (x - out["x_hat"])) ** 2).mean() + ((255 * (x - out["x_ntc"])) ** 2).mean()
    b = x.shape[0]
    k_y = cfg.eta * (-torch.log2(out["lik_y"]).sum() / b) / m
    k_z = (-torch.log2(out["lik_z"]).sum() / b) / ChannelConfig(cfg.snr_db).capacity / m
    resum = resum + cfg.lam * (k_y + k_z)
    assert float(loss) == pytest.approx(float(resum), rel=1e-6)


def test_one_step_decreases_fixed_batch_loss():
    model = small_model(0)
    x = _batches(0, 0)
    cfg = _cfg(lr=1e-4)
    gen = lambda: generator(0, "noise", 0)  # noqa: E731
    with torch.no_grad():
        before, _ = ntc_loss(model, x, cfg, gen())
    pretrain_ntc(model, _cfg(lr=1e-4, steps=1), batches=lambda s, t: x)
    with torch.no_grad():
        after, _ = ntc_loss(model, x, cfg, gen())
    assert after.item() < before.item()


def test_zero_steps_leaves_model_unchanged():
    model = small_model(0)
    ref = {k: v.clone() for k, v in model.state_dict().items()}
    ck = pretrain_ntc(model, _cfg(steps=0), batches=_batches)
    assert ck.step == 0
    for k, v in model.state_dict().items():
        assert torch.equal(v, ref[k])


def test_absent_heads_untouched_by_training_step():
    model = small_model(0)
    ref = {k: v.clone() for k, v in model.state_dict().items()}
    ck = train_ntscc(model, _cfg(steps=1), batches=_batches)
    used = {r for r in range(16) if any(f"codec.enc_heads.{r}." in k and not torch.equal(v, ref[k])
                                        for k, v in model.state_dict().items())}
    assert used, "no head was updated"
    for r in set(range(16)) - used:
        for name in (f"codec.dec_heads.{r}.weight", f"codec.enc_tokens.{r}", f"codec.dec_tokens.{r}"):
            assert torch.equal(model.state_dict()[name], ref[name])
    assert ck.history[0]["mean_alloc"] > 0


def test_checkpoint_round_trip_and_resume(tmp_path):
    cfg = _cfg(steps=3)
    full = small_model(0)
    ck_full = train_ntscc(full, cfg, batches=_batches)

    part = small_model(0)
    ck = train_ntscc(part, _cfg(steps=2), batches=_batches)
    path = str(tmp_path / "ck.pt")
    ck.save(path)
    loaded = Checkpoint.load(path)
    x = _batches(9, 9)
    with torch.no_grad():
        a = part.forward_ntc(x, generator(1, "noise", 1))["x_ntc"]
        b = loaded.model.forward_ntc(x, generator(1, "noise", 1))["x_ntc"]
    assert torch.equal(a, b)
    resumed = train_ntscc(loaded.model, cfg, batches=_batches, init=loaded)
    assert resumed.history[-1]["loss"] == ck_full.history[-1]["loss"]
    for k, v in full.state_dict().items():
        assert torch.equal(v, loaded.model.state_dict()[k])


def test_nan_aborts_with_term_name():
    model = small_model(0)
    with torch.no_grad():
        model.g_s.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged, match="d_ntc"):
        pretrain_ntc(model, _cfg(steps=1), batches=_batches)


def test_degenerate_allocation_warns(caplog):
    model = small_model(0)
    with caplog.at_level("WARNING"):
        train_ntscc(model, _cfg(steps=1, eta=1000.0), batches=_batches)
    assert "maximum bandwidth" in caplog.text


def test_msssim_distortion_runs():
    model = small_model(0)
    x = synthetic_batch(0, 0, 2, 32, 4)
    with torch.no_grad():
        loss, t = ntc_loss(model, x, _cfg(distortion="one-minus-msssim"))
    assert 0 <= float(t["d_ntc"]) <= 1 and math.isfinite(float(loss))


def _heldout_loss(model, cfg):
    x = synthetic_batch(99, 0, 4, 16, 4)
    with torch.no_grad():
        return ntc_loss(model, x, cfg, generator(99, "noise", 0))[1]


def test_pretraining_reduces_heldout_loss():
    model = small_model(1)
    cfg = _cfg(lr=1e-3, steps=40, lam=16.0)
    before = _heldout_loss(model, cfg)["loss"].item()
    pretrain_ntc(model, cfg, batches=_batches)
    after = _heldout_loss(model, cfg)["loss"].item()
    assert after <= 0.8 * before


def test_vanishing_lambda_spends_more_rate():
    rates = {}
    for lam in (1e-6, 16.0):
        model = small_model(1)
        cfg = _cfg(lr=1e-3, steps=40, lam=lam)
        pretrain_ntc(model, cfg, batches=_batches)
        rates[lam] = _heldout_loss(model, cfg)["bits_y"].item()
    assert rates[1e-6] > rates[16.0]


def test_eta_jitter_range_and_determinism():
    cfg = _cfg(eta=0.1, eta_jitter=1.5)
    etas = [step_eta(cfg, s) for s in range(200)]
    assert etas == [step_eta(cfg, s) for s in range(200)]
    assert all(0.1 / 1.5 <= e <= 0.1 * 1.5 for e in etas)
    assert min(etas) < 0.08 and max(etas) > 0.13
    assert step_eta(_cfg(eta=0.1), 7) == 0.1
    with pytest.raises(ValueError):
        TrainConfig(eta_jitter=0.5)


def test_jittered_training_restores_eta_and_logs_it():
    model = small_model(0)
    ck = train_ntscc(model, _cfg(eta=0.2, eta_jitter=2.0, steps=3), batches=_batches)
    assert model.rate.eta == 0.2
    assert [h["eta"] for h in ck.history] == [step_eta(_cfg(eta=0.2, eta_jitter=2.0), s) for s in range(3)]
