import pytest
import torch

from ntscc.transforms import (AnalysisTransform, GeometryError, HyperAnalysis, HyperSynthesis, SynthesisTransform,
                              TransformConfig, WindowAttention, depth_to_space, space_to_depth)
from ntscc.entropy import SIGMA_MIN

CFG = TransformConfig(stages=2, blocks=(1, 1), c=32, heads=4, window=4, mlp_ratio=2.0)


def test_shapes():
    torch.manual_seed(0)
    x = torch.rand(2, 32, 16, 3)
    y = AnalysisTransform(CFG)(x)
    assert y.shape == (2, 8, 4, 32)
    assert SynthesisTransform(CFG)(y).shape == x.shape


def test_four_stage_factor():
    cfg = TransformConfig(stages=4, blocks=(1, 1, 1, 1), c=16, heads=2, window=2)
    assert AnalysisTransform(cfg)(torch.rand(1, 32, 32, 3)).shape == (1, 2, 2, 16)


def test_bad_geometry():
    with pytest.raises(GeometryError):
        AnalysisTransform(CFG)(torch.rand(1, 30, 32, 3))
    with pytest.raises(GeometryError):
        WindowAttention(8, 2, 4)(torch.rand(1, 6, 8, 8))
    with pytest.raises(ValueError):
        TransformConfig(stages=3, blocks=(1, 1, 1))


def test_space_depth_inverse():
    x = torch.randn(2, 6, 4, 5)
    assert torch.equal(depth_to_space(space_to_depth(x)), x)


def test_window_attention_is_local():
    torch.manual_seed(1)
    attn = WindowAttention(8, 2, 4)
    x = torch.randn(1, 8, 8, 8)
    x2 = x.clone()
    x2[0, 0, 0] += 10.0  # lives in the top-left window
    d = (attn(x) - attn(x2)).abs().sum(-1)[0]
    assert d[:4, :4].min() > 0
    assert d[4:].max() == 0 and d[:, 4:].max() == 0


def test_hyper_transforms():
    torch.manual_seed(2)
    y = torch.randn(2, 8, 8, 32)
    z = HyperAnalysis(32)(y)
    assert z.shape == (2, 2, 2, 32)
    mu, sigma = HyperSynthesis(32)(z)
    assert mu.shape == y.shape and sigma.shape == y.shape
    assert sigma.min() >= SIGMA_MIN
    with pytest.raises(GeometryError):
        HyperAnalysis(32)(torch.randn(1, 6, 8, 32))


def test_zero_initialised_hyper_synthesis_gives_softplus_zero():
    hs = HyperSynthesis(16, zero_init=True)
    mu, sigma = hs(torch.zeros(1, 4, 4, 16))
    assert mu.shape == (1, 16, 16, 16)
    torch.testing.assert_close(sigma, torch.full_like(sigma, 0.6931471805599453))
    assert mu.abs().max() == 0


def test_transform_gradients_match_finite_differences():
    torch.manual_seed(4)
    ga = AnalysisTransform(CFG).double()
    gs = SynthesisTransform(CFG).double()
    ha, hs = HyperAnalysis(32).double(), HyperSynthesis(32).double()
    x = torch.rand(1, 32, 32, 3, dtype=torch.float64)

    def head():
        y = ga(x)
        mu, sigma = hs(ha(y))
        return gs(y).square().mean() + (mu * sigma).mean()

    head().backward()
    params = [p for m in (ga, gs, ha, hs) for p in m.parameters() if p.grad is not None]
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    with torch.no_grad():
        for _ in range(24):
            p = params[int(torch.randint(len(params), (1,), generator=g))]
            j = int(torch.randint(p.numel(), (1,), generator=g))
            flat, o, h = p.view(-1), p.view(-1)[j].item(), 1e-3
            flat[j] = o + h
            up = head().item()
            flat[j] = o - h
            down = head().item()
            flat[j] = o
            fd, an = (up - down) / (2 * h), p.grad.view(-1)[j].item()
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-9))
    assert worst <= 1e-2
