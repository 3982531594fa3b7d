"""Nonlinear analysis/synthesis transforms and the convolutional hyper transforms.

Tensors are channels-last: images (B, H, W, 3), latents (B, gh, gw, c).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .entropy import SIGMA_MIN


class GeometryError(ValueError):
    pass


@dataclass
class TransformConfig:
    stages: int = 2
    blocks: tuple = (2, 6)
    c: int = 128
    heads: int = 8
    window: int = 8
    mlp_ratio: float = 4.0

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        if self.stages not in (2, 4):
            raise ValueError(f"stages must be 2 or 4, got {self.stages}")
        if len(self.blocks) != self.stages:
            raise ValueError(f"need one block count per stage, got {self.blocks}")
        if self.c <= 0 or self.c % self.heads:
            raise ValueError(f"embed dim {self.c} must be positive and divisible by {self.heads} heads")

    @property
    def factor(self) -> int:
        return 2 ** self.stages


def window_partition(x: torch.Tensor, wh: int, ww: int) -> torch.Tensor:
    b, h, w, c = x.shape
    x = x.view(b, h // wh, wh, w // ww, ww, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, wh * ww, c)


def window_merge(x: torch.Tensor, wh: int, ww: int, b: int, h: int, w: int) -> torch.Tensor:
    c = x.shape[-1]
    x = x.view(b, h // wh, w // ww, wh, ww, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping windows, with a learned
    relative position bias per head."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.bias_table, std=0.02)
        self._index_cache = {}

    def _rel_index(self, wh: int, ww: int) -> torch.Tensor:
        key = (wh, ww)
        if key not in self._index_cache:
            coords = torch.stack(torch.meshgrid(torch.arange(wh), torch.arange(ww), indexing="ij")).flatten(1)
            rel = coords[:, :, None] - coords[:, None, :]
            span = 2 * self.window - 1
            idx = (rel[0] + self.window - 1) * span + (rel[1] + self.window - 1)
            self._index_cache[key] = idx
        return self._index_cache[key]

    def window_shape(self, h: int, w: int) -> tuple[int, int]:
        wh, ww = min(self.window, h), min(self.window, w)
        if h % wh or w % ww:
            raise GeometryError(f"window {self.window} does not tile a {h}x{w} grid")
        return wh, ww

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        wh, ww = self.window_shape(h, w)
        win = window_partition(x, wh, ww)
        n = wh * ww
        qkv = self.qkv(win).view(-1, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.bias_table[self._rel_index(wh, ww).reshape(-1)].view(n, n, -1).permute(2, 0, 1)
        attn = torch.softmax(attn + bias.unsqueeze(0), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(-1, n, c)
        return window_merge(self.proj(out), wh, ww, b, h, w)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _stack(n: int, cfg: TransformConfig) -> nn.Sequential:
    return nn.Sequential(*[TransformerBlock(cfg.c, cfg.heads, cfg.window, cfg.mlp_ratio) for _ in range(n)])


def space_to_depth(x: torch.Tensor) -> torch.Tensor:
    """(B, H, W, C) -> (B, H/2, W/2, 4C), neighbours ordered (0,0),(0,1),(1,0),(1,1)."""
    b, h, w, c = x.shape
    x = x.view(b, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h // 2, w // 2, 4 * c)


def depth_to_space(x: torch.Tensor) -> torch.Tensor:
    b, h, w, c4 = x.shape
    c = c4 // 4
    x = x.view(b, h, w, 2, 2, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, 2 * h, 2 * w, c)


class PatchMerge(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = nn.Linear(4 * dim, dim)

    def forward(self, x):
        return self.reduce(self.norm(space_to_depth(x)))


class PatchSplit(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.expand = nn.Linear(dim, 4 * dim)

    def forward(self, x):
        return depth_to_space(self.expand(x))


class AnalysisTransform(nn.Module):
    """g_a: 2x2x3 patch embedding, then per stage a 2x merge (except the first)
    followed by that stage's Transformer blocks."""

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(12, cfg.c)
        self.embed_norm = nn.LayerNorm(cfg.c)
        self.merges = nn.ModuleList([PatchMerge(cfg.c) for _ in range(cfg.stages - 1)])
        self.stages = nn.ModuleList([_stack(n, cfg) for n in cfg.blocks])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[-1] != 3:
            raise GeometryError(f"expected (B, H, W, 3) images, got {tuple(x.shape)}")
        f = self.cfg.factor
        if x.shape[1] % f or x.shape[2] % f:
            raise GeometryError(f"image {x.shape[1]}x{x.shape[2]} not divisible by {f}")
        h = self.embed_norm(self.embed(space_to_depth(x)))
        h = self.stages[0](h)
        for merge, blocks in zip(self.merges, self.stages[1:]):
            h = blocks(merge(h))
        return h


class SynthesisTransform(nn.Module):
    """g_s: mirror of g_a with 2x patch splits; output is unclipped."""

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        self.cfg = cfg
        self.stages = nn.ModuleList([_stack(n, cfg) for n in reversed(cfg.blocks)])
        self.splits = nn.ModuleList([PatchSplit(cfg.c) for _ in range(cfg.stages - 1)])
        self.norm = nn.LayerNorm(cfg.c)
        self.head = nn.Linear(cfg.c, 12)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.ndim != 4 or y.shape[-1] != self.cfg.c:
            raise GeometryError(f"expected (B, gh, gw, {self.cfg.c}) latents, got {tuple(y.shape)}")
        h = self.stages[0](y)
        for split, blocks in zip(self.splits, self.stages[1:]):
            h = blocks(split(h))
        return depth_to_space(self.head(self.norm(h)))


def _to_nchw(t):
    return t.permute(0, 3, 1, 2)


def _to_nhwc(t):
    return t.permute(0, 2, 3, 1)


class HyperAnalysis(nn.Module):
    """h_a: conv3x3 -> ReLU -> conv3x3/2 -> ReLU -> conv3x3/2."""

    def __init__(self, c: int, cz: int | None = None):
        super().__init__()
        cz = cz or c
        self.net = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, cz, 3, stride=2, padding=1),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        gh, gw = y.shape[1:3]
        if gh < 4 or gw < 4 or gh % 4 or gw % 4:
            raise GeometryError(f"latent grid {gh}x{gw} cannot be downsampled by 4")
        return _to_nhwc(self.net(_to_nchw(y)))


class HyperSynthesis(nn.Module):
    """h_s: two stride-2 transposed convs with ReLU, then a conv3x3 emitting
    (mu, sigma); sigma = max(softplus(.), SIGMA_MIN)."""

    def __init__(self, c: int, cz: int | None = None, zero_init: bool = False):
        super().__init__()
        cz = cz or c
        self.c = c
        self.net = nn.Sequential(
            nn.ConvTranspose2d(cz, c, 3, stride=2, padding=1, output_padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c, c, 3, stride=2, padding=1, output_padding=1), nn.ReLU(),
            nn.Conv2d(c, 2 * c, 3, padding=1),
        )
        if zero_init:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = _to_nhwc(self.net(_to_nchw(z)))
        mu, raw = out.split(self.c, dim=-1)
        sigma = torch.clamp(F.softplus(raw), min=SIGMA_MIN)
        return mu, sigma
