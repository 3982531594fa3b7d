"""Variable-rate deep JSCC codec conditioned on per-patch rate tokens.

The encoder adds the rate token of each patch's allocated bandwidth, runs a
shared Transformer stack and projects every patch through the head of its
rate. The decoder mirrors this and optionally refines the tentative latent
with the hyperprior's (mu, sigma). Heads and tokens of rates absent from a
batch are never touched, so they receive no gradient.

Segments travel as a padded (B, l, v_max) tensor plus a validity mask;
``to_symbols``/``from_symbols`` convert to and from the flat patch-major
codeword of one image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .channel import Ledger
from .rate import FramingError, RateAllocation
from .transforms import TransformerBlock


@dataclass
class ChannelFrame:
    symbols: np.ndarray
    segments: np.ndarray
    ledger: Ledger


class RateAdaptiveCodec(nn.Module):
    def __init__(self, c: int, values, heads: int = 8, window: int = 8, blocks_enc: int = 4,
                 blocks_dec: int = 4, mlp_ratio: float = 4.0, rate_tokens: bool = True,
                 refine: bool = True):
        super().__init__()
        self.c = c
        self.values = tuple(int(v) for v in values)
        if max(self.values) > c:
            raise ValueError(f"bandwidth {max(self.values)} exceeds channel dimension {c}")
        self.vmax = max(self.values)
        self.use_tokens = rate_tokens
        self.enc_tokens = nn.ParameterList()
        self.dec_tokens = nn.ParameterList()
        if rate_tokens:
            for _ in self.values:
                self.enc_tokens.append(nn.Parameter(0.02 * torch.randn(c)))
                self.dec_tokens.append(nn.Parameter(0.02 * torch.randn(c)))
        self.enc_blocks = nn.Sequential(*[TransformerBlock(c, heads, window, mlp_ratio) for _ in range(blocks_enc)])
        self.dec_blocks = nn.Sequential(*[TransformerBlock(c, heads, window, mlp_ratio) for _ in range(blocks_dec)])
        self.enc_norm = nn.LayerNorm(c)
        self.enc_heads = nn.ModuleList([nn.Linear(c, v) for v in self.values])
        self.dec_heads = nn.ModuleList([nn.Linear(v, c) for v in self.values])
        self.has_refiner = refine
        if refine:
            self.refiner = nn.Sequential(nn.Linear(3 * c, 2 * c), nn.GELU(), nn.Linear(2 * c, c))
            nn.init.zeros_(self.refiner[-1].weight)
            nn.init.zeros_(self.refiner[-1].bias)

    # -- helpers -----------------------------------------------------------
    def segment_mask(self, index: torch.Tensor) -> torch.Tensor:
        lengths = torch.as_tensor(self.values, device=index.device)[index]
        return torch.arange(self.vmax, device=index.device) < lengths.unsqueeze(-1)

    def _check_index(self, index: torch.Tensor):
        if index.dtype not in (torch.int64, torch.int32):
            raise TypeError("rate index must be an integer tensor")
        if (index < 0).any() or (index >= len(self.values)).any():
            raise ValueError("rate index outside the bandwidth value set")

    def _tokens(self, table, index: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        out = torch.zeros_like(like)
        if not self.use_tokens:
            return out
        for r in torch.unique(index).tolist():
            sel = (index == r).unsqueeze(-1).to(like.dtype)
            out = out + sel * table[r]
        return out

    def index_for_costs(self, costs) -> torch.Tensor:
        """Map bandwidth values (e.g. 32) to head indices; unknown values raise."""
        lookup = {v: i for i, v in enumerate(self.values)}
        arr = np.asarray(costs)
        try:
            idx = np.vectorize(lambda v: lookup[int(v)], otypes=[np.int64])(arr)
        except KeyError as exc:
            raise ValueError(f"bandwidth {exc.args[0]} not in value set {self.values}") from None
        return torch.as_tensor(idx)

    # -- encoder -----------------------------------------------------------
    def encode(self, y: torch.Tensor, index: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """y (B, gh, gw, c), index (B, l) -> unit-power segments (B, l, vmax) and mask."""
        b, gh, gw, c = y.shape
        index = index.reshape(b, gh * gw)
        self._check_index(index)
        grid_index = index.view(b, gh, gw)
        h = y + self._tokens(self.enc_tokens, grid_index, y)
        h = self.enc_norm(self.enc_blocks(h)).reshape(b * gh * gw, c)
        flat_index = index.reshape(-1)
        seg = h.new_zeros(b * gh * gw, self.vmax)
        for r in torch.unique(flat_index).tolist():
            rows = (flat_index == r).nonzero(as_tuple=True)[0]
            out = self.enc_heads[r](h[rows])
            seg = seg.index_put((rows,), F.pad(out, (0, self.vmax - out.shape[-1])))
        seg = seg.view(b, gh * gw, self.vmax)
        mask = self.segment_mask(index)
        k = mask.sum(dim=(1, 2)).to(seg.dtype)
        power = (seg ** 2).sum(dim=(1, 2)) / k
        seg = seg / torch.sqrt(power).view(b, 1, 1)
        return seg, mask

    # -- decoder -----------------------------------------------------------
    def decode(self, s_hat: torch.Tensor, index: torch.Tensor, grid: tuple, mu=None, sigma=None,
               refine: bool = True) -> torch.Tensor:
        b = s_hat.shape[0]
        gh, gw = grid
        index = index.reshape(b, -1)
        if index.shape[1] != gh * gw or s_hat.shape[1] != gh * gw:
            raise FramingError(f"got {s_hat.shape[1]} segments for a {gh}x{gw} grid")
        self._check_index(index)
        flat_index = index.reshape(-1)
        flat = s_hat.reshape(b * gh * gw, -1)
        h = s_hat.new_zeros(b * gh * gw, self.c)
        for r in torch.unique(flat_index).tolist():
            rows = (flat_index == r).nonzero(as_tuple=True)[0]
            h = h.index_put((rows,), self.dec_heads[r](flat[rows, : self.values[r]]))
        h = h.view(b, gh, gw, self.c)
        h = h + self._tokens(self.dec_tokens, index.view(b, gh, gw), h)
        y_check = self.dec_blocks(h)
        if refine and self.has_refiner:
            if mu is None or sigma is None:
                raise ValueError("refinement needs the hyperprior mean and scale")
            y_check = y_check + self.refiner(torch.cat([y_check, mu, sigma], dim=-1))
        return y_check

    # -- single image frames -------------------------------------------------
    @staticmethod
    def to_symbols(seg: torch.Tensor, mask: torch.Tensor) -> np.ndarray:
        """Flatten one image's (l, vmax) segments into its patch-major codeword."""
        return seg[mask].detach().cpu().numpy()

    def from_symbols(self, symbols, alloc: RateAllocation, dtype=torch.float32) -> torch.Tensor:
        sym = torch.as_tensor(np.asarray(symbols), dtype=dtype).reshape(-1)
        if sym.numel() != alloc.k_y:
            raise FramingError(f"received {sym.numel()} symbols, allocation needs {alloc.k_y}")
        index = torch.as_tensor(alloc.index).reshape(1, -1)
        mask = self.segment_mask(index)
        seg = torch.zeros(mask.shape, dtype=dtype)
        seg[mask] = sym
        return seg

    def encode_frame(self, y: torch.Tensor, alloc: RateAllocation) -> ChannelFrame:
        """Encode a single latent (1, gh, gw, c) under ``alloc`` into a ChannelFrame."""
        if alloc.num_patches != y.shape[1] * y.shape[2]:
            raise FramingError(f"allocation covers {alloc.num_patches} patches, latent has {y.shape[1] * y.shape[2]}")
        if tuple(alloc.values) != self.values:
            raise ValueError("allocation value set differs from the codec's")
        index = torch.as_tensor(alloc.index).reshape(1, -1)
        with torch.no_grad():
            seg, mask = self.encode(y, index)
        return ChannelFrame(self.to_symbols(seg[0], mask[0]), alloc.costs, Ledger(k_y=alloc.k_y))
