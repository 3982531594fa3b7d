"""Full NTSCC system: transforms, entropy models, rate allocation and codec.

``forward_ntc`` and ``forward_ntscc`` are the training paths (uniform noise
proxies, continuous rates); ``transmit`` is the test path with rounding,
discrete pmfs, range coding of the hyperlatent and exact channel accounting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import rangecoder
from .channel import ChannelConfig, Ledger, WireFrame, awgn, read_frame, side_channel_cost, write_frame
from .codec import RateAdaptiveCodec
from .entropy import FactorizedDensity, Z_SUPPORT, clamp_support, gaussian_likelihood, noise_proxy, quantize_round
from .rate import RateAllocation, RateConfig, quantize_bandwidth
from .transforms import AnalysisTransform, HyperAnalysis, HyperSynthesis, SynthesisTransform, TransformConfig


@dataclass
class CodecConfig:
    blocks_enc: int = 4
    blocks_dec: int = 4
    rate_tokens: bool = True
    refine: bool = True


class NTSCC(nn.Module):
    """g_a/g_s/h_a/h_s + factorized z density + rate-adaptive JSCC codec.

    ``fixed_rate`` turns the system into the deep JSCC baseline: one bandwidth
    per patch, no rate tokens, no refinement and no side information.
    """

    def __init__(self, tcfg: TransformConfig, rate: RateConfig, codec: CodecConfig | None = None,
                 fixed_rate: int | None = None):
        super().__init__()
        codec = codec or CodecConfig()
        self.tcfg = tcfg
        self.rate = rate
        self.fixed_rate = fixed_rate
        rate.check_channels(tcfg.c)
        self.g_a = AnalysisTransform(tcfg)
        self.g_s = SynthesisTransform(tcfg)
        self.h_a = HyperAnalysis(tcfg.c)
        self.h_s = HyperSynthesis(tcfg.c)
        self.density = FactorizedDensity(tcfg.c)
        if fixed_rate is None:
            self.codec = RateAdaptiveCodec(tcfg.c, rate.values, tcfg.heads, tcfg.window, codec.blocks_enc,
                                           codec.blocks_dec, tcfg.mlp_ratio, codec.rate_tokens, codec.refine)
        else:
            self.codec = RateAdaptiveCodec(tcfg.c, (fixed_rate,), tcfg.heads, tcfg.window, codec.blocks_enc,
                                           codec.blocks_dec, tcfg.mlp_ratio, rate_tokens=False, refine=False)

    # parameter groups: phi_g, theta_g, phi_h, theta_h (+psi), phi_f, theta_f*
    def parameter_groups(self) -> dict:
        enc = [p for n, p in self.codec.named_parameters() if n.startswith(("enc_", "enc."))]
        dec = [p for n, p in self.codec.named_parameters() if not n.startswith(("enc_", "enc."))]
        return {
            "phi_g": list(self.g_a.parameters()),
            "theta_g": list(self.g_s.parameters()),
            "phi_h": list(self.h_a.parameters()),
            "theta_h": list(self.h_s.parameters()) + list(self.density.parameters()),
            "phi_f": enc,
            "theta_f": dec,
        }

    def hyper(self, y: torch.Tensor, generator=None):
        """z, noisy z (training proxy), mu, sigma and z likelihoods."""
        z = self.h_a(y)
        z_tilde = noise_proxy(z, generator)
        mu, sigma = self.h_s(z_tilde)
        return z, z_tilde, mu, sigma, self.density.likelihood(z_tilde)

    def forward_ntc(self, x: torch.Tensor, generator=None) -> dict:
        y = self.g_a(x)
        _, _, mu, sigma, lik_z = self.hyper(y, generator)
        y_tilde = noise_proxy(y, generator)
        lik_y = gaussian_likelihood(y_tilde, mu, sigma)
        return {"y": y, "x_ntc": self.g_s(y_tilde), "lik_y": lik_y, "lik_z": lik_z, "mu": mu, "sigma": sigma}

    def allocation_index(self, patch_bits: torch.Tensor) -> torch.Tensor:
        """Bits per patch (B, gh, gw) -> value-set indices, no gradient."""
        k = self.rate.eta * patch_bits.detach().cpu().numpy()
        return torch.as_tensor(quantize_bandwidth(k, self.rate.values)).reshape(patch_bits.shape[0], -1)

    def forward_ntscc(self, x: torch.Tensor, snr_db: float, noise_gen=None, channel_gen=None,
                      refine: bool = True, index: torch.Tensor | None = None) -> dict:
        out = self.forward_ntc(x, noise_gen)
        y = out["y"]
        grid = y.shape[1:3]
        if self.fixed_rate is not None:
            index = torch.zeros(y.shape[0], grid[0] * grid[1], dtype=torch.int64)
        elif index is None:
            patch_bits = -torch.log2(out["lik_y"]).sum(dim=-1)
            index = self.allocation_index(patch_bits)
        seg, mask = self.codec.encode(y, index)
        s_hat = awgn(seg, ChannelConfig(snr_db), generator=channel_gen)
        y_hat = self.codec.decode(s_hat, index, grid, out["mu"], out["sigma"], refine=refine)
        out.update(x_hat=self.g_s(y_hat), index=index, mask=mask, seg=seg)
        return out

    # -- test path -------------------------------------------------------------
    def z_tables(self):
        pmf = self.density.pmf_table(Z_SUPPORT).double().cpu().numpy()
        return [rangecoder.quantize_pmf(p, -Z_SUPPORT) for p in pmf]

    @torch.no_grad()
    def transmit(self, x: torch.Tensor, snr_db: float, seed: int = 0, side_info: bool = True,
                 tables=None) -> dict:
        """Send a batch of images over AWGN at ``snr_db`` and report per-image ledgers.

        With ``side_info=False`` the decoder skips refinement and the hyperlatent
        bitstream is not charged (the transmitter still uses it for allocation).
        """
        chan = ChannelConfig(snr_db, seed)
        y = self.g_a(x)
        b, gh, gw, _ = y.shape
        m = x.shape[1] * x.shape[2] * x.shape[3]
        ledgers = [Ledger() for _ in range(b)]
        streams = [b""] * b
        if self.fixed_rate is None:
            z_bar = quantize_round(clamp_support(self.h_a(y)))
            mu, sigma = self.h_s(z_bar)
            lik = gaussian_likelihood(quantize_round(y), mu, sigma)
            patch_bits = -torch.log2(lik).sum(dim=-1)
            index = self.allocation_index(patch_bits)
            tables = tables or self.z_tables()
            cz = z_bar.shape[-1]
            for i in range(b):
                sym = z_bar[i].reshape(-1).to(torch.int64).numpy()
                chan_idx = np.tile(np.arange(cz), sym.size // cz)
                if side_info:
                    stream = rangecoder.range_encode(sym, tables, chan_idx)
                    streams[i] = stream.data
                    ledgers[i].k_z = side_channel_cost(stream.bit_length, chan)
                ledgers[i].k_r = side_channel_cost(gh * gw * self.rate.kq, chan)
        else:
            mu = sigma = None
            patch_bits = None
            index = torch.zeros(b, gh * gw, dtype=torch.int64)
        seg, mask = self.codec.encode(y, index)
        k_y = mask.sum(dim=(1, 2))
        for i in range(b):
            ledgers[i].k_y = float(k_y[i])
        gen = torch.Generator().manual_seed(seed)
        s_hat = awgn(seg, chan, generator=gen)
        y_hat = self.codec.decode(s_hat, index, (gh, gw), mu, sigma, refine=side_info)
        x_hat = self.g_s(y_hat).clamp(0.0, 1.0)
        return {
            "x_hat": x_hat, "index": index, "ledgers": ledgers, "m": m, "patch_bits": patch_bits,
            "z_streams": streams, "mask": mask, "seg": seg,
        }

    def to_wire(self, x: torch.Tensor, snr_db: float, seed: int = 0) -> tuple[bytes, dict]:
        """Transmit one image and serialise what the transmitter puts on the air."""
        if x.shape[0] != 1 or self.fixed_rate is not None:
            raise ValueError("wire frames carry exactly one image of a rate-adaptive model")
        tables = self.z_tables()
        out = self.transmit(x, snr_db, seed=seed, tables=tables)
        grid = (x.shape[1] // self.tcfg.factor, x.shape[2] // self.tcfg.factor)
        alloc = RateAllocation(out["index"][0].numpy(), self.rate.values)
        symbols = self.codec.to_symbols(out["seg"][0], out["mask"][0])
        frame = WireFrame(grid, self.rate, snr_db, alloc, out["z_streams"][0], rangecoder.tables_digest(tables),
                          symbols)
        return write_frame(frame), out

    @torch.no_grad()
    def receive(self, data: bytes, seed: int = 0) -> torch.Tensor:
        """Decode a wire frame after passing its symbols through AWGN seeded with ``seed``."""
        frame = read_frame(data, eta=self.rate.eta)
        if frame.rate.values != self.rate.values:
            raise ValueError("frame value set differs from the model's")
        gh, gw = frame.grid
        if gh % 4 or gw % 4:
            raise ValueError(f"latent grid {gh}x{gw} cannot carry a hyperlatent")
        cz = self.density.channels
        n = (gh // 4) * (gw // 4) * cz
        stream = rangecoder.Bitstream(frame.z_stream, frame.z_digest)
        idx = np.tile(np.arange(cz), n // cz)
        z_bar = rangecoder.range_decode(stream, self.z_tables(), n, idx)
        z_bar = torch.as_tensor(z_bar, dtype=torch.float32).reshape(1, gh // 4, gw // 4, cz)
        mu, sigma = self.h_s(z_bar)
        seg = self.codec.from_symbols(frame.symbols, frame.alloc)
        gen = torch.Generator().manual_seed(seed)
        s_hat = awgn(seg, ChannelConfig(frame.snr_db, seed), generator=gen)
        index = torch.as_tensor(frame.alloc.index).reshape(1, -1)
        y_hat = self.codec.decode(s_hat, index, (gh, gw), mu, sigma, refine=True)
        return self.g_s(y_hat).clamp(0.0, 1.0)

    def costs(self, index: torch.Tensor) -> np.ndarray:
        values = (self.fixed_rate,) if self.fixed_rate is not None else self.rate.values
        return np.asarray(values)[index.cpu().numpy()]


def rate_terms(out: dict, rate: RateConfig, capacity: float, m: int, charge_z: bool = True):
    """Continuous channel-symbol costs per source dimension, averaged over the batch."""
    b = out["lik_y"].shape[0]
    bits_y = -torch.log2(out["lik_y"]).sum() / b
    bits_z = -torch.log2(out["lik_z"]).sum() / b
    k_y = rate.eta * bits_y / m
    k_z = bits_z / capacity / m if charge_z else bits_y.new_zeros(())
    return k_y, k_z, bits_y, bits_z


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
