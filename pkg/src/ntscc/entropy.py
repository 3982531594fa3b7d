"""Entropy models for the latent y and the hyperlatent z.

y is modelled as a Gaussian convolved with U(-1/2, 1/2), parameterised per
element by (mu, sigma) from the hyper synthesis transform. z uses a
non-parametric per-channel density whose CDF is a small monotone network.
Both likelihoods are differences of CDFs taken half a bin apart, so the
discrete pmf at integer n and the noisy continuous density at n coincide.
"""

from __future__ import annotations

import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

SIGMA_MIN = 0.05
P_FLOOR = 2.0 ** -20
Z_SUPPORT = 64


def noise_proxy(v: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Add i.i.d. U(-1/2, 1/2) offsets."""
    o = torch.rand(v.shape, generator=generator, dtype=v.dtype, device=v.device) - 0.5
    return v + o


def quantize_round(v):
    """Round to the nearest integer, ties away from zero.

    Accepts numpy arrays or tensors; non-finite input raises ValueError.
    """
    if isinstance(v, torch.Tensor):
        if not torch.isfinite(v).all():
            raise ValueError("cannot quantize non-finite values")
        return torch.sign(v) * torch.floor(torch.abs(v) + 0.5)
    a = np.asarray(v, dtype=np.float64)
    if not np.isfinite(a).all():
        raise ValueError("cannot quantize non-finite values")
    return (np.sign(a) * np.floor(np.abs(a) + 0.5)).astype(np.int64)


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x * (2 ** -0.5))


def gaussian_likelihood(v: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor,
                        floor: float | None = P_FLOOR) -> torch.Tensor:
    """(N(mu, sigma^2) * U(-1/2, 1/2))(v), computed as a CDF difference.

    Uses the upper tail on the far side of the mean so small masses keep their
    relative precision.
    """
    d = torch.abs(v - mu)
    upper = _std_normal_cdf((0.5 - d) / sigma)
    lower = _std_normal_cdf((-0.5 - d) / sigma)
    p = upper - lower
    if floor is not None:
        p = torch.clamp(p, min=floor)
    return p


def gaussian_uniform_pmf(n, mu, sigma, floor: float | None = P_FLOOR):
    """Scalar/array convenience wrapper in float64; sigma must respect the clamp."""
    sigma_t = torch.as_tensor(sigma, dtype=torch.float64)
    if (sigma_t < SIGMA_MIN).any():
        raise ValueError(f"sigma below clamp {SIGMA_MIN}")
    p = gaussian_likelihood(torch.as_tensor(n, dtype=torch.float64),
                            torch.as_tensor(mu, dtype=torch.float64), sigma_t, floor)
    return p.item() if p.ndim == 0 else p.numpy()


class FactorizedDensity(nn.Module):
    """Per-channel univariate density with a learned monotone CDF.

    The CDF is sigmoid(f(x)) with f a 4-layer map built from softplus-positive
    matrices, biases and ``x + tanh(a) * tanh(x)`` couplings, so f is strictly
    increasing. Biases start at zero, which makes f odd and the density
    symmetric at initialisation.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 2.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cdf(self, v: torch.Tensor) -> torch.Tensor:
        """v: (channels, 1, N) -> logits of the CDF, same shape."""
        x = v
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            x = torch.matmul(F.softplus(m), x) + b
            if i < len(self.factors):
                x = x + torch.tanh(self.factors[i]) * torch.tanh(x)
        return x

    def cdf(self, v: torch.Tensor) -> torch.Tensor:
        """v: (channels, N) -> CDF values."""
        return torch.sigmoid(self.logits_cdf(v.unsqueeze(1))).squeeze(1)

    def likelihood(self, v: torch.Tensor, floor: float | None = P_FLOOR) -> torch.Tensor:
        """Likelihood of v shaped (..., channels) under the noisy density."""
        shape = v.shape
        flat = v.reshape(-1, self.channels).t().unsqueeze(1)  # (C, 1, N)
        lo = self.logits_cdf(flat - 0.5)
        hi = self.logits_cdf(flat + 0.5)
        # evaluate on the side where the sigmoid is not saturated
        sign = -torch.sign(lo + hi).detach()
        sign = torch.where(sign == 0, torch.ones_like(sign), sign)
        p = torch.abs(torch.sigmoid(sign * hi) - torch.sigmoid(sign * lo))
        if floor is not None:
            p = torch.clamp(p, min=floor)
        return p.squeeze(1).t().reshape(shape)

    def pmf_table(self, support: int = Z_SUPPORT, floor: float | None = P_FLOOR) -> torch.Tensor:
        """(channels, 2*support+1) pmf over integers -support..support."""
        n = torch.arange(-support, support + 1, dtype=self.matrices[0].dtype)
        grid = n.unsqueeze(0).expand(self.channels, -1).t()  # (K, C)
        with torch.no_grad():
            return self.likelihood(grid, floor=floor).t()


def factorized_pmf(n, channel: int, density: FactorizedDensity, floor: float | None = P_FLOOR):
    v = torch.zeros(np.size(n), density.channels, dtype=density.matrices[0].dtype)
    v[:, channel] = torch.as_tensor(np.atleast_1d(n), dtype=v.dtype)
    with torch.no_grad():
        p = density.likelihood(v, floor=floor)[:, channel]
    return p.item() if np.ndim(n) == 0 else p.numpy()


def rate_bits(likelihoods) -> float | torch.Tensor:
    """Total -log2 of the given likelihoods (tensor in, tensor out)."""
    if isinstance(likelihoods, torch.Tensor):
        if likelihoods.numel() == 0:
            return likelihoods.new_zeros(())
        return -torch.log2(likelihoods).sum()
    p = np.asarray(likelihoods, dtype=np.float64)
    if p.size == 0:
        return 0.0
    if (p <= 0).any():
        raise ValueError("pmf values must be positive")
    return float(-np.log2(p).sum())


def clamp_support(z: torch.Tensor, support: int = Z_SUPPORT) -> torch.Tensor:
    if (z.abs() > support).any():
        log.warning("hyperlatent outside [-%d, %d] clamped", support, support)
    return z.clamp(-support, support)
