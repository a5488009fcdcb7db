"""Context embedding and the Bayesian hypernetwork over decoder weights."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .decoder import DecoderWeightSample

LOGVAR_MIN = -12.0
LOGVAR_MAX = 4.0


@dataclass
class WeightPosterior:
    mu: torch.Tensor  # (..., P)
    log_var: torch.Tensor  # (..., P), already clamped

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


def context_embed(g: torch.Tensor) -> torch.Tensor:
    """Per-channel global spatial mean: (B, C, H, W) -> (B, C); (C, H, W) -> (C,)."""
    if g.shape[-1] == 0 or g.shape[-2] == 0:
        raise ValueError("context embedding needs a non-empty spatial grid")
    return g.mean(dim=(-2, -1))


class BayesianHypernet(nn.Module):
    """MLP mapping a conditioning vector to (mu, log sigma^2) over P decoder weights."""

    def __init__(
        self,
        in_dim: int,
        n_params: int,
        hidden: int = 256,
        n_hidden: int = 2,
        logvar_init: float = -6.0,
        head_scale: float = 1e-2,
    ):
        super().__init__()
        self.in_dim = in_dim
        self.n_params = n_params
        widths = [in_dim] + [hidden] * n_hidden
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.head = nn.Linear(widths[-1], 2 * n_params)
        with torch.no_grad():
            self.head.weight.mul_(head_scale)
            self.head.bias.zero_()
            self.head.bias[n_params:] = logvar_init

    def set_mean_bias(self, theta: torch.Tensor) -> None:
        """Warm start: centre the mu head on a given flat decoder weight vector."""
        with torch.no_grad():
            self.head.bias[: self.n_params] = theta.to(self.head.bias.dtype)

    def forward(self, c: torch.Tensor) -> WeightPosterior:
        if c.shape[-1] != self.in_dim:
            raise ValueError(f"conditioning vector has width {c.shape[-1]}, expected {self.in_dim}")
        h = c
        for layer in self.hidden:
            h = F.silu(layer(h))
        out = self.head(h)
        mu, log_var = out[..., : self.n_params], out[..., self.n_params :]
        return WeightPosterior(mu=mu, log_var=log_var.clamp(LOGVAR_MIN, LOGVAR_MAX))


def posterior(c: torch.Tensor, phi: BayesianHypernet) -> WeightPosterior:
    return phi(c)


def reparameterize(mu: torch.Tensor, log_var: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """theta = mu + sigma * eps; eps carries no gradient."""
    return mu + torch.exp(0.5 * log_var) * eps.detach()


def draw_eps(post: WeightPosterior, k: int, generator: torch.Generator | None) -> torch.Tensor:
    """Standard-normal noise shaped (..., K, P) for a posterior shaped (..., P)."""
    shape = (*post.mu.shape[:-1], k, post.mu.shape[-1])
    return torch.randn(shape, generator=generator, dtype=post.mu.dtype)


def sample_theta(
    post: WeightPosterior,
    k: int,
    generator: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """K reparameterised draws, shape (..., K, P). Pass ``eps`` to freeze the noise."""
    if k < 1:
        raise ValueError("k_samples must be >= 1")
    if eps is None:
        eps = draw_eps(post, k, generator)
    return reparameterize(post.mu.unsqueeze(-2), post.log_var.unsqueeze(-2), eps)


def sample_weights(post: WeightPosterior, k_samples: int, seed: int) -> list[DecoderWeightSample]:
    """K decoder weight samples for a single (unbatched) posterior, deterministic in ``seed``."""
    if post.mu.dim() != 1:
        raise ValueError("sample_weights expects an unbatched posterior; use sample_theta for batches")
    gen = torch.Generator().manual_seed(seed)
    thetas = sample_theta(post, k_samples, generator=gen)
    return [DecoderWeightSample(theta=thetas[i], sample_index=i + 1) for i in range(k_samples)]


def noise_condition(
    dim: int,
    std: float,
    seed: int | None = None,
    batch: int | None = None,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Zero-mean Gaussian conditioning vector(s) of width ``dim``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if std < 0 or not math.isfinite(std):
        raise ValueError(f"noise std must be a non-negative finite number, got {std}")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    shape = (dim,) if batch is None else (batch, dim)
    return torch.randn(shape, generator=generator, dtype=dtype) * std
