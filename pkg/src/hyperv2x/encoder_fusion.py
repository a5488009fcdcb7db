"""Per-agent encoder, pose warp into the ego grid, fusion, and the channel bottleneck."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import COMPRESSION_RATES, FeatureSpec

BYTES_PER_VALUE = 4  # features are transmitted as float32


@dataclass(frozen=True)
class PoseTransform:
    """SE(2) map from an agent's grid frame to the ego grid frame (homogeneous 3x3)."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"pose transform must be 3x3, got {m.shape}")
        rot = m[:2, :2]
        if abs(np.linalg.det(rot)) < 1e-9:
            raise ValueError("singular pose transform")
        if not np.allclose(rot @ rot.T, np.eye(2), atol=1e-6) or not np.allclose(
            m[2], [0.0, 0.0, 1.0]
        ):
            raise ValueError("pose transform is not a rigid SE(2) motion")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_frame(cls, x: float, y: float, yaw: float) -> "PoseTransform":
        c, s = math.cos(yaw), math.sin(yaw)
        return cls(np.array([[c, -s, x], [s, c, y], [0.0, 0.0, 1.0]]))

    @classmethod
    def relative(cls, agent_frame: Sequence[float], ego_frame: Sequence[float]) -> "PoseTransform":
        """Agent-grid to ego-grid transform from two frames given in a common world frame."""
        a = cls.from_frame(*agent_frame).matrix
        e = cls.from_frame(*ego_frame).matrix
        return cls(np.linalg.inv(e) @ a)

    def inverse(self) -> "PoseTransform":
        return PoseTransform(np.linalg.inv(self.matrix))

    def sampling_theta(self, region_size_m: float) -> np.ndarray:
        """(2, 3) affine for ``F.affine_grid`` (normalised ego coords -> normalised source coords)."""
        inv = np.linalg.inv(self.matrix)
        theta = inv[:2].copy()
        theta[:, 2] /= region_size_m / 2.0
        return theta


class Encoder(nn.Module):
    """Per-agent feature extractor: 3x3 convolutions with SiLU between them."""

    def __init__(self, in_channels: int, hidden: Sequence[int], out_channels: int, kernel_size: int = 3):
        super().__init__()
        widths = [in_channels, *hidden, out_channels]
        self.convs = nn.ModuleList(
            nn.Conv2d(a, b, kernel_size, padding=kernel_size // 2)
            for a, b in zip(widths[:-1], widths[1:])
        )
        self.in_channels = in_channels
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for k, conv in enumerate(self.convs):
            x = conv(x)
            if k < len(self.convs) - 1:
                x = F.silu(x)
        return x


def encode_agent(obs, encoder: Encoder) -> torch.Tensor:
    """Encode one observation grid (C0, H, W) or a batch (N, C0, H, W)."""
    grid = obs.grid if hasattr(obs, "grid") else obs
    x = torch.as_tensor(grid, dtype=encoder.convs[0].weight.dtype)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != encoder.in_channels:
        raise ValueError(
            f"observation shape {tuple(x.shape)} does not match encoder input "
            f"channels {encoder.in_channels}"
        )
    out = encoder(x)
    return out[0] if single else out


def warp_to_ego(feat: torch.Tensor, t, region_size_m: float | None = None) -> torch.Tensor:
    """Inverse-warp features into the ego grid with bilinear sampling and zero fill.

    ``t`` is a ``PoseTransform`` (then ``region_size_m`` is required) or a
    precomputed (N, 2, 3) tensor of sampling thetas.
    """
    single = feat.dim() == 3
    x = feat.unsqueeze(0) if single else feat
    if isinstance(t, PoseTransform):
        if region_size_m is None:
            raise ValueError("region_size_m is required with a PoseTransform")
        theta = torch.as_tensor(t.sampling_theta(region_size_m), dtype=x.dtype)
        theta = theta.unsqueeze(0).expand(x.shape[0], 2, 3)
    else:
        theta = torch.as_tensor(t, dtype=x.dtype)
        if theta.dim() == 2:
            theta = theta.unsqueeze(0).expand(x.shape[0], 2, 3)
        if not torch.isfinite(theta).all():
            raise ValueError("non-finite warp transform")
        det = theta[:, 0, 0] * theta[:, 1, 1] - theta[:, 0, 1] * theta[:, 1, 0]
        if (det.abs() < 1e-9).any():
            raise ValueError("singular pose transform")
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out[0] if single else out


def fuse(feats: Sequence[torch.Tensor] | torch.Tensor, mode: str = "max", dim: int = 0) -> torch.Tensor:
    """Element-wise fusion across agents (``max`` or ``mean``)."""
    if isinstance(feats, torch.Tensor):
        stack = feats
    else:
        if len(feats) == 0:
            raise ValueError("cannot fuse an empty list of feature maps")
        shapes = {tuple(f.shape) for f in feats}
        if len(shapes) != 1:
            raise ValueError(f"feature maps have mismatched shapes {sorted(shapes)}")
        stack = torch.stack(list(feats), dim=dim)
    if stack.shape[dim] == 0:
        raise ValueError("cannot fuse an empty list of feature maps")
    if mode == "max":
        return stack.max(dim=dim).values
    if mode == "mean":
        return stack.mean(dim=dim)
    raise ValueError(f"unknown fusion mode {mode!r}")


def communicated_volume(channels: int, height: int, width: int, rate: int) -> int:
    """Bytes of one agent's feature message at the given compression rate."""
    if rate not in COMPRESSION_RATES:
        raise ValueError(f"compression rate {rate} not in {COMPRESSION_RATES}")
    sent = channels if rate == 0 else channels // rate
    return sent * height * width * BYTES_PER_VALUE


class Compressor(nn.Module):
    """Learnable 1x1 down-projection to ``channels / rate`` and back; rate 0 is identity."""

    def __init__(self, channels: int, rate: int = 0):
        super().__init__()
        if rate not in COMPRESSION_RATES:
            raise ValueError(f"compression rate {rate} not in {COMPRESSION_RATES}")
        if rate and channels % rate:
            raise ValueError(f"channels={channels} not divisible by rate {rate}")
        self.channels = channels
        self.rate = rate
        if rate:
            mid = channels // rate
            self.down = nn.Conv2d(channels, mid, 1)
            self.up = nn.Conv2d(mid, channels, 1)
            # start from an orthogonal projection onto a random subspace
            nn.init.orthogonal_(self.down.weight.view(mid, channels))
            with torch.no_grad():
                self.up.weight.copy_(self.down.weight.view(mid, channels).t().reshape(channels, mid, 1, 1))
            nn.init.zeros_(self.down.bias)
            nn.init.zeros_(self.up.bias)

    @torch.no_grad()
    def init_pca(self, mean: torch.Tensor, cov: torch.Tensor) -> None:
        """Set the bottleneck to the top principal subspace of the given channel statistics.

        Down projects the centred features onto the leading ``channels / rate``
        eigenvectors; up maps back and restores the mean. Subspaces for larger
        rates are nested inside those for smaller ones, so the reconstruction
        error is non-decreasing in the rate.
        """
        if self.rate == 0:
            return
        mid = self.channels // self.rate
        evals, evecs = torch.linalg.eigh(cov.double())
        basis = evecs[:, torch.argsort(evals, descending=True)[:mid]]  # (C, mid)
        # fix each eigenvector's sign so the result does not depend on the solver
        flip = torch.sign(basis[basis.abs().argmax(dim=0), torch.arange(mid)])
        basis = basis * torch.where(flip == 0, torch.ones_like(flip), flip)
        mean = mean.double()
        dtype = self.down.weight.dtype
        self.down.weight.copy_(basis.t().reshape(mid, self.channels, 1, 1).to(dtype))
        self.down.bias.copy_((-basis.t() @ mean).to(dtype))
        self.up.weight.copy_(basis.reshape(self.channels, mid, 1, 1).to(dtype))
        self.up.bias.copy_(mean.to(dtype))

    def bottleneck_channels(self) -> int:
        return self.channels if self.rate == 0 else self.channels // self.rate

    def forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, int]:
        h, w = feat.shape[-2:]
        cv = communicated_volume(self.channels, h, w, self.rate)
        if self.rate == 0:
            return feat, cv
        return self.up(self.down(feat)), cv


def compress(feat: torch.Tensor, compressor: Compressor) -> tuple[torch.Tensor, int]:
    if feat.shape[-3] != compressor.channels:
        raise ValueError(f"expected {compressor.channels} channels, got {feat.shape[-3]}")
    single = feat.dim() == 3
    out, cv = compressor(feat.unsqueeze(0) if single else feat)
    return (out[0] if single else out), cv


class CooperativeEncoder(nn.Module):
    """encode -> compress -> warp -> fuse -> residual refinement, producing the fused grid G."""

    def __init__(
        self,
        in_channels: int,
        spec: FeatureSpec,
        rate: int = 0,
        fusion: str = "max",
    ):
        super().__init__()
        self.spec = spec
        self.fusion = fusion
        self.encoder = Encoder(in_channels, spec.hidden, spec.channels, spec.kernel_size)
        self.compressor = Compressor(spec.channels, rate)
        if spec.refine:
            self.refine = nn.Conv2d(spec.channels, spec.channels, 3, padding=1)
            nn.init.zeros_(self.refine.weight)
            nn.init.zeros_(self.refine.bias)
        else:
            self.refine = None

    def set_compression(self, rate: int) -> None:
        p = next(self.parameters())
        self.compressor = Compressor(self.spec.channels, rate).to(dtype=p.dtype)

    @torch.no_grad()
    def feature_moments(self, obs: torch.Tensor, batch_size: int = 8) -> tuple[torch.Tensor, torch.Tensor]:
        """Channel mean and covariance (float64) of per-agent features before compression."""
        c = self.spec.channels
        total = torch.zeros(c, dtype=torch.float64)
        outer = torch.zeros(c, c, dtype=torch.float64)
        count = 0
        for start in range(0, obs.shape[0], batch_size):
            chunk = obs[start : start + batch_size]
            feat = self.encoder(chunk.reshape(-1, *chunk.shape[2:])).double()
            x = feat.permute(1, 0, 2, 3).reshape(c, -1)
            total += x.sum(dim=1)
            outer += x @ x.t()
            count += x.shape[1]
        mean = total / count
        return mean, outer / count - torch.outer(mean, mean)

    def forward(self, obs: torch.Tensor, thetas: torch.Tensor) -> tuple[torch.Tensor, int]:
        """``obs`` (B, V, C0, H, W), ``thetas`` (B, V, 2, 3) -> (G (B, C, H, W), CV bytes per agent)."""
        b, v = obs.shape[:2]
        flat = obs.reshape(b * v, *obs.shape[2:])
        feat = self.encoder(flat)
        feat, cv = self.compressor(feat)
        feat = warp_to_ego(feat, thetas.reshape(b * v, 2, 3))
        g = fuse(feat.reshape(b, v, *feat.shape[1:]), self.fusion, dim=1)
        if self.refine is not None:
            g = g + self.refine(F.silu(g))
        return g, cv
