"""Functional segmentation decoder driven by a flat weight vector.

The decoder never owns parameters. Every call receives the weights, sliced
out of the flat vector according to a ``WeightManifest``; this is what lets
the hypernetwork inject one weight sample per instance and per draw.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel_size: int


@dataclass(frozen=True)
class DecoderSpec:
    layers: tuple[ConvLayerSpec, ...]

    @classmethod
    def default(cls, in_channels: int, num_classes: int, hidden: int = 16, kernel_size: int = 3) -> "DecoderSpec":
        return cls(
            (
                ConvLayerSpec(in_channels, hidden, kernel_size),
                ConvLayerSpec(hidden, hidden, kernel_size),
                ConvLayerSpec(hidden, num_classes, 1),
            )
        )

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_channels

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(layer.out_channels for layer in self.layers[:-1])

    def manifest(self) -> "WeightManifest":
        return WeightManifest.from_spec(self)

    def digest(self) -> str:
        blob = json.dumps([[l.in_channels, l.out_channels, l.kernel_size] for l in self.layers])
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    shape: tuple[int, ...]
    start: int
    stop: int


@dataclass(frozen=True)
class WeightManifest:
    entries: tuple[ManifestEntry, ...]

    @classmethod
    def from_spec(cls, spec: DecoderSpec) -> "WeightManifest":
        entries = []
        offset = 0
        for k, layer in enumerate(spec.layers, start=1):
            wshape = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
            for name, shape in ((f"conv{k}.weight", wshape), (f"conv{k}.bias", (layer.out_channels,))):
                size = int(np.prod(shape))
                entries.append(ManifestEntry(name, shape, offset, offset + size))
                offset += size
        return cls(tuple(entries))

    @property
    def total(self) -> int:
        return self.entries[-1].stop if self.entries else 0

    def digest(self) -> str:
        blob = json.dumps([[e.name, list(e.shape), e.start, e.stop] for e in self.entries])
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def unflatten(self, theta: torch.Tensor) -> dict[str, torch.Tensor]:
        """Split ``theta`` (..., P) into named tensors of shape (..., *shape)."""
        lead = theta.shape[:-1]
        return {e.name: theta[..., e.start : e.stop].reshape(*lead, *e.shape) for e in self.entries}

    def flatten(self, weights: dict[str, torch.Tensor]) -> torch.Tensor:
        first = weights[self.entries[0].name]
        lead = first.shape[: first.dim() - len(self.entries[0].shape)]
        return torch.cat([weights[e.name].reshape(*lead, -1) for e in self.entries], dim=-1)


def param_count(spec: DecoderSpec) -> int:
    return sum(
        l.out_channels * l.in_channels * l.kernel_size**2 + l.out_channels for l in spec.layers
    )


def init_weights(spec: DecoderSpec, generator: torch.Generator | None = None) -> torch.Tensor:
    """Flat weight vector with He-uniform-style weights and zero biases."""
    parts = []
    for layer in spec.layers:
        fan_in = layer.in_channels * layer.kernel_size**2
        bound = (3.0 / fan_in) ** 0.5
        n = layer.out_channels * fan_in
        parts.append((torch.rand(n, generator=generator, dtype=torch.float64) * 2 - 1) * bound)
        parts.append(torch.zeros(layer.out_channels, dtype=torch.float64))
    return torch.cat(parts).float()


@dataclass
class DecoderWeightSample:
    theta: torch.Tensor  # (P,)
    sample_index: int


@dataclass
class StochasticPrediction:
    probs: np.ndarray  # (K, classes, H, W)
    logits: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.probs.shape[0]


def decode_batch(
    g: torch.Tensor,
    theta: torch.Tensor,
    spec: DecoderSpec,
    hidden_masks: Sequence[torch.Tensor] | None = None,
) -> torch.Tensor:
    """Decode ``g`` (B, C, H, W) with per-instance weight draws ``theta`` (B, K, P).

    Returns logits (B, K, classes, H, W). ``hidden_masks`` optionally gives one
    (B, K, width) multiplicative mask per hidden activation (used by MC dropout).
    """
    if g.dim() != 4:
        raise ValueError(f"features must be (B, C, H, W), got {tuple(g.shape)}")
    b, c, h, w = g.shape
    if theta.dim() != 3 or theta.shape[0] != b:
        raise ValueError(f"theta must be (B={b}, K, P), got {tuple(theta.shape)}")
    p = param_count(spec)
    if theta.shape[-1] != p:
        raise ValueError(f"theta has {theta.shape[-1]} entries, decoder expects {p}")
    if c != spec.in_channels:
        raise ValueError(f"features have {c} channels, decoder expects {spec.in_channels}")
    k = theta.shape[1]
    groups = b * k
    weights = spec.manifest().unflatten(theta)
    x = g.unsqueeze(1).expand(b, k, c, h, w).reshape(1, groups * c, h, w)
    n_layers = len(spec.layers)
    for idx, layer in enumerate(spec.layers, start=1):
        wt = weights[f"conv{idx}.weight"].reshape(groups * layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
        bias = weights[f"conv{idx}.bias"].reshape(groups * layer.out_channels)
        x = F.conv2d(x, wt, bias, padding=layer.kernel_size // 2, groups=groups)
        if idx < n_layers:
            x = F.silu(x)
            if hidden_masks is not None:
                mask = hidden_masks[idx - 1].to(x.dtype).reshape(1, groups * layer.out_channels, 1, 1)
                x = x * mask
    return x.reshape(b, k, spec.num_classes, h, w)


def _theta_tensor(theta) -> torch.Tensor:
    return theta.theta if isinstance(theta, DecoderWeightSample) else torch.as_tensor(theta)


def decode(g: torch.Tensor, theta, spec: DecoderSpec) -> torch.Tensor:
    """Logits (classes, H, W) for one feature map (C, H, W) and one weight vector."""
    t = _theta_tensor(theta)
    if t.dim() != 1:
        raise ValueError("decode expects a single flat weight vector")
    if t.shape[0] != param_count(spec):
        raise ValueError(f"theta has {t.shape[0]} entries, decoder expects {param_count(spec)}")
    g = torch.as_tensor(g, dtype=t.dtype)
    return decode_batch(g.unsqueeze(0), t.view(1, 1, -1), spec)[0, 0]


def forward_k(g: torch.Tensor, samples: Sequence, spec: DecoderSpec) -> StochasticPrediction:
    """Stack softmax(decode(g, theta_k)) over the K weight samples."""
    if len(samples) == 0:
        raise ValueError("forward_k needs at least one weight sample")
    thetas = torch.stack([_theta_tensor(s) for s in samples])
    if len({tuple(t.shape) for t in thetas}) != 1:
        raise ValueError("weight samples have different lengths")
    g = torch.as_tensor(g, dtype=thetas.dtype)
    with torch.no_grad():
        logits = decode_batch(g.unsqueeze(0), thetas.unsqueeze(0), spec)[0]
        probs = torch.softmax(logits.double(), dim=1)
    return StochasticPrediction(probs=probs.numpy(), logits=logits.double().numpy())


def dropout_masks(
    spec: DecoderSpec,
    b: int,
    k: int,
    rate: float,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> list[torch.Tensor]:
    """Inverted-dropout unit masks, one (B, K, width) tensor per hidden layer.

    Survivors are scaled by 1 / (1 - rate) so the expected input to the next
    linear layer is unchanged.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = 1.0 - rate
    return [
        (torch.rand((b, k, width), generator=generator, dtype=torch.float64) < keep).to(dtype) / keep
        for width in spec.hidden_widths
    ]
