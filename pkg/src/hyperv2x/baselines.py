"""Comparison systems: deterministic decoding, MC dropout, noise conditioning and late map fusion.

All of them produce (K, classes, H, W) probability stacks so they share the
evaluation path of the hypernetwork model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import ExperimentConfig
from .decoder import DecoderSpec, StochasticPrediction, decode_batch, dropout_masks, param_count
from .model import HyperV2X, SceneTensors, StaticSegmenter
from .training import TrainLog, finetune_hypernet

DROPOUT_RATES = (0.1, 0.3, 0.5, 0.7)


@dataclass(frozen=True)
class DropoutConfig:
    rate: float
    k: int = 20

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def _flat_theta(theta_dec, spec: DecoderSpec) -> torch.Tensor:
    t = torch.as_tensor(theta_dec)
    if t.dim() != 1 or t.shape[0] != param_count(spec):
        raise ValueError(f"theta_dec has shape {tuple(t.shape)}, decoder expects ({param_count(spec)},)")
    return t


@torch.no_grad()
def deterministic_forward(g, theta_dec, spec: DecoderSpec) -> np.ndarray:
    """Single decode + softmax of ``g`` (C, H, W); returns (classes, H, W) float64."""
    t = _flat_theta(theta_dec, spec)
    g = torch.as_tensor(g, dtype=t.dtype)
    logits = decode_batch(g.unsqueeze(0), t.view(1, 1, -1), spec)[0, 0]
    return torch.softmax(logits.double(), dim=0).numpy()


@torch.no_grad()
def mc_dropout_forward(g, theta_dec, cfg: DropoutConfig, seed: int, spec: DecoderSpec) -> StochasticPrediction:
    """K decodes of ``g`` (C, H, W) with independent inverted-dropout masks on the hidden units."""
    t = _flat_theta(theta_dec, spec)
    g = torch.as_tensor(g, dtype=t.dtype)
    gen = torch.Generator().manual_seed(seed)
    masks = dropout_masks(spec, 1, cfg.k, cfg.rate, gen, t.dtype)
    theta = t.view(1, 1, -1).expand(1, cfg.k, -1)
    logits = decode_batch(g.unsqueeze(0), theta, spec, hidden_masks=masks)[0]
    probs = torch.softmax(logits.double(), dim=1)
    return StochasticPrediction(probs=probs.numpy(), logits=logits.double().numpy())


def noise_conditioned_variant(
    data: SceneTensors,
    pretrained: StaticSegmenter,
    cfg: ExperimentConfig,
    **kwargs,
) -> tuple[HyperV2X, TrainLog]:
    """Same fine-tuning as the hypernetwork model, conditioned on N(0, noise_std^2) instead of the context."""
    return finetune_hypernet(data, pretrained, cfg, conditioning="noise", **kwargs)


@torch.no_grad()
def map_fusion_probs(model: StaticSegmenter, batch: SceneTensors) -> np.ndarray:
    """Late fusion of per-agent segmentation maps, all expressed in the ego grid.

    The fused label is foreground wherever any agent's argmax is foreground
    (pixel-wise OR); the class is that of the agent most confident the pixel
    is not background. Returned probabilities are that agent's distribution,
    or the ego's where no agent predicts foreground. Shape (B, 1, classes, H, W).
    """
    model.eval()
    per_agent = []
    for v in range(batch.obs.shape[1]):
        out = model(batch.obs[:, v : v + 1], batch.thetas[:, v : v + 1], 1, mc_dropout=False)
        per_agent.append(torch.softmax(out.logits[:, 0].double(), dim=1))
    probs = torch.stack(per_agent, dim=1)  # (B, V, classes, H, W)
    is_fg = probs.argmax(dim=2) > 0  # (B, V, H, W)
    bg = probs[:, :, 0].masked_fill(~is_fg, float("inf"))
    chosen = bg.argmin(dim=1)  # (B, H, W); 0 (ego) where nobody predicts foreground
    idx = chosen[:, None, None].expand(-1, 1, probs.shape[2], -1, -1)
    fused = probs.gather(1, idx)
    return fused.numpy()
