"""Shared evaluation path: stochastic predictions -> uncertainty maps -> calibration report."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ExperimentConfig
from .encoder_fusion import communicated_volume
from .metrics import CalibrationReport, ReportBuilder
from .model import HyperV2X, SceneTensors, StaticSegmenter
from .uncertainty import UncertaintyMaps, uncertainty_maps


@dataclass
class SceneMaps:
    index: int
    gt: np.ndarray
    maps: UncertaintyMaps


@dataclass
class EvalResult:
    report: CalibrationReport
    scenes: list[SceneMaps] = field(default_factory=list)


def default_k(model, cfg: ExperimentConfig) -> int:
    if isinstance(model, HyperV2X):
        return cfg.train.k_samples
    if isinstance(model, StaticSegmenter) and model.dropout > 0:
        return cfg.train.k_dropout
    return 1


@torch.no_grad()
def predict_probs(model, batch: SceneTensors, k: int, generator: torch.Generator) -> np.ndarray:
    """(B, K, classes, H, W) float64 softmax probabilities."""
    model.eval()
    if isinstance(model, HyperV2X):
        out = model(batch.obs, batch.thetas, k, generator=generator)
    else:
        mc = model.dropout > 0
        out = model(batch.obs, batch.thetas, k if mc else 1, generator=generator, mc_dropout=mc)
    return torch.softmax(out.logits.double(), dim=2).numpy()


def model_name(model) -> str:
    if isinstance(model, HyperV2X):
        return "hyperv2x" if model.conditioning == "context" else "noise"
    if model.dropout > 0:
        return f"mcdropout_{model.dropout:g}"
    return "deterministic"


def evaluate(
    model,
    data: SceneTensors,
    cfg: ExperimentConfig,
    k: int | None = None,
    seed: int | None = None,
    name: str | None = None,
    keep_maps: int = 0,
    batch_size: int = 4,
    probs_fn=None,
) -> EvalResult:
    """Pool IoU / ECE / Brier / NLL and uncertainty summaries over every pixel of ``data``."""
    k = default_k(model, cfg) if k is None else k
    gen = torch.Generator().manual_seed(cfg.metrics.eval_seed if seed is None else seed)
    builder = ReportBuilder(cfg.scenario.num_classes, cfg.metrics.n_bins)
    kept: list[SceneMaps] = []
    cv = 0
    for start in range(0, len(data), batch_size):
        batch = data.subset(slice(start, start + batch_size))
        probs = predict_probs(model, batch, k, gen) if probs_fn is None else probs_fn(batch, gen)
        for i in range(probs.shape[0]):
            maps = uncertainty_maps(probs[i])
            gt = batch.gt[i].numpy()
            builder.add(maps.mean_probs, gt, maps.summary())
            if len(kept) < keep_maps:
                kept.append(SceneMaps(start + i, gt, maps))
    if hasattr(model, "encoder"):
        h, w = data.gt.shape[1:]
        cv = communicated_volume(cfg.features.channels, h, w, model.rate)
    report = builder.build(
        model=name or model_name(model),
        rate=getattr(model, "rate", 0),
        cv_bytes=cv,
        k_samples=k,
    )
    return EvalResult(report=report, scenes=kept)
