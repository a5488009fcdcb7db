"""Assembled primary networks: the Bayesian-hypernetwork model and the static-decoder model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ExperimentConfig
from .decoder import DecoderSpec, decode_batch, dropout_masks, init_weights, param_count
from .encoder_fusion import CooperativeEncoder, PoseTransform
from .hypernet import BayesianHypernet, WeightPosterior, context_embed, noise_condition, sample_theta
from .synthworld import SceneDataset

CONDITIONINGS = ("context", "noise")


def decoder_spec_for(cfg: ExperimentConfig) -> DecoderSpec:
    return DecoderSpec.default(
        cfg.features.channels,
        cfg.scenario.num_classes,
        hidden=cfg.decoder.hidden,
        kernel_size=cfg.decoder.kernel_size,
    )


@dataclass
class SceneTensors:
    obs: torch.Tensor  # (N, V, C0, H, W)
    gt: torch.Tensor  # (N, H, W) int64
    thetas: torch.Tensor  # (N, V, 2, 3) sampling affines into the ego grid
    region_size_m: float

    def __len__(self) -> int:
        return self.obs.shape[0]

    @classmethod
    def from_dataset(cls, ds: SceneDataset) -> "SceneTensors":
        if len(ds) == 0:
            raise ValueError("empty dataset")
        region = ds.scenes[0].region_size_m
        thetas = []
        for scene in ds.scenes:
            frames = scene.observation_frames()
            thetas.append(
                np.stack([PoseTransform.relative(f, (0.0, 0.0, 0.0)).sampling_theta(region) for f in frames])
            )
        return cls(
            obs=torch.from_numpy(np.stack(ds.observations).astype(np.float32)),
            gt=torch.from_numpy(np.stack([s.gt_semantic for s in ds.scenes]).astype(np.int64)),
            thetas=torch.from_numpy(np.stack(thetas).astype(np.float32)),
            region_size_m=region,
        )

    def ego_only(self) -> "SceneTensors":
        return SceneTensors(self.obs[:, :1], self.gt, self.thetas[:, :1], self.region_size_m)

    def subset(self, idx) -> "SceneTensors":
        return SceneTensors(self.obs[idx], self.gt[idx], self.thetas[idx], self.region_size_m)

    def to(self, dtype: torch.dtype) -> "SceneTensors":
        return SceneTensors(self.obs.to(dtype), self.gt, self.thetas.to(dtype), self.region_size_m)


@dataclass
class ModelOutput:
    logits: torch.Tensor  # (B, K, classes, H, W)
    g: torch.Tensor
    cv_bytes: int
    posterior: WeightPosterior | None = None
    conditioning: torch.Tensor | None = None


class HyperV2X(nn.Module):
    """Cooperative encoder + hypernetwork-generated stochastic decoder."""

    def __init__(
        self,
        in_channels: int,
        cfg: ExperimentConfig,
        conditioning: str = "context",
        rate: int | None = None,
    ):
        super().__init__()
        if conditioning not in CONDITIONINGS:
            raise ValueError(f"conditioning must be one of {CONDITIONINGS}")
        self.spec = decoder_spec_for(cfg)
        self.conditioning = conditioning
        self.noise_std = cfg.train.noise_std
        self.encoder = CooperativeEncoder(
            in_channels, cfg.features, cfg.compression.rate if rate is None else rate
        )
        self.hypernet = BayesianHypernet(
            cfg.features.channels,
            param_count(self.spec),
            hidden=cfg.train.hyper_hidden,
            logvar_init=cfg.train.logvar_init,
        )

    @property
    def rate(self) -> int:
        return self.encoder.compressor.rate

    def condition(self, g: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        if self.conditioning == "context":
            return context_embed(g)
        return noise_condition(
            g.shape[1], self.noise_std, batch=g.shape[0], generator=generator, dtype=g.dtype
        )

    def forward(
        self,
        obs: torch.Tensor,
        thetas: torch.Tensor,
        k: int,
        generator: torch.Generator | None = None,
        eps: torch.Tensor | None = None,
        cond: torch.Tensor | None = None,
    ) -> ModelOutput:
        g, cv = self.encoder(obs, thetas)
        c = self.condition(g, generator) if cond is None else cond
        post = self.hypernet(c)
        theta = sample_theta(post, k, generator=generator, eps=eps)
        logits = decode_batch(g, theta, self.spec)
        return ModelOutput(logits=logits, g=g, cv_bytes=cv, posterior=post, conditioning=c)


class StaticSegmenter(nn.Module):
    """Cooperative encoder + one directly optimised decoder weight vector.

    Used for single-agent pretraining, the deterministic fused baseline and
    MC dropout (dropout on the decoder's hidden activations only).
    """

    def __init__(
        self,
        in_channels: int,
        cfg: ExperimentConfig,
        rate: int | None = None,
        dropout: float = 0.0,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.spec = decoder_spec_for(cfg)
        self.dropout = dropout
        self.encoder = CooperativeEncoder(
            in_channels, cfg.features, cfg.compression.rate if rate is None else rate
        )
        self.theta_dec = nn.Parameter(init_weights(self.spec, generator))

    @property
    def rate(self) -> int:
        return self.encoder.compressor.rate

    def dropout_masks(self, b: int, k: int, generator: torch.Generator | None, dtype) -> list[torch.Tensor]:
        return dropout_masks(self.spec, b, k, self.dropout, generator, dtype)

    def forward(
        self,
        obs: torch.Tensor,
        thetas: torch.Tensor,
        k: int = 1,
        generator: torch.Generator | None = None,
        mc_dropout: bool | None = None,
    ) -> ModelOutput:
        g, cv = self.encoder(obs, thetas)
        b = g.shape[0]
        theta = self.theta_dec.view(1, 1, -1).expand(b, k, -1)
        use_dropout = self.training if mc_dropout is None else mc_dropout
        masks = None
        if use_dropout and self.dropout > 0:
            masks = self.dropout_masks(b, k, generator, g.dtype)
        logits = decode_batch(g, theta, self.spec, hidden_masks=masks)
        return ModelOutput(logits=logits, g=g, cv_bytes=cv)


def build_seeded(factory, seed: int):
    """Construct a module under a fixed torch seed without disturbing the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def warm_start_hyper(hyper: HyperV2X, static: StaticSegmenter) -> None:
    """Copy the encoder and centre the hypernetwork's mean head on the static decoder weights."""
    state = {k: v for k, v in static.encoder.state_dict().items() if not k.startswith("compressor.")}
    hyper.encoder.load_state_dict(state, strict=False)
    hyper.hypernet.set_mean_bias(static.theta_dec.detach())
