"""Losses, the two-stage training schedule, and finite-difference gradient checks."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ExperimentConfig, LossWeights
from .hypernet import WeightPosterior, draw_eps
from .metrics import NLL_FLOOR
from .model import HyperV2X, SceneTensors, StaticSegmenter, build_seeded, decoder_spec_for, warm_start_hyper

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: nn.Module):
        super().__init__(message)
        self.last_good = last_good


class SpecMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# loss terms


def seg_loss(logits: torch.Tensor, gt: torch.Tensor, class_weights) -> torch.Tensor:
    """Class-weighted cross-entropy, averaged over pixels (and over K when logits are 5-D).

    Weights multiply each pixel's loss and are *not* renormalised, so scaling
    every weight scales the loss.
    """
    w = torch.as_tensor(class_weights, dtype=logits.dtype)
    if logits.dim() == 5:
        b, k, c, h, wd = logits.shape
        if gt.shape != (b, h, wd):
            raise ValueError(f"labels {tuple(gt.shape)} do not match logits {tuple(logits.shape)}")
        flat = logits.reshape(b * k, c, h, wd)
        target = gt.unsqueeze(1).expand(b, k, h, wd).reshape(b * k, h, wd)
    elif logits.dim() in (3, 4):
        flat = logits if logits.dim() == 4 else logits.unsqueeze(0)
        target = gt if gt.dim() == 3 else gt.unsqueeze(0)
        if flat.shape[0] != target.shape[0] or flat.shape[2:] != target.shape[1:]:
            raise ValueError(f"labels {tuple(gt.shape)} do not match logits {tuple(logits.shape)}")
    else:
        raise ValueError(f"unsupported logits shape {tuple(logits.shape)}")
    if w.numel() != flat.shape[1]:
        raise ValueError(f"{w.numel()} class weights for {flat.shape[1]} classes")
    ce = F.cross_entropy(flat, target, reduction="none")
    return (ce * w[target]).mean()


def nll_loss(mean_probs: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Differentiable twin of ``metrics.nll``: mean -log max(p_true, 1e-12).

    ``mean_probs`` is (classes, H, W) or (B, classes, H, W).
    """
    p = mean_probs if mean_probs.dim() == 4 else mean_probs.unsqueeze(0)
    y = gt if gt.dim() == 3 else gt.unsqueeze(0)
    if p.shape[0] != y.shape[0] or p.shape[2:] != y.shape[1:]:
        raise ValueError(f"labels {tuple(gt.shape)} do not match probabilities {tuple(mean_probs.shape)}")
    p_true = p.gather(1, y.unsqueeze(1)).squeeze(1)
    return -torch.log(p_true.clamp_min(NLL_FLOOR)).mean()


def kl_gaussian(post: WeightPosterior, normalize: bool = True) -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)); per-parameter mean when ``normalize``."""
    terms = 0.5 * (post.mu**2 + torch.exp(post.log_var) - 1.0 - post.log_var)
    if normalize:
        return terms.mean()
    return terms.sum(dim=-1).mean() if terms.dim() > 1 else terms.sum()


def total_loss(seg, nll, kl, w: LossWeights) -> torch.Tensor:
    """L = L_seg + lambda_nll * L_nll + lambda_kl * L_kl, accumulated in float64."""
    terms = [torch.as_tensor(t, dtype=torch.float64) for t in (seg, nll, kl)]
    for name, t in zip(("seg", "nll", "kl"), terms):
        if not torch.isfinite(t).all():
            raise ValueError(f"non-finite {name} loss term")
    return terms[0] + w.lambda_nll * terms[1] + w.lambda_kl * terms[2]


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    # state of the training generator after the last step (stored in checkpoints)
    rng_state: np.ndarray | None = None

    def loss_curve(self) -> list[float]:
        return [e["total"] for e in self.epochs]


def _hyper_terms(model: HyperV2X, batch: SceneTensors, cfg: ExperimentConfig, k: int, generator, eps=None, cond=None):
    out = model(batch.obs, batch.thetas, k, generator=generator, eps=eps, cond=cond)
    weights = cfg.loss.resolved_class_weights(cfg.scenario.num_classes)
    seg = seg_loss(out.logits, batch.gt, weights)
    probs = torch.softmax(out.logits, dim=2)
    nll = nll_loss(probs.mean(dim=1), batch.gt)
    kl = kl_gaussian(out.posterior)
    with torch.no_grad():
        y = batch.gt.unsqueeze(1).unsqueeze(2).expand(-1, k, 1, -1, -1)
        per_sample = -torch.log(probs.gather(2, y).clamp_min(NLL_FLOOR)).mean()
    return {"seg": seg, "nll": nll, "kl": kl, "nll_per_sample": per_sample}


def _static_terms(model: StaticSegmenter, batch: SceneTensors, cfg: ExperimentConfig, generator):
    out = model(batch.obs, batch.thetas, 1, generator=generator)
    weights = cfg.loss.resolved_class_weights(cfg.scenario.num_classes)
    seg = seg_loss(out.logits, batch.gt, weights)
    zero = torch.zeros((), dtype=seg.dtype)
    return {"seg": seg, "nll": zero, "kl": zero}


def _fit(
    model: nn.Module,
    groups: list[dict],
    data: SceneTensors,
    cfg: ExperimentConfig,
    epochs: int,
    seed: int,
    terms_fn: Callable,
    loss_weights: LossWeights,
) -> TrainLog:
    gen = torch.Generator().manual_seed(seed)
    groups = [g for g in groups if g["params"]]
    opt = torch.optim.Adam(groups, betas=cfg.train.adam_betas) if groups else None
    history = TrainLog()
    last_good = copy.deepcopy(model.state_dict())
    n = len(data)
    bs = cfg.train.batch_size
    step = 0
    model.train()
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, n, bs):
            batch = data.subset(perm[start : start + bs])
            terms = terms_fn(model, batch, gen)
            try:
                total = total_loss(terms["seg"], terms["nll"], terms["kl"], loss_weights)
            except ValueError as exc:
                model.load_state_dict(last_good)
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}", model) from exc
            if opt is not None:
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
            row = {"epoch": epoch, "step": step, **{k: float(v.detach()) for k, v in terms.items()}, "total": float(total.detach())}
            history.steps.append(row)
            for key in ("seg", "nll", "kl", "total"):
                sums[key] = sums.get(key, 0.0) + row[key]
            n_batches += 1
            step += 1
        last_good = copy.deepcopy(model.state_dict())
        history.epochs.append({"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}})
        log.info("epoch %d total %.4f", epoch, history.epochs[-1]["total"])
    history.rng_state = gen.get_state().numpy().copy()
    model.eval()
    return history


def _seed(cfg: ExperimentConfig, seed: int | None, offset: int) -> int:
    return (cfg.train.seed if seed is None else seed) * 7919 + offset


def pretrain_single_agent(
    data: SceneTensors, cfg: ExperimentConfig, epochs: int | None = None, seed: int | None = None
) -> tuple[StaticSegmenter, TrainLog]:
    """Train encoder + static decoder on ego-only observations with the segmentation loss."""
    s = _seed(cfg, seed, 1)
    gen = torch.Generator().manual_seed(s)
    model = build_seeded(lambda: StaticSegmenter(cfg.scenario.obs_channels, cfg, rate=0, generator=gen), s)
    ego = data.ego_only()
    epochs = cfg.train.epochs_pretrain if epochs is None else epochs
    groups = [{"params": list(model.parameters()), "lr": cfg.train.lr}]
    hist = _fit(
        model, groups, ego, cfg, epochs, s,
        lambda m, b, g: _static_terms(m, b, cfg, g),
        LossWeights(0.0, 0.0, cfg.loss.class_weights),
    )
    return model, hist


def check_spec(model: nn.Module, cfg: ExperimentConfig) -> None:
    expected = decoder_spec_for(cfg)
    if model.spec.digest() != expected.digest():
        raise SpecMismatchError(
            f"checkpoint decoder spec {model.spec.digest()} does not match config spec {expected.digest()}"
        )


def _encoder_groups(model, cfg: ExperimentConfig, freeze: bool, scale: float = 1.0) -> list[dict]:
    enc, comp = [], []
    for name, p in model.encoder.named_parameters():
        if name.startswith("compressor."):
            comp.append(p)
        elif freeze:
            p.requires_grad_(False)
        else:
            enc.append(p)
    return [{"params": enc, "lr": cfg.train.lr * scale}, {"params": comp, "lr": cfg.train.lr}]


# scenes used to estimate feature statistics for the compression bottleneck
PCA_SCENES = 32


def finetune_hypernet(
    data: SceneTensors,
    pretrained: StaticSegmenter | HyperV2X,
    cfg: ExperimentConfig,
    conditioning: str = "context",
    rate: int = 0,
    epochs: int | None = None,
    freeze_encoder: bool | None = None,
    seed: int | None = None,
) -> tuple[HyperV2X, TrainLog]:
    """Fine-tune the Bayesian hypernetwork (and encoder) with the ELBO-style loss.

    From a ``StaticSegmenter`` the hypernetwork mean head is warm-started on its
    decoder weights. From a ``HyperV2X`` (per-rate fine-tuning) the model is
    copied, a compression bottleneck at ``rate`` is inserted (initialised by PCA
    of the agents' features) and the already-trained parameters move at ``compress_lr_scale`` of their learning
    rate. Every rate shares one seed, so rates differ only by the bottleneck.
    """
    check_spec(pretrained, cfg)
    s = _seed(cfg, seed, 2)
    scale = 1.0
    if isinstance(pretrained, HyperV2X):
        model = copy.deepcopy(pretrained)
        scale = cfg.train.compress_lr_scale
        if model.rate != rate:
            build_seeded(lambda: model.encoder.set_compression(rate), s)
            # start the bottleneck at the principal subspace of the agents' features
            model.encoder.compressor.init_pca(*model.encoder.feature_moments(data.obs[:PCA_SCENES]))
    else:
        model = build_seeded(
            lambda: HyperV2X(cfg.scenario.obs_channels, cfg, conditioning=conditioning, rate=rate), s
        )
        warm_start_hyper(model, pretrained)
    freeze = cfg.train.freeze_encoder if freeze_encoder is None else freeze_encoder
    groups = _encoder_groups(model, cfg, freeze, scale)
    groups.append({"params": list(model.hypernet.parameters()), "lr": cfg.train.lr_hypernet * scale})
    epochs = cfg.train.epochs_finetune if epochs is None else epochs
    k = cfg.train.k_samples
    hist = _fit(model, groups, data, cfg, epochs, s, lambda m, b, g: _hyper_terms(m, b, cfg, k, g), cfg.loss)
    return model, hist


def train_static(
    data: SceneTensors,
    pretrained: StaticSegmenter,
    cfg: ExperimentConfig,
    dropout: float = 0.0,
    epochs: int | None = None,
    seed: int | None = None,
) -> tuple[StaticSegmenter, TrainLog]:
    """Fine-tune a fused static-decoder model (deterministic baseline, or MC dropout when ``dropout`` > 0).

    Every dropout rate shares one seed: batches are identical and, since a unit
    is kept when its uniform draw is below 1 - rate, a higher rate drops a
    superset of the units a lower rate drops at every step.
    """
    check_spec(pretrained, cfg)
    s = _seed(cfg, seed, 100)
    model = build_seeded(lambda: StaticSegmenter(cfg.scenario.obs_channels, cfg, rate=0, dropout=dropout), s)
    model.load_state_dict(pretrained.state_dict())
    groups = [{"params": list(model.parameters()), "lr": cfg.train.lr}]
    epochs = cfg.train.epochs_finetune if epochs is None else epochs
    hist = _fit(
        model, groups, data, cfg, epochs, s,
        lambda m, b, g: _static_terms(m, b, cfg, g),
        LossWeights(0.0, 0.0, cfg.loss.class_weights),
    )
    return model, hist


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    n_checked: dict[str, int]

    @property
    def flagged(self) -> list[str]:
        return [g for g, e in self.max_rel_error.items() if not e <= self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.flagged


def _rel_err(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    params: dict[str, torch.Tensor],
    loss_fn: Callable[[], torch.Tensor],
    tolerance: float = 1e-3,
    h: float = 1e-5,
    n_probe: int = 6,
    n_directions: int = 2,
    seed: int = 0,
    group_of: Callable[[str], str] | None = None,
) -> GradCheckReport:
    """Compare autograd gradients with central differences.

    Each parameter tensor is probed at ``n_probe`` random coordinates (all of
    them for small tensors); each group is also checked along
    ``n_directions`` random unit directions, which touches every entry.
    ``loss_fn`` must be deterministic (freeze any noise before calling).
    The default step balances O(h^2) truncation against float64 round-off,
    which dominates for small per-coordinate gradients at h = 1e-6.
    """
    group_of = group_of or (lambda name: name)
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    grads = {n: (g if g is not None else torch.zeros_like(p)) for (n, p), g in zip(params.items(), grads)}
    scale = max((g.abs().max().item() for g in grads.values()), default=0.0)
    floor = max(scale * 1e-7, 1e-12)

    def fd(p: torch.Tensor, direction: torch.Tensor) -> float:
        with torch.no_grad():
            p.add_(direction, alpha=h)
            up = loss_fn().item()
            p.add_(direction, alpha=-2 * h)
            down = loss_fn().item()
            p.add_(direction, alpha=h)
        return (up - down) / (2 * h)

    errors: dict[str, float] = {}
    counts: dict[str, int] = {}
    grouped: dict[str, list[str]] = {}
    for name, p in params.items():
        group = group_of(name)
        grouped.setdefault(group, []).append(name)
        flat_n = p.numel()
        coords = range(flat_n) if flat_n <= n_probe else rng.choice(flat_n, n_probe, replace=False)
        for idx in coords:
            direction = torch.zeros_like(p).view(-1)
            direction[int(idx)] = 1.0
            num = fd(p, direction.view_as(p))
            ana = grads[name].view(-1)[int(idx)].item()
            errors[group] = max(errors.get(group, 0.0), _rel_err(ana, num, floor))
            counts[group] = counts.get(group, 0) + 1
    for group, names in grouped.items():
        for _ in range(n_directions):
            dirs = {n: torch.from_numpy(rng.standard_normal(params[n].shape)).to(params[n].dtype) for n in names}
            norm = math.sqrt(sum(float((d**2).sum()) for d in dirs.values()))
            dirs = {n: d / norm for n, d in dirs.items()}
            ana = sum(float((grads[n] * dirs[n]).sum()) for n in names)
            with torch.no_grad():
                for n in names:
                    params[n].add_(dirs[n], alpha=h)
                up = loss_fn().item()
                for n in names:
                    params[n].add_(dirs[n], alpha=-2 * h)
                down = loss_fn().item()
                for n in names:
                    params[n].add_(dirs[n], alpha=h)
            num = (up - down) / (2 * h)
            errors[group] = max(errors.get(group, 0.0), _rel_err(ana, num, floor))
            counts[group] = counts.get(group, 0) + 1
    return GradCheckReport(max_rel_error=errors, tolerance=tolerance, n_checked=counts)


def _module_group(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "hypernet":
        return ".".join(parts[:3]) if parts[1] == "hidden" else ".".join(parts[:2])
    if parts[:2] == ["encoder", "encoder"]:
        return ".".join(parts[:4])
    return ".".join(parts[:3])


def grad_check_model(
    model: HyperV2X,
    batch: SceneTensors,
    cfg: ExperimentConfig,
    k: int = 2,
    tolerance: float = 1e-3,
    seed: int = 0,
    **kwargs,
) -> GradCheckReport:
    """Gradient check of the total loss w.r.t. every encoder, compression and hypernetwork group.

    Runs in float64 with the reparameterisation noise (and noise conditioning,
    if any) drawn once and held fixed.
    """
    model = copy.deepcopy(model).double()
    batch = batch.to(torch.float64)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        g, _ = model.encoder(batch.obs, batch.thetas)
        cond = model.condition(g, gen)
        post = model.hypernet(cond)
        eps = draw_eps(post, k, gen)
    fixed_cond = None if model.conditioning == "context" else cond

    def loss_fn() -> torch.Tensor:
        terms = _hyper_terms(model, batch, cfg, k, None, eps=eps, cond=fixed_cond)
        return total_loss(terms["seg"], terms["nll"], terms["kl"], cfg.loss)

    params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    return grad_check(params, loss_fn, tolerance=tolerance, seed=seed, group_of=_module_group, **kwargs)
