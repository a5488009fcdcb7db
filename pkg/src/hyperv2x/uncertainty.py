"""Mean prediction, epistemic variance and aleatoric entropy from K sampled predictions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import StochasticPrediction

SIMPLEX_TOL = 1e-4


@dataclass
class UncertaintyMaps:
    epistemic: np.ndarray  # (H, W)
    aleatoric: np.ndarray  # (H, W), nats
    mean_probs: np.ndarray  # (classes, H, W)

    @property
    def num_classes(self) -> int:
        return self.mean_probs.shape[0]

    def normalized_aleatoric(self) -> np.ndarray:
        return self.aleatoric / np.log(self.num_classes)

    def summary(self) -> dict[str, float]:
        return {
            "epistemic_mean": float(self.epistemic.mean()),
            "epistemic_max": float(self.epistemic.max()),
            "aleatoric_mean": float(self.aleatoric.mean()),
            "aleatoric_max": float(self.aleatoric.max()),
        }


def _probs(pred) -> np.ndarray:
    p = pred.probs if isinstance(pred, StochasticPrediction) else pred
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 2:
        raise ValueError("expected probabilities shaped (K, classes, ...)")
    return p


def mean_prediction(pred) -> np.ndarray:
    """Average class probabilities over the K axis."""
    p = _probs(pred)
    if p.shape[0] < 1:
        raise ValueError("need at least one sample")
    return p.mean(axis=0)


def epistemic(pred, ddof: int = 0) -> np.ndarray:
    """Class-averaged variance across samples. ``ddof=0`` is the population variance.

    With a single sample the map is identically zero.
    """
    p = _probs(pred)
    if p.shape[0] <= ddof:
        return np.zeros(p.shape[2:])
    # shifting by the first sample keeps the variance exactly 0 when all samples agree
    return (p - p[:1]).var(axis=0, ddof=ddof).mean(axis=0)


def aleatoric(mean_probs: np.ndarray, normalized: bool = False) -> np.ndarray:
    """Entropy (natural log, 0 log 0 = 0) of the mean predictive distribution."""
    p = np.asarray(mean_probs, dtype=np.float64)
    if (p < -SIMPLEX_TOL).any() or (p > 1 + SIMPLEX_TOL).any():
        raise ValueError("mean probabilities leave [0, 1]")
    if np.abs(p.sum(axis=0) - 1.0).max() > SIMPLEX_TOL:
        raise ValueError("mean probabilities are not on the simplex")
    p = np.clip(p, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    ent = terms.sum(axis=0)
    if normalized:
        ent = ent / np.log(p.shape[0])
    return ent


def uncertainty_maps(pred, ddof: int = 0) -> UncertaintyMaps:
    mean = mean_prediction(pred)
    return UncertaintyMaps(epistemic=epistemic(pred, ddof), aleatoric=aleatoric(mean), mean_probs=mean)
