"""IoU, expected calibration error, Brier score and NLL over per-pixel predictions."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

NLL_FLOOR = 1e-12
CSV_SCHEMA = "hyperv2x.metrics/1"
CSV_COLUMNS = ("model", "rate", "cv_bytes", "iou", "ece", "bs", "nll")


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """|pred & gt| / |pred | gt|, defined as 1 for two empty masks."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    _check_same_shape(pred_mask, gt_mask)
    union = np.logical_or(pred_mask, gt_mask).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred_mask, gt_mask).sum() / union)


@dataclass
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    accuracy: float
    confidence: float


def bin_edges(m_bins: int) -> np.ndarray:
    # i / M exactly, so an edge value k / M always opens bin k
    return np.arange(m_bins + 1) / m_bins


def bin_index(confidences: np.ndarray, m_bins: int) -> np.ndarray:
    # bins are [lo, hi) except the last, which also takes confidence 1.0
    idx = np.searchsorted(bin_edges(m_bins), confidences, side="right") - 1
    return np.clip(idx, 0, m_bins - 1)


def reliability_bins(confidences, correctness, m_bins: int = 15) -> list[ReliabilityBin]:
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    corr = np.asarray(correctness, dtype=np.float64).ravel()
    if conf.size == 0:
        raise ValueError("calibration needs at least one prediction")
    _check_same_shape(conf, corr)
    if (conf < 0).any() or (conf > 1).any():
        raise ValueError("confidences must lie in [0, 1]")
    idx = bin_index(conf, m_bins)
    counts = np.bincount(idx, minlength=m_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=m_bins)
    acc_sum = np.bincount(idx, weights=corr, minlength=m_bins)
    edges = bin_edges(m_bins)
    out = []
    for m in range(m_bins):
        n = int(counts[m])
        out.append(
            ReliabilityBin(
                lo=float(edges[m]),
                hi=float(edges[m + 1]),
                count=n,
                accuracy=float(acc_sum[m] / n) if n else 0.0,
                confidence=float(conf_sum[m] / n) if n else 0.0,
            )
        )
    return out


def ece_from_bins(bins: list[ReliabilityBin]) -> float:
    total = sum(b.count for b in bins)
    return float(sum(b.count / total * abs(b.accuracy - b.confidence) for b in bins if b.count))


def ece(confidences, correctness, m_bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins."""
    return ece_from_bins(reliability_bins(confidences, correctness, m_bins))


def onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(H, W) labels -> (classes, H, W) one-hot."""
    labels = np.asarray(labels)
    return (np.arange(num_classes).reshape(-1, *([1] * labels.ndim)) == labels[None]).astype(np.float64)


def brier(mean_probs: np.ndarray, gt_onehot: np.ndarray) -> float:
    """Mean over pixels of the squared error summed over classes (range [0, 2])."""
    p = np.asarray(mean_probs, dtype=np.float64)
    y = np.asarray(gt_onehot, dtype=np.float64)
    _check_same_shape(p, y)
    return float(((p - y) ** 2).sum(axis=0).mean())


def nll(mean_probs: np.ndarray, gt_labels: np.ndarray) -> float:
    """Mean negative log-probability of the true class, floored at 1e-12."""
    p = np.asarray(mean_probs, dtype=np.float64)
    gt = np.asarray(gt_labels)
    if p.shape[1:] != gt.shape:
        raise ValueError(f"shape mismatch: probabilities {p.shape} vs labels {gt.shape}")
    p_true = np.take_along_axis(p, gt[None].astype(np.int64), axis=0)[0]
    return float(-np.log(np.maximum(p_true, NLL_FLOOR)).mean())


def pixel_confidence_stream(mean_probs: np.ndarray, gt_labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flattened max-probability confidences and argmax correctness (ties -> lowest class)."""
    p = np.asarray(mean_probs, dtype=np.float64)
    gt = np.asarray(gt_labels)
    if p.shape[1:] != gt.shape:
        raise ValueError(f"shape mismatch: probabilities {p.shape} vs labels {gt.shape}")
    conf = p.max(axis=0).ravel()
    correct = (p.argmax(axis=0) == gt).ravel()
    return conf, correct


@dataclass
class CalibrationReport:
    vehicle_iou: float
    ece: float
    brier: float
    nll: float
    bins: list[ReliabilityBin]
    n_bins: int
    n_pixels: int
    class_names: list[str]
    model: str = "hyperv2x"
    rate: int = 0
    cv_bytes: int = 0
    k_samples: int = 1
    uncertainty: dict[str, float] = field(default_factory=dict)
    pooling: str = "all pixels of the split"
    confidence: str = "max class probability of the mean prediction"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = CSV_SCHEMA
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReport":
        d = dict(d)
        d.pop("schema", None)
        d["bins"] = [ReliabilityBin(**b) for b in d["bins"]]
        return cls(**d)

    def csv_row(self) -> list[str]:
        return [
            self.model,
            str(self.rate),
            str(self.cv_bytes),
            f"{self.vehicle_iou:.6f}",
            f"{self.ece:.6f}",
            f"{self.brier:.6f}",
            f"{self.nll:.6f}",
        ]


class ReportBuilder:
    """Accumulates per-scene mean predictions and pools them into one report."""

    def __init__(self, num_classes: int, m_bins: int = 15):
        self.num_classes = num_classes
        self.m_bins = m_bins
        self._conf: list[np.ndarray] = []
        self._correct: list[np.ndarray] = []
        self._inter = 0
        self._union = 0
        self._brier_sum = 0.0
        self._nll_sum = 0.0
        self._n = 0
        self._unc: dict[str, list[float]] = {}

    def add(self, mean_probs: np.ndarray, gt_labels: np.ndarray, unc: dict[str, float] | None = None) -> None:
        n_pix = gt_labels.size
        pred_fg = mean_probs.argmax(axis=0) != 0
        gt_fg = gt_labels != 0
        self._inter += int(np.logical_and(pred_fg, gt_fg).sum())
        self._union += int(np.logical_or(pred_fg, gt_fg).sum())
        self._brier_sum += brier(mean_probs, onehot(gt_labels, self.num_classes)) * n_pix
        self._nll_sum += nll(mean_probs, gt_labels) * n_pix
        self._n += n_pix
        conf, correct = pixel_confidence_stream(mean_probs, gt_labels)
        self._conf.append(conf)
        self._correct.append(correct)
        for key, value in (unc or {}).items():
            self._unc.setdefault(key, []).append(value)

    def build(self, **meta) -> CalibrationReport:
        if self._n == 0:
            raise ValueError("no predictions were added")
        bins = reliability_bins(np.concatenate(self._conf), np.concatenate(self._correct), self.m_bins)
        unc = {}
        for key, values in self._unc.items():
            unc[key] = float(np.max(values)) if key.endswith("_max") else float(np.mean(values))
        names = ["background"] + [f"dynamic_{c}" for c in range(1, self.num_classes)]
        return CalibrationReport(
            vehicle_iou=1.0 if self._union == 0 else self._inter / self._union,
            ece=ece_from_bins(bins),
            brier=self._brier_sum / self._n,
            nll=self._nll_sum / self._n,
            bins=bins,
            n_bins=self.m_bins,
            n_pixels=self._n,
            class_names=names,
            uncertainty=unc,
            **meta,
        )
