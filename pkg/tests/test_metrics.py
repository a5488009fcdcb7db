import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperv2x.metrics import (
    NLL_FLOOR,
    CalibrationReport,
    ReportBuilder,
    brier,
    ece,
    iou,
    nll,
    onehot,
    pixel_confidence_stream,
    reliability_bins,
)

from oracles import ece_bruteforce


def test_iou_examples():
    m = np.array([[1, 0], [1, 1]], dtype=bool)
    assert iou(m, m) == 1.0
    assert iou(m, ~m) == 0.0
    top = np.array([[1, 1], [0, 0]], dtype=bool)
    left = np.array([[1, 0], [1, 0]], dtype=bool)
    assert iou(top, left) == pytest.approx(1 / 3)
    assert iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ValueError):
        iou(top, np.zeros((3, 3)))


def test_ece_examples():
    assert ece([1.0, 1.0, 1.0], [1, 1, 1]) == 0.0
    assert ece([0.8, 0.8, 0.6, 0.6], [1, 0, 1, 0], m_bins=1) == pytest.approx(0.2, abs=1e-12)
    with pytest.raises(ValueError):
        ece([], [])
    with pytest.raises(ValueError):
        ece([1.2], [1])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), m=st.integers(1, 20))
def test_ece_matches_bruteforce_and_is_permutation_invariant(seed, m):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 200))
    conf = rng.uniform(0, 1, n)
    # put some mass exactly on bin edges and on 1.0
    conf[: n // 5] = np.round(conf[: n // 5] * m) / m
    correct = rng.random(n) < conf
    value = ece(conf, correct, m)
    assert value == pytest.approx(ece_bruteforce(conf, correct, m), abs=1e-9)
    perm = rng.permutation(n)
    assert ece(conf[perm], correct[perm], m) == pytest.approx(value, abs=1e-12)
    assert 0.0 <= value <= 1.0


def test_bins_cover_unit_interval():
    bins = reliability_bins(np.linspace(0, 1, 101), np.ones(101), 15)
    assert bins[0].lo == 0.0 and bins[-1].hi == 1.0
    assert all(a.hi == b.lo for a, b in zip(bins, bins[1:]))
    assert sum(b.count for b in bins) == 101


def test_constant_confidence_single_bin():
    correct = np.array([1, 1, 0, 1, 0, 0, 1, 1])
    assert ece(np.full(8, 0.42), correct, 1) == pytest.approx(abs(correct.mean() - 0.42), abs=1e-15)


def test_brier_examples():
    y = onehot(np.array([[0]]), 2)
    assert brier(y, y) == 0.0
    assert brier(np.array([0.5, 0.5])[:, None, None], y) == pytest.approx(0.5)
    assert brier(onehot(np.array([[1]]), 2), y) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        brier(np.zeros((2, 2, 2)), y)


@pytest.mark.parametrize("c", [2, 3])
def test_brier_uniform_closed_form(c):
    labels = np.arange(12).reshape(3, 4) % c
    uniform = np.full((c, 3, 4), 1 / c)
    assert brier(uniform, onehot(labels, c)) == pytest.approx((1 - 1 / c) ** 2 + (c - 1) / c**2, abs=1e-12)


def test_nll_examples():
    labels = np.array([[0, 1]])
    assert nll(onehot(labels, 2), labels) == 0.0
    assert nll(np.full((2, 1, 2), 0.5), labels) == pytest.approx(math.log(2))
    assert nll(onehot(1 - labels, 2), labels) == pytest.approx(-math.log(NLL_FLOOR))
    assert nll(np.full((3, 2, 2), 1 / 3), np.zeros((2, 2), dtype=int)) == pytest.approx(math.log(3))


def test_confidence_stream():
    conf, _ = pixel_confidence_stream(np.full((3, 2, 2), 1 / 3), np.zeros((2, 2), dtype=int))
    np.testing.assert_allclose(conf, 1 / 3)
    # a tie between classes 1 and 2 resolves to class 1
    p = np.array([0.2, 0.4, 0.4])[:, None, None]
    assert pixel_confidence_stream(p, np.array([[1]]))[1].all()
    # manual 2x2 case
    p = np.array([
        [[0.7, 0.1], [0.2, 0.5]],
        [[0.2, 0.6], [0.3, 0.25]],
        [[0.1, 0.3], [0.5, 0.25]],
    ])
    gt = np.array([[0, 2], [2, 1]])
    conf, correct = pixel_confidence_stream(p, gt)
    assert conf.tolist() == [0.7, 0.6, 0.5, 0.5]
    assert correct.tolist() == [True, False, True, False]


def test_report_builder_pools_pixels_and_roundtrips():
    rng = np.random.default_rng(3)
    builder = ReportBuilder(3, 15)
    probs, labels = [], []
    for _ in range(3):
        x = rng.exponential(size=(3, 4, 4))
        p = x / x.sum(axis=0)
        y = rng.integers(0, 3, (4, 4))
        builder.add(p, y, {"epistemic_mean": 0.1, "epistemic_max": 0.3})
        probs.append(p)
        labels.append(y)
    report = builder.build(model="m", rate=2, cv_bytes=10, k_samples=4)
    conf = np.concatenate([pixel_confidence_stream(p, y)[0] for p, y in zip(probs, labels)])
    corr = np.concatenate([pixel_confidence_stream(p, y)[1] for p, y in zip(probs, labels)])
    assert report.ece == pytest.approx(ece(conf, corr, 15), abs=1e-12)
    assert report.n_pixels == 48 == sum(b.count for b in report.bins)
    pred_fg = np.concatenate([(p.argmax(0) != 0).ravel() for p in probs])
    gt_fg = np.concatenate([(y != 0).ravel() for y in labels])
    assert report.vehicle_iou == pytest.approx(iou(pred_fg, gt_fg))
    assert report.brier == pytest.approx(np.mean([brier(p, onehot(y, 3)) for p, y in zip(probs, labels)]))
    back = CalibrationReport.from_dict(report.to_dict())
    assert back == report
    assert report.csv_row()[:3] == ["m", "2", "10"]
    with pytest.raises(ValueError):
        ReportBuilder(3).build()
