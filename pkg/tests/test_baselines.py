import numpy as np
import pytest
import torch

from hyperv2x.baselines import (
    DropoutConfig,
    deterministic_forward,
    map_fusion_probs,
    mc_dropout_forward,
    noise_conditioned_variant,
)
from hyperv2x.decoder import ConvLayerSpec, DecoderSpec, decode_batch, dropout_masks, forward_k, init_weights, param_count
from hyperv2x.evaluation import evaluate
from hyperv2x.hypernet import noise_condition
from hyperv2x.metrics import CalibrationReport
from hyperv2x.training import finetune_hypernet, pretrain_single_agent, train_static
from hyperv2x.uncertainty import mean_prediction, uncertainty_maps

SPEC = DecoderSpec.default(4, 3, hidden=16)


def _theta(seed=0):
    return init_weights(SPEC, torch.Generator().manual_seed(seed)).double() + 0.02


def test_dropout_config_validation():
    assert DropoutConfig(0.0).k == 20
    for bad in (1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            DropoutConfig(bad)
    with pytest.raises(ValueError):
        DropoutConfig(0.3, k=0)


def test_deterministic_forward_definitions():
    g = torch.randn(4, 5, 5, dtype=torch.float64)
    theta = _theta()
    det = deterministic_forward(g, theta, SPEC)
    np.testing.assert_allclose(det, forward_k(g, [theta], SPEC).probs[0], atol=1e-12)
    np.testing.assert_allclose(mean_prediction(np.stack([det] * 5)), det, atol=1e-15)
    np.testing.assert_allclose(deterministic_forward(g, torch.zeros(param_count(SPEC)), SPEC), 1 / 3, atol=1e-7)
    with pytest.raises(ValueError):
        deterministic_forward(g, theta[:-1], SPEC)


def test_zero_rate_gives_zero_epistemic():
    g = torch.randn(4, 5, 5, dtype=torch.float64)
    pred = mc_dropout_forward(g, _theta(), DropoutConfig(0.0, k=6), seed=0, spec=SPEC)
    assert pred.k == 6
    assert not uncertainty_maps(pred).epistemic.any()


def test_positive_rate_gives_spread():
    g = torch.randn(4, 5, 5, dtype=torch.float64)
    pred = mc_dropout_forward(g, _theta(), DropoutConfig(0.5), seed=0, spec=SPEC)
    assert pred.k == 20
    assert uncertainty_maps(pred).epistemic.mean() > 0


def test_mask_kept_fraction():
    masks = dropout_masks(SPEC, 1, 20, 0.5, torch.Generator().manual_seed(0), torch.float64)
    # independent oracle: count survivors directly
    kept = sum(int((m > 0).sum()) for m in masks) / sum(m.numel() for m in masks)
    assert abs(kept - 0.5) <= 0.05
    for m in masks:
        assert set(torch.unique(m).tolist()) <= {0.0, 2.0}


def test_inverted_scaling_preserves_expected_activation():
    # one hidden layer and a pointwise output: the logits are the pre-nonlinearity
    # activation of a linear layer fed by the dropped hidden units
    spec = DecoderSpec((ConvLayerSpec(4, 16, 1), ConvLayerSpec(16, 3, 1)))
    gen = torch.Generator().manual_seed(1)
    theta = torch.randn(param_count(spec), generator=gen, dtype=torch.float64)
    g = torch.randn(1, 4, 1, 1, generator=gen, dtype=torch.float64)
    clean = decode_batch(g, theta.view(1, 1, -1), spec)[0, 0, :, 0, 0]
    k = 10_000
    masks = dropout_masks(spec, 1, k, 0.3, gen, torch.float64)
    dropped = decode_batch(g, theta.view(1, 1, -1).expand(1, k, -1), spec, hidden_masks=masks)[0, :, :, 0, 0]
    rel = (dropped.mean(dim=0) - clean).norm() / clean.norm()
    assert rel.item() <= 0.02


def test_mc_dropout_seed_determinism():
    g = torch.randn(4, 5, 5, dtype=torch.float64)
    cfg = DropoutConfig(0.3, k=8)
    a = mc_dropout_forward(g, _theta(), cfg, seed=7, spec=SPEC).probs
    b = mc_dropout_forward(g, _theta(), cfg, seed=7, spec=SPEC).probs
    c = mc_dropout_forward(g, _theta(), cfg, seed=8, spec=SPEC).probs
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_noise_condition_variance():
    x = noise_condition(100_000, 0.1, seed=0, dtype=torch.float64)
    assert abs(x.var().item() / 0.01 - 1) <= 0.05
    assert abs(x.mean().item()) <= 1e-3


def test_noise_variant_constant_condition_with_zero_std(tiny_cfg, tiny_data):
    cfg = tiny_cfg.replace(train={"noise_std": 0.0})
    pre, _ = pretrain_single_agent(tiny_data, cfg, epochs=0)
    model, _ = noise_conditioned_variant(tiny_data, pre, cfg, epochs=1)
    assert model.conditioning == "noise"
    batch = tiny_data.subset(slice(0, 4))
    with torch.no_grad():
        g, _ = model.encoder(batch.obs, batch.thetas)
        post = model.hypernet(model.condition(g))
    assert torch.equal(post.mu, post.mu[:1].expand_as(post.mu))
    assert torch.equal(post.log_var, post.log_var[:1].expand_as(post.log_var))


def test_interface_parity(tiny_cfg, tiny_data):
    pre, _ = pretrain_single_agent(tiny_data, tiny_cfg, epochs=1)
    hyper, _ = finetune_hypernet(tiny_data, pre, tiny_cfg, epochs=1)
    noise, _ = noise_conditioned_variant(tiny_data, pre, tiny_cfg, epochs=1)
    mc, _ = train_static(tiny_data, pre, tiny_cfg, dropout=0.3, epochs=1)
    reports = [evaluate(m, tiny_data, tiny_cfg) for m in (hyper, noise, mc, pre)]
    names = [r.report.model for r in reports]
    assert names == ["hyperv2x", "noise", "mcdropout_0.3", "deterministic"]
    keys = set(reports[0].report.to_dict())
    for r in reports:
        assert isinstance(r.report, CalibrationReport)
        assert set(r.report.to_dict()) == keys
        assert len(r.report.csv_row()) == len(reports[0].report.csv_row())
    assert reports[2].report.k_samples == tiny_cfg.train.k_dropout
    again = evaluate(mc, tiny_data, tiny_cfg)
    assert again.report == reports[2].report


def test_map_fusion_is_pixelwise_or(tiny_cfg, tiny_data):
    pre, _ = pretrain_single_agent(tiny_data, tiny_cfg, epochs=2)
    batch = tiny_data.subset(slice(0, 4))
    fused = map_fusion_probs(pre, batch)
    assert fused.shape == (4, 1, 3) + batch.gt.shape[1:]
    np.testing.assert_allclose(fused.sum(axis=2), 1.0, atol=1e-9)
    per_agent = []
    with torch.no_grad():
        for v in range(batch.obs.shape[1]):
            logits = pre(batch.obs[:, v : v + 1], batch.thetas[:, v : v + 1], 1, mc_dropout=False).logits[:, 0]
            per_agent.append(torch.softmax(logits.double(), dim=1).numpy())
    any_fg = np.any([p.argmax(axis=1) > 0 for p in per_agent], axis=0)
    assert np.array_equal(fused[:, 0].argmax(axis=1) > 0, any_fg)
    # single agent: late fusion is just the ego prediction
    ego = batch.ego_only()
    np.testing.assert_allclose(map_fusion_probs(pre, ego)[:, 0], per_agent[0], atol=1e-12)
