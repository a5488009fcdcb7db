import math

import numpy as np
import pytest
import torch

from hyperv2x.checkpoint import load_checkpoint, load_rng_state, save_checkpoint
from hyperv2x.config import LossWeights
from hyperv2x.evaluation import evaluate
from hyperv2x.hypernet import WeightPosterior, sample_theta
from hyperv2x.decoder import decode_batch
from hyperv2x.metrics import nll as metrics_nll
from hyperv2x.model import HyperV2X, SceneTensors, StaticSegmenter, build_seeded
from hyperv2x.synthworld import generate_dataset
from hyperv2x.training import (
    SpecMismatchError,
    TrainingDiverged,
    _hyper_terms,
    _static_terms,
    finetune_hypernet,
    grad_check,
    grad_check_model,
    kl_gaussian,
    nll_loss,
    pretrain_single_agent,
    seg_loss,
    total_loss,
    train_static,
)

from conftest import grad_check_instance, tiny_config


def test_seg_loss_limits_and_closed_form():
    gt = torch.randint(0, 3, (2, 4, 4))
    strong = torch.nn.functional.one_hot(gt, 3).permute(0, 3, 1, 2).double() * 50
    assert seg_loss(strong, gt, (1, 1, 1)).item() < 1e-12
    uniform = torch.zeros(2, 3, 4, 4, dtype=torch.float64)
    assert seg_loss(uniform, gt, (1, 1, 1)).item() == pytest.approx(math.log(3), abs=1e-12)
    logits = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    assert seg_loss(logits, gt, (2, 2, 2)).item() == pytest.approx(2 * seg_loss(logits, gt, (1, 1, 1)).item())
    with pytest.raises(ValueError):
        seg_loss(logits, gt[:, :3], (1, 1, 1))
    with pytest.raises(ValueError):
        seg_loss(logits, gt, (1, 1))


def test_seg_loss_averages_over_samples():
    gt = torch.randint(0, 3, (2, 4, 4))
    logits = torch.randn(2, 5, 3, 4, 4, dtype=torch.float64)
    per_k = [seg_loss(logits[:, k], gt, (1, 2, 3)) for k in range(5)]
    assert seg_loss(logits, gt, (1, 2, 3)).item() == pytest.approx(float(sum(per_k) / 5), abs=1e-12)


def test_nll_loss_matches_metric():
    rng = np.random.default_rng(0)
    x = rng.exponential(size=(3, 5, 5))
    p = x / x.sum(axis=0)
    gt = rng.integers(0, 3, (5, 5))
    assert nll_loss(torch.from_numpy(p), torch.from_numpy(gt)).item() == pytest.approx(metrics_nll(p, gt), abs=1e-12)
    onehot = torch.nn.functional.one_hot(torch.from_numpy(gt), 3).permute(2, 0, 1).double()
    assert nll_loss(onehot, torch.from_numpy(gt)).item() == 0.0


def test_nll_gradient_wrt_mu_fixed_eps():
    torch.manual_seed(0)
    cfg = tiny_config()
    model = HyperV2X(3, cfg).double()
    g = torch.randn(1, cfg.features.channels, 5, 5, dtype=torch.float64)
    gt = torch.randint(0, 3, (1, 5, 5))
    p = model.hypernet.n_params
    mu = (torch.randn(1, p, dtype=torch.float64) * 0.2).requires_grad_()
    log_var = torch.full((1, p), -4.0, dtype=torch.float64)
    eps = torch.randn(1, 3, p, dtype=torch.float64)

    def loss():
        theta = sample_theta(WeightPosterior(mu, log_var), 3, eps=eps)
        probs = torch.softmax(decode_batch(g, theta, model.spec), dim=2)
        return nll_loss(probs.mean(dim=1), gt)

    report = grad_check({"mu": mu}, loss, n_probe=20)
    assert report.ok, report.max_rel_error


def test_kl_closed_form_examples():
    one = lambda m, lv: WeightPosterior(torch.tensor([m], dtype=torch.float64), torch.tensor([lv], dtype=torch.float64))
    assert kl_gaussian(one(0.0, 0.0)).item() == 0.0
    assert kl_gaussian(one(1.0, 0.0), normalize=False).item() == pytest.approx(0.5)
    assert kl_gaussian(one(0.0, 1.0), normalize=False).item() == pytest.approx((math.e - 2) / 2, abs=1e-12)
    post = WeightPosterior(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))
    assert kl_gaussian(post).item() == pytest.approx((0.5 + (math.e - 2) / 2) / 2, rel=1e-6)


def test_total_loss_examples():
    w = LossWeights(0.1, 0.01)
    assert total_loss(1.0, 0.5, 0.2, w).item() == pytest.approx(1.052, abs=1e-12)
    assert total_loss(0.7, 3.0, 9.0, LossWeights(0.0, 0.0)).item() == pytest.approx(0.7)
    diff = total_loss(1.0, 0.5, 0.4, w) - total_loss(1.0, 0.5, 0.2, w)
    assert diff.item() == pytest.approx(0.01 * 0.2, abs=1e-15)
    assert total_loss(1.0, 0.5, 0.2, w).dtype == torch.float64
    for bad in (float("nan"), float("inf")):
        with pytest.raises(ValueError, match="non-finite"):
            total_loss(1.0, bad, 0.2, w)


def test_pretrain_zero_epochs_equals_initialisation(tiny_cfg, tiny_data):
    model, hist = pretrain_single_agent(tiny_data, tiny_cfg, epochs=0)
    again, _ = pretrain_single_agent(tiny_data, tiny_cfg, epochs=0)
    assert hist.epochs == []
    for (n, a), (_, b) in zip(model.state_dict().items(), again.state_dict().items()):
        assert torch.equal(a, b), n


def test_pretrain_loss_decreases(tiny_cfg, tiny_data):
    _, hist = pretrain_single_agent(tiny_data, tiny_cfg, epochs=30)
    curve = hist.loss_curve()
    assert curve[-1] < curve[0]


def test_checkpoint_roundtrip_identical_loss(tmp_path, tiny_cfg, tiny_data):
    model, hist = pretrain_single_agent(tiny_data, tiny_cfg, epochs=2)
    save_checkpoint(model, tiny_cfg, tmp_path / "m.npz", rng_state=hist.rng_state)
    back, meta = load_checkpoint(tmp_path / "m.npz", tiny_cfg)
    batch = tiny_data.subset(slice(0, 4)).ego_only()
    a = _static_terms(model, batch, tiny_cfg, None)["seg"]
    b = _static_terms(back, batch, tiny_cfg, None)["seg"]
    assert a.item() == b.item()
    assert meta["kind"] == "static" and meta["config"] == tiny_cfg.to_dict()
    assert torch.equal(load_rng_state(tmp_path / "m.npz"), torch.from_numpy(hist.rng_state))


def test_checkpoint_spec_mismatch(tmp_path, tiny_cfg, tiny_data):
    model, _ = pretrain_single_agent(tiny_data, tiny_cfg, epochs=0)
    save_checkpoint(model, tiny_cfg, tmp_path / "m.npz")
    other = tiny_cfg.replace(decoder={"hidden": 4})
    with pytest.raises(SpecMismatchError):
        load_checkpoint(tmp_path / "m.npz", other)
    with pytest.raises(SpecMismatchError):
        finetune_hypernet(tiny_data, model, other, epochs=0)


def test_divergence_restores_last_good(tiny_data):
    cfg = tiny_config(loss={"class_weights": [float("inf"), 1.0, 1.0]})
    with pytest.raises(TrainingDiverged) as info:
        pretrain_single_agent(tiny_data, cfg, epochs=2)
    restored = info.value.last_good
    init, _ = pretrain_single_agent(tiny_data, tiny_config(), epochs=0)
    for (n, a), (_, b) in zip(restored.state_dict().items(), init.state_dict().items()):
        assert torch.equal(a, b), n


def test_warm_start_reproduces_pretrained_decoder(tiny_cfg, tiny_data):
    pre, _ = pretrain_single_agent(tiny_data, tiny_cfg, epochs=1)
    hyper, _ = finetune_hypernet(tiny_data, pre, tiny_cfg, epochs=0)
    batch = tiny_data.subset(slice(0, 2))
    with torch.no_grad():
        post = hyper.hypernet(hyper.condition(hyper.encoder(batch.obs, batch.thetas)[0]))
    # head weights are scaled down, so mu stays close to the pretrained weights
    assert torch.allclose(post.mu, pre.theta_dec.expand_as(post.mu), atol=0.05)
    assert torch.allclose(post.log_var, torch.full_like(post.log_var, tiny_cfg.train.logvar_init), atol=0.05)


def test_deterministic_hypernet_training_decreases_loss(tiny_data):
    cfg = tiny_config(loss={"lambda_kl": 0.0}, train={"logvar_init": -12.0})
    pre, _ = pretrain_single_agent(tiny_data, cfg, epochs=1)
    _, hist = finetune_hypernet(tiny_data, pre, cfg, epochs=15)
    curve = hist.loss_curve()
    assert curve[-1] < curve[0]


def test_freeze_encoder_keeps_weights(tiny_cfg, tiny_data):
    pre, _ = pretrain_single_agent(tiny_data, tiny_cfg, epochs=1)
    model, _ = finetune_hypernet(tiny_data, pre, tiny_cfg, epochs=2, freeze_encoder=True)
    for name, p in pre.encoder.state_dict().items():
        if not name.startswith("compressor."):
            assert torch.equal(model.encoder.state_dict()[name], p), name


def test_training_is_deterministic(tiny_cfg, tiny_data):
    pre, _ = pretrain_single_agent(tiny_data, tiny_cfg, epochs=1)
    runs = [finetune_hypernet(tiny_data, pre, tiny_cfg, epochs=2)[0] for _ in range(2)]
    reports = [evaluate(m, tiny_data, tiny_cfg).report for m in runs]
    assert reports[0].csv_row() == reports[1].csv_row()
    assert reports[0].to_dict() == reports[1].to_dict()


def test_logged_terms_recompose_total(tiny_cfg, tiny_data):
    pre, _ = pretrain_single_agent(tiny_data, tiny_cfg, epochs=1)
    _, hist = finetune_hypernet(tiny_data, pre, tiny_cfg, epochs=1)
    w = tiny_cfg.loss
    for row in hist.steps:
        assert row["seg"] + w.lambda_nll * row["nll"] + w.lambda_kl * row["kl"] == pytest.approx(row["total"], abs=1e-9)
        assert "nll_per_sample" in row


def test_per_rate_finetune_inserts_bottleneck(tiny_cfg, tiny_data):
    pre, _ = pretrain_single_agent(tiny_data, tiny_cfg, epochs=1)
    hyper, _ = finetune_hypernet(tiny_data, pre, tiny_cfg, epochs=0)
    comp, _ = finetune_hypernet(tiny_data, hyper, tiny_cfg, rate=4, epochs=1)
    assert comp.rate == 4 and hyper.rate == 0
    assert comp.encoder.compressor.bottleneck_channels() == tiny_cfg.features.channels // 4


def test_static_dropout_training(tiny_cfg, tiny_data):
    pre, _ = pretrain_single_agent(tiny_data, tiny_cfg, epochs=1)
    model, hist = train_static(tiny_data, pre, tiny_cfg, dropout=0.3, epochs=1)
    assert model.dropout == 0.3 and len(hist.epochs) == 1
    assert isinstance(model, StaticSegmenter)


def test_grad_check_linear_model_exact():
    torch.manual_seed(0)
    w = torch.randn(5, dtype=torch.float64, requires_grad=True)
    x = torch.randn(5, dtype=torch.float64)
    report = grad_check({"w": w}, lambda: (w * x).sum() * 3.0, tolerance=1e-9)
    assert report.ok, report.max_rel_error


def test_grad_check_flags_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.pow(2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(3, dtype=torch.float64)

    good = torch.tensor([0.3, -0.4, 1.1], dtype=torch.float64, requires_grad=True)
    bad = torch.tensor([0.5, 0.9, -1.3], dtype=torch.float64, requires_grad=True)
    report = grad_check({"good": good, "bad": bad}, lambda: good.pow(3).sum() + Wrong.apply(bad))
    assert report.flagged == ["bad"]
    assert not report.ok


@pytest.mark.parametrize("conditioning", ["context", "noise"])
def test_grad_check_full_model(conditioning):
    model, data, cfg = grad_check_instance(conditioning)
    report = grad_check_model(model, data, cfg, k=2, tolerance=1e-3)
    groups = set(report.max_rel_error)
    assert any(g.startswith("hypernet.") for g in groups)
    assert any(g.startswith("encoder.encoder") for g in groups)
    assert any(g.startswith("encoder.compressor") for g in groups)
    assert report.ok, report.max_rel_error


def test_hyper_terms_fixed_eps_deterministic():
    model, data, cfg = grad_check_instance()
    model = model.double()
    batch = data.to(torch.float64)
    eps = torch.randn(2, 2, model.hypernet.n_params, dtype=torch.float64)
    a = _hyper_terms(model, batch, cfg, 2, None, eps=eps)
    b = _hyper_terms(model, batch, cfg, 2, None, eps=eps)
    assert all(a[k].item() == b[k].item() for k in a)


def test_pretraining_overfits_noiseless_scenes():
    cfg = tiny_config(
        scenario={"obs_noise_std": 0.0, "obs_noise_std_max": None, "agent_range_m": 30.0},
        features={"channels": 16, "hidden": [16]},
        decoder={"hidden": 16},
        train={"lr": 5e-3, "batch_size": 1},
    )
    data = SceneTensors.from_dataset(generate_dataset(cfg.scenario, 8, seed=0)).ego_only()
    model, _ = pretrain_single_agent(data, cfg, epochs=100)
    assert evaluate(model, data, cfg).report.vehicle_iou >= 0.9
