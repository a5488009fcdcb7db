import pytest
import torch

from hyperv2x.config import ExperimentConfig
from hyperv2x.model import HyperV2X, SceneTensors, build_seeded
from hyperv2x.synthworld import generate_dataset

torch.set_num_threads(1)


def tiny_config(**sections) -> ExperimentConfig:
    """20x20-metre world at 1 m cells (20x20 grid), narrow networks: trains in seconds."""
    base = ExperimentConfig().replace(
        scenario={
            "region_size_m": 20.0,
            "cell_size_m": 1.0,
            "num_agents": 2,
            "vehicle_count_range": [1, 2],
            "agent_range_m": 7.0,
            "agent_min_separation_m": 2.0,
        },
        data={"n_train": 8, "n_test": 4},
        features={"channels": 8, "hidden": [8]},
        decoder={"hidden": 8},
        train={"batch_size": 4, "k_samples": 3, "k_dropout": 5, "hyper_hidden": 16, "epochs_pretrain": 2, "epochs_finetune": 2, "epochs_compress": 1},
        metrics={"n_png_scenes": 1},
    )
    return base.replace(**sections) if sections else base


def grad_check_instance(conditioning="context", rate=2):
    """An 8x8 grid instance (20 m region at 2.5 m cells)."""
    cfg = tiny_config(
        scenario={"region_size_m": 20.0, "cell_size_m": 2.5, "agent_range_m": 12.0},
        features={"channels": 4, "hidden": [4]},
        decoder={"hidden": 4},
        train={"hyper_hidden": 8, "k_samples": 2},
    )
    data = SceneTensors.from_dataset(generate_dataset(cfg.scenario, 2, seed=3))
    assert data.gt.shape[1:] == (8, 8) and (data.gt > 0).any()
    model = build_seeded(lambda: HyperV2X(3, cfg, conditioning=conditioning, rate=rate), 0)
    with torch.no_grad():
        model.encoder.refine.weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(1))
        model.hypernet.head.weight.mul_(10)
        model.hypernet.head.bias[model.hypernet.n_params :] = -2.0
    return model, data, cfg


@pytest.fixture(scope="session")
def tiny_cfg() -> ExperimentConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg) -> SceneTensors:
    return SceneTensors.from_dataset(generate_dataset(tiny_cfg.scenario, 8, seed=0))


# one PASS/FAIL line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
