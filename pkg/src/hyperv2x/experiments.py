"""Multi-seed experiment driver built exclusively on the CLI commands.

One seed runs gen-data, pretrain, the conditioning comparison (which trains
the hypernetwork model), the fusion and uncertainty-method comparisons that
reuse that model, and the compression ablation, all from the same frozen
config. The result records where every table landed and how long each step took.
"""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import yaml
from scipy import stats

from .cli import main
from .config import ExperimentConfig, load_config
from .reporting import read_table


class PipelineError(RuntimeError):
    pass


TABLE_DIRS = {"table4": "conditioning", "table1": "compare", "table3": "compare", "compression": "ablate"}


@dataclass
class SeedRun:
    seed: int
    root: Path
    # wall-clock seconds per pipeline step
    seconds: dict[str, float] = field(default_factory=dict)

    def table(self, name: str) -> list[dict]:
        return read_table(self.root / TABLE_DIRS[name] / f"{name}.csv")[1]

    def rows_by_model(self, name: str) -> dict[str, dict]:
        return {r["model"]: r for r in self.table(name)}


def seeded_config(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return cfg.replace(data={"seed": seed}, train={"seed": seed})


def _run(argv: list[str]) -> float:
    start = time.perf_counter()
    code = main(argv)
    if code != 0:
        raise PipelineError(f"command failed with exit code {code}: {' '.join(argv)}")
    return time.perf_counter() - start


def run_seed(
    cfg: ExperimentConfig,
    seed: int,
    root: str | Path,
    rates: tuple[int, ...] = (0, 2, 8, 32),
    tables: tuple[str, ...] = ("1", "3"),
    deterministic: bool = True,
) -> SeedRun:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg_path = root / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(seeded_config(cfg, seed).to_dict(), sort_keys=False))
    common = ["--config", str(cfg_path)] + (["--deterministic"] if deterministic else [])
    data, pre, cond = root / "data", root / "pretrain", root / "conditioning"
    run = SeedRun(seed=seed, root=root)
    run.seconds["gen-data"] = _run(["gen-data", *common, "--out", str(data)])
    run.seconds["pretrain"] = _run(["pretrain", *common, "--data", str(data), "--out", str(pre)])
    pretrained = ["--data", str(data), "--pretrained", str(pre / "model.npz")]
    run.seconds["conditioning"] = _run(["compare", *common, *pretrained, "--tables", "4", "--out", str(cond)])
    hyper = str(cond / "models" / "hyper.npz")
    if tables:
        run.seconds["compare"] = _run([
            "compare", *common, *pretrained, "--hyper", hyper, "--tables", *tables, "--out", str(root / "compare"),
        ])
    if rates:
        run.seconds["ablate"] = _run([
            "ablate-compression", *common, "--data", str(data), "--checkpoint", hyper,
            "--rates", *map(str, rates), "--out", str(root / "ablate"),
        ])
    return run


def run_seeds(cfg: ExperimentConfig | str | Path, seeds, root: str | Path, **kwargs) -> list[SeedRun]:
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg)
    return [run_seed(cfg, s, Path(root) / f"seed_{s}", **kwargs) for s in seeds]


def median(values) -> float:
    return float(statistics.median(values))


def spearman(x, y) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    return float(stats.spearmanr(x, y).statistic)


def _medians(tables: list[dict[str, dict]], keys) -> dict[str, dict[str, float]]:
    return {m: {k: median([t[m][k] for t in tables]) for k in keys} for m in tables[0]}


def summarize(runs: list[SeedRun]) -> dict:
    """Median-over-seeds view of every table, plus per-step timings."""
    metrics = ("iou", "ece", "bs", "nll")
    comp = [r.table("compression") for r in runs]
    rates = [x["rate"] for x in comp[0]]
    return {
        "seeds": [r.seed for r in runs],
        "table1": _medians([r.rows_by_model("table1") for r in runs], metrics),
        "table3": _medians([r.rows_by_model("table3") for r in runs], metrics),
        "table4": _medians([r.rows_by_model("table4") for r in runs], metrics),
        "compression": {
            "rates": rates,
            "spearman_rate_nll": median([spearman([x["rate"] for x in c], [x["nll"] for x in c]) for c in comp]),
            "by_rate": {str(rate): {k: median([c[i][k] for c in comp]) for k in metrics} for i, rate in enumerate(rates)},
        },
        "seconds": {step: sum(r.seconds.get(step, 0.0) for r in runs) for step in runs[0].seconds},
    }
