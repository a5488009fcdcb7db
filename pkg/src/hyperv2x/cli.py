"""Command-line front end: data generation, training, evaluation, ablations and comparisons.

Every command writes into a staging directory that is renamed into place only
on success, alongside a frozen ``config.yaml`` and a ``VERSION`` file. Any
failure exits nonzero with one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Sequence

import torch

from . import __version__
from .baselines import DROPOUT_RATES, map_fusion_probs, noise_conditioned_variant
from .checkpoint import load_checkpoint, save_checkpoint
from .config import COMPRESSION_RATES, OUTPUT_ROOT_ENV, ConfigError, ExperimentConfig, dump_config, load_config
from .evaluation import EvalResult, evaluate
from .metrics import CalibrationReport
from .model import HyperV2X, SceneTensors, StaticSegmenter
from .reporting import compression_csv, metrics_csv, save_reliability_diagram, save_scene_panels
from .synthworld import generate_dataset, load_dataset, persist_dataset
from .training import TrainLog, finetune_hypernet, pretrain_single_agent, train_static

log = logging.getLogger("hyperv2x")

VARIANTS = ("hyper", "noise", "mcdropout", "deterministic")


class CLIError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would print multi-line usage text
        raise CLIError(f"usage: {message}")


# ---------------------------------------------------------------------------
# plumbing


def resolve_out(path: str | None, cfg: ExperimentConfig, verb: str) -> Path:
    out = Path(path) if path else Path(cfg.output_dir) / verb
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


@contextlib.contextmanager
def staged_output(out: Path, cfg: ExperimentConfig):
    """Yield a temp directory that replaces ``out`` only if the block succeeds."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}.staging-"))
    tmp.chmod(0o755)  # mkdtemp creates 0700
    try:
        (tmp / "config.yaml").write_text(dump_config(cfg))
        (tmp / "VERSION").write_text(f"hyperv2x {__version__}\n")
        yield tmp
        backup = None
        if out.exists():
            backup = out.parent / f".{out.name}.old-{os.getpid()}"
            os.replace(out, backup)
        os.replace(tmp, out)
        if backup is not None:
            shutil.rmtree(backup)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def configure_runtime(workers: int, deterministic: bool) -> None:
    if deterministic:
        if workers != 1:
            log.warning("deterministic mode forces workers=1 (requested %d)", workers)
        workers = 1
        torch.use_deterministic_algorithms(True)
    torch.set_num_threads(max(1, workers))


def load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(train={"seed": args.seed})
    return cfg


def split_tensors(data_dir: str, split: str) -> SceneTensors:
    path = Path(data_dir) / split
    if not (path / "manifest.json").exists():
        raise CLIError(f"no dataset split at {path}")
    return SceneTensors.from_dataset(load_dataset(path))


def log_csv(hist: TrainLog) -> str:
    keys = ["epoch", "seg", "nll", "kl", "total"]
    lines = [",".join(keys)]
    for row in hist.epochs:
        lines.append(",".join(str(row["epoch"]) if k == "epoch" else f"{row[k]:.6f}" for k in keys))
    return "\n".join(lines) + "\n"


def write_report(out: Path, result: EvalResult, cfg: ExperimentConfig, maps_dir: str = "maps") -> None:
    report = result.report
    write_text(out / "report.json", report.to_json() + "\n")
    write_text(out / "metrics.csv", metrics_csv([report]))
    save_reliability_diagram(out / "reliability.png", report)
    for scene in result.scenes:
        m = scene.maps
        save_scene_panels(out / maps_dir, f"scene_{scene.index:03d}", scene.gt, m.mean_probs, m.epistemic, m.aleatoric)


def _train_variant(variant: str, train: SceneTensors, pretrained, cfg: ExperimentConfig, dropout: float, rate: int):
    if variant == "hyper":
        return finetune_hypernet(train, pretrained, cfg, conditioning="context", rate=rate)
    if variant == "noise":
        return noise_conditioned_variant(train, pretrained, cfg, rate=rate)
    if rate != 0:
        raise CLIError("static-decoder baselines are trained without compression")
    if variant == "mcdropout":
        if dropout <= 0:
            raise CLIError("mcdropout needs --dropout-rate > 0")
        return train_static(train, pretrained, cfg, dropout=dropout)
    return train_static(train, pretrained, cfg, dropout=0.0)


def _load_static(path: str, cfg: ExperimentConfig) -> StaticSegmenter:
    model, _ = load_checkpoint(path, cfg)
    if not isinstance(model, StaticSegmenter):
        raise CLIError(f"{path} is not a static-decoder checkpoint")
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: ExperimentConfig) -> dict:
    out = resolve_out(args.out, cfg, "data")
    with staged_output(out, cfg) as tmp:
        seed = cfg.data.seed
        train = generate_dataset(cfg.scenario, cfg.data.n_train, seed=2 * seed)
        test = generate_dataset(cfg.scenario, cfg.data.n_test, seed=2 * seed + 1)
        persist_dataset(train, tmp / "train")
        persist_dataset(test, tmp / "test")
    return {"out": str(out), "n_train": cfg.data.n_train, "n_test": cfg.data.n_test}


def cmd_pretrain(args, cfg: ExperimentConfig) -> dict:
    train = split_tensors(args.data, "train")
    out = resolve_out(args.out, cfg, "pretrain")
    with staged_output(out, cfg) as tmp:
        model, hist = pretrain_single_agent(train, cfg)
        save_checkpoint(model, cfg, tmp / "model.npz", extra={"stage": "pretrain"}, rng_state=hist.rng_state)
        write_text(tmp / "train_log.csv", log_csv(hist))
    return {"out": str(out), "checkpoint": str(out / "model.npz")}


def cmd_train(args, cfg: ExperimentConfig) -> dict:
    train = split_tensors(args.data, "train")
    pretrained = _load_static(args.pretrained, cfg)
    rate = cfg.compression.rate if args.rate is None else args.rate
    out = resolve_out(args.out, cfg, f"train_{args.variant}")
    with staged_output(out, cfg) as tmp:
        model, hist = _train_variant(args.variant, train, pretrained, cfg, args.dropout_rate, rate)
        save_checkpoint(
            model, cfg, tmp / "model.npz", extra={"stage": "train", "variant": args.variant}, rng_state=hist.rng_state
        )
        write_text(tmp / "train_log.csv", log_csv(hist))
    return {"out": str(out), "checkpoint": str(out / "model.npz")}


def cmd_eval(args, cfg: ExperimentConfig) -> dict:
    test = split_tensors(args.data, "test")
    model, _ = load_checkpoint(args.checkpoint, cfg)
    out = resolve_out(args.out, cfg, "eval")
    probs_fn = None
    name = args.name
    if args.map_fusion:
        if not isinstance(model, StaticSegmenter):
            raise CLIError("map fusion needs a static-decoder checkpoint")
        probs_fn = lambda batch, gen: map_fusion_probs(model, batch)  # noqa: E731
        name = name or "map_fusion"
    if args.ego_only:
        test = test.ego_only()
        name = name or "no_fusion"
    with staged_output(out, cfg) as tmp:
        result = evaluate(model, test, cfg, k=args.k, name=name, keep_maps=cfg.metrics.n_png_scenes, probs_fn=probs_fn)
        write_report(tmp, result, cfg)
    return {"out": str(out), "iou": result.report.vehicle_iou, "ece": result.report.ece}


def cmd_ablate_compression(args, cfg: ExperimentConfig) -> dict:
    rates = sorted(set(args.rates))
    for r in rates:
        if r not in COMPRESSION_RATES:
            raise CLIError(f"rate {r} not in {COMPRESSION_RATES}")
        if r and cfg.features.channels % r:
            raise CLIError(f"rate {r} does not divide {cfg.features.channels} feature channels")
    train = split_tensors(args.data, "train")
    test = split_tensors(args.data, "test")
    base, _ = load_checkpoint(args.checkpoint, cfg)
    if not isinstance(base, HyperV2X):
        raise CLIError("compression ablation starts from a hypernetwork checkpoint")
    out = resolve_out(args.out, cfg, "ablate_compression")
    reports: list[CalibrationReport] = []
    with staged_output(out, cfg) as tmp:
        for r in rates:
            model, hist = finetune_hypernet(train, base, cfg, rate=r, epochs=cfg.train.epochs_compress)
            result = evaluate(model, test, cfg, name=f"{model_name_for(base)}_r{r}", keep_maps=1)
            reports.append(result.report)
            write_text(tmp / f"rate_{r:02d}" / "report.json", result.report.to_json() + "\n")
            write_text(tmp / f"rate_{r:02d}" / "train_log.csv", log_csv(hist))
            for scene in result.scenes:
                m = scene.maps
                save_scene_panels(tmp / f"rate_{r:02d}", f"scene_{scene.index:03d}", scene.gt, m.mean_probs, m.epistemic, m.aleatoric)
        write_text(tmp / "compression.csv", compression_csv(reports))
    return {"out": str(out), "rates": rates}


def model_name_for(model) -> str:
    return "hyperv2x" if getattr(model, "conditioning", "context") == "context" else "noise"


def cmd_compare(args, cfg: ExperimentConfig) -> dict:
    train = split_tensors(args.data, "train")
    test = split_tensors(args.data, "test")
    tables = set(args.tables)
    out = resolve_out(args.out, cfg, "compare")
    with staged_output(out, cfg) as tmp:
        models_dir = tmp / "models"
        reports_dir = tmp / "reports"

        def keep(name: str, result: EvalResult) -> CalibrationReport:
            write_text(reports_dir / f"{name}.json", result.report.to_json() + "\n")
            return result.report

        if args.pretrained:
            pre = _load_static(args.pretrained, cfg)
        else:
            pre, _ = pretrain_single_agent(train, cfg)
            save_checkpoint(pre, cfg, models_dir / "pretrained.npz", extra={"stage": "pretrain"})

        def obtain(variant: str, given: str | None):
            if given:
                model, _ = load_checkpoint(given, cfg)
                return model
            model, _ = _train_variant(variant, train, pre, cfg, 0.0, 0)
            save_checkpoint(model, cfg, models_dir / f"{variant}.npz", extra={"stage": "train", "variant": variant})
            return model

        hyper = obtain("hyper", args.hyper)
        r_hyper = keep("hyperv2x", evaluate(hyper, test, cfg, name="hyperv2x"))
        if "1" in tables:
            rows = [
                keep("no_fusion", evaluate(pre, test.ego_only(), cfg, name="no_fusion")),
                keep("map_fusion", evaluate(pre, test, cfg, name="map_fusion", probs_fn=lambda b, g: map_fusion_probs(pre, b))),
            ]
            det = obtain("deterministic", args.deterministic_checkpoint)
            rows.append(keep("deterministic", evaluate(det, test, cfg, name="deterministic")))
            rows.append(r_hyper)
            write_text(tmp / "table1.csv", metrics_csv(rows))
        if "3" in tables:
            rows = [r_hyper]
            for rate in args.dropout_rates:
                model, _ = train_static(train, pre, cfg, dropout=rate)
                tag = f"mcdropout_{rate:g}"
                save_checkpoint(model, cfg, models_dir / f"{tag}.npz", extra={"stage": "train", "variant": "mcdropout"})
                rows.append(keep(tag, evaluate(model, test, cfg, k=cfg.train.k_dropout, name=tag)))
            write_text(tmp / "table3.csv", metrics_csv(rows))
        if "4" in tables:
            noise = obtain("noise", args.noise)
            rows = [r_hyper, keep("noise", evaluate(noise, test, cfg, name="noise"))]
            write_text(tmp / "table4.csv", metrics_csv(rows))
    return {"out": str(out), "tables": sorted(tables)}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hyperv2x", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hyperv2x {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults when omitted)")
    common.add_argument("--out", help=f"output directory (relative paths go under ${OUTPUT_ROOT_ENV} when set)")
    common.add_argument("--seed", type=int, help="override train.seed")
    common.add_argument("--workers", type=int, default=1, help="torch intra-op threads")
    common.add_argument("--deterministic", action="store_true", help="single-threaded deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="generate and persist train/test scenes")

    s = sub.add_parser("pretrain", parents=[common], help="single-agent static-decoder pretraining")
    s.add_argument("--data", required=True)

    s = sub.add_parser("train", parents=[common], help="train a model variant from the pretrained checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--pretrained", required=True)
    s.add_argument("--variant", choices=VARIANTS, default="hyper")
    s.add_argument("--dropout-rate", type=float, default=0.0)
    s.add_argument("--rate", type=int, help="compression rate (default: config)")

    s = sub.add_parser("eval", parents=[common], help="calibration report, CSV row and uncertainty maps")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--k", type=int, help="number of samples (default by model type)")
    s.add_argument("--name", help="model name in the report")
    s.add_argument("--ego-only", action="store_true", help="evaluate on the ego observation alone (no fusion)")
    s.add_argument("--map-fusion", action="store_true", help="late fusion of per-agent maps")

    s = sub.add_parser("ablate-compression", parents=[common], help="per-rate fine-tune and evaluation")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--rates", type=int, nargs="+", default=[0, 2, 4, 8, 32])

    s = sub.add_parser("compare", parents=[common], help="fusion, uncertainty-method and conditioning tables")
    s.add_argument("--data", required=True)
    s.add_argument("--pretrained")
    s.add_argument("--hyper")
    s.add_argument("--noise")
    s.add_argument("--deterministic-checkpoint", dest="deterministic_checkpoint")
    s.add_argument("--dropout-rates", type=float, nargs="+", default=list(DROPOUT_RATES))
    s.add_argument("--tables", nargs="+", choices=["1", "3", "4"], default=["1", "3", "4"])
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate-compression": cmd_ablate_compression,
    "compare": cmd_compare,
}


def _fail(command: str | None, exc: BaseException) -> int:
    payload = {"status": "error", "command": command, "error": type(exc).__name__, "message": " ".join(str(exc).split())}
    print(json.dumps(payload), file=sys.stderr)
    return 2 if isinstance(exc, (CLIError, ConfigError)) else 1


def main(argv: Sequence[str] | None = None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        configure_runtime(args.workers, args.deterministic)
        cfg = load_cfg(args)
        result = COMMANDS[command](args, cfg)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001  every failure becomes one JSON line
        return _fail(command, exc)
    print(json.dumps({"status": "ok", "command": command, **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
