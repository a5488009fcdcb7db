"""Model checkpoints as a single ``.npz``: parameter arrays plus a JSON metadata record."""
from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig
from .model import HyperV2X, StaticSegmenter
from .training import SpecMismatchError, check_spec

FORMAT = "hyperv2x.checkpoint/1"


class CheckpointError(RuntimeError):
    pass


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _describe(model) -> dict:
    if isinstance(model, HyperV2X):
        return {"kind": "hyper", "conditioning": model.conditioning, "rate": model.rate}
    if isinstance(model, StaticSegmenter):
        return {"kind": "static", "dropout": model.dropout, "rate": model.rate}
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(
    model,
    cfg: ExperimentConfig,
    path: str | Path,
    extra: dict | None = None,
    rng_state: np.ndarray | None = None,
) -> None:
    """Atomically write parameters, spec/manifest digests, the config echo and the training RNG state."""
    meta = {
        "format": FORMAT,
        "version": __version__,
        "config": cfg.to_dict(),
        "spec_digest": model.spec.digest(),
        "manifest_digest": model.spec.manifest().digest(),
        **_describe(model),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if rng_state is not None:
        arrays["__rng__"] = np.asarray(rng_state, dtype=np.uint8)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def read_meta(path: str | Path) -> dict:
    try:
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    return meta


def load_checkpoint(path: str | Path, cfg: ExperimentConfig | None = None):
    """Rebuild the model stored at ``path``.

    The architecture comes from the config stored in the checkpoint. When
    ``cfg`` is given its decoder spec must match, otherwise ``SpecMismatchError``.
    Returns ``(model, meta)``.
    """
    meta = read_meta(path)
    stored = ExperimentConfig.from_dict(meta["config"])
    if meta["kind"] == "hyper":
        model = HyperV2X(stored.scenario.obs_channels, stored, conditioning=meta["conditioning"], rate=meta["rate"])
    elif meta["kind"] == "static":
        model = StaticSegmenter(stored.scenario.obs_channels, stored, rate=meta["rate"], dropout=meta["dropout"])
    else:
        raise CheckpointError(f"{path}: unknown model kind {meta['kind']!r}")
    if model.spec.digest() != meta["spec_digest"] or model.spec.manifest().digest() != meta["manifest_digest"]:
        raise SpecMismatchError(f"{path}: stored spec digest does not match its own config")
    if cfg is not None:
        check_spec(model, cfg)
    with np.load(path) as z:
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameter mismatch ({exc})") from exc
    model.eval()
    return model, meta


def load_rng_state(path: str | Path) -> torch.Tensor | None:
    """Training-generator state saved with the checkpoint (for ``torch.Generator.set_state``)."""
    with np.load(path) as z:
        return torch.from_numpy(z["__rng__"].copy()) if "__rng__" in z.files else None
