"""Versioned CSV tables, uncertainty-map PNGs with range sidecars, reliability diagrams."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import CSV_COLUMNS, CSV_SCHEMA, CalibrationReport  # noqa: E402

COMPRESSION_SCHEMA = "hyperv2x.compression/1"
COMPRESSION_COLUMNS = ("rate", "cv_bytes", "iou", "ece", "bs", "nll")
SCHEMAS = {CSV_SCHEMA: CSV_COLUMNS, COMPRESSION_SCHEMA: COMPRESSION_COLUMNS}


class SchemaError(ValueError):
    pass


def metrics_csv(reports: Iterable[CalibrationReport]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {CSV_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def compression_csv(reports: Sequence[CalibrationReport]) -> str:
    """Rows in ascending rate order with the columns rate, CV, IoU, ECE, BS, NLL."""
    buf = io.StringIO()
    buf.write(f"# schema: {COMPRESSION_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPRESSION_COLUMNS)
    for r in sorted(reports, key=lambda r: r.rate):
        w.writerow(r.csv_row()[1:])
    return buf.getvalue()


def read_table(path: str | Path) -> tuple[str, list[dict]]:
    """Parse a table written above and revalidate its invariants."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# schema: "):
        raise SchemaError(f"{path}: missing schema line")
    schema = lines[0][len("# schema: "):].strip()
    if schema not in SCHEMAS:
        raise SchemaError(f"{path}: unknown schema {schema!r}")
    reader = csv.DictReader(lines[1:])
    if tuple(reader.fieldnames or ()) != SCHEMAS[schema]:
        raise SchemaError(f"{path}: columns {reader.fieldnames} do not match {schema}")
    rows = []
    for raw in reader:
        row = {k: (v if k == "model" else float(v)) for k, v in raw.items()}
        for key in ("rate", "cv_bytes"):
            row[key] = int(row[key])
        rows.append(row)
    validate_rows(schema, rows)
    return schema, rows


def validate_rows(schema: str, rows: list[dict]) -> None:
    for row in rows:
        if not 0.0 <= row["ece"] <= 1.0:
            raise SchemaError(f"ECE {row['ece']} outside [0, 1]")
        if not 0.0 <= row["iou"] <= 1.0:
            raise SchemaError(f"IoU {row['iou']} outside [0, 1]")
        if row["bs"] < 0 or row["nll"] < 0:
            raise SchemaError("Brier score and NLL must be non-negative")
    if schema == COMPRESSION_SCHEMA:
        rates = [r["rate"] for r in rows]
        if rates != sorted(rates) or len(set(rates)) != len(rates):
            raise SchemaError(f"rates {rates} are not strictly ascending")
        cvs = [r["cv_bytes"] for r in rows]
        # a higher compression rate never sends more bytes
        if any(b > a for a, b in zip(cvs, cvs[1:])):
            raise SchemaError(f"communicated volume {cvs} increases with rate")


def save_map_png(path: Path, image: np.ndarray, cmap: str, vmin: float | None = None, vmax: float | None = None) -> dict:
    """Write ``image`` as a PNG and its value range to ``<path>.json``."""
    image = np.asarray(image, dtype=np.float64)
    lo = float(image.min()) if vmin is None else float(vmin)
    hi = float(image.max()) if vmax is None else float(vmax)
    if hi <= lo:
        hi = lo + 1e-12
    path.parent.mkdir(parents=True, exist_ok=True)
    # row 0 is the lowest y, so flip for a north-up image
    plt.imsave(path, image[::-1], cmap=cmap, vmin=lo, vmax=hi, metadata={"Software": None})
    meta = {"file": path.name, "min": lo, "max": hi, "data_min": float(image.min()), "data_max": float(image.max()), "cmap": cmap}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
    return meta


def save_scene_panels(out_dir: Path, stem: str, gt: np.ndarray, mean_probs: np.ndarray, epistemic: np.ndarray, aleatoric: np.ndarray) -> None:
    """Ground truth, prediction, epistemic and aleatoric maps, separately and as one figure."""
    n_classes = mean_probs.shape[0]
    pred = mean_probs.argmax(axis=0)
    save_map_png(out_dir / f"{stem}_gt.png", gt, "viridis", 0, n_classes - 1)
    save_map_png(out_dir / f"{stem}_pred.png", pred, "viridis", 0, n_classes - 1)
    save_map_png(out_dir / f"{stem}_epistemic.png", epistemic, "magma")
    save_map_png(out_dir / f"{stem}_aleatoric.png", aleatoric, "magma", 0.0, float(np.log(n_classes)))
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
    panels = [
        ("ground truth", gt, "viridis", 0, n_classes - 1),
        ("prediction", pred, "viridis", 0, n_classes - 1),
        ("epistemic", epistemic, "magma", None, None),
        ("aleatoric", aleatoric, "magma", 0.0, float(np.log(n_classes))),
    ]
    for ax, (title, img, cmap, lo, hi) in zip(axes, panels):
        im = ax.imshow(img, origin="lower", cmap=cmap, vmin=lo, vmax=hi)
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_dir / f"{stem}_panels.png", dpi=80, metadata={"Software": None})
    plt.close(fig)


def save_reliability_diagram(path: Path, report: CalibrationReport) -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    centers = [(b.lo + b.hi) / 2 for b in report.bins]
    accs = [b.accuracy if b.count else 0.0 for b in report.bins]
    width = 1.0 / report.n_bins
    ax.bar(centers, accs, width=width, edgecolor="black", label="accuracy")
    ax.plot([0, 1], [0, 1], "--", color="gray", label="perfect calibration")
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.set_title(f"{report.model}  ECE={report.ece:.4f}")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)
