"""Plot-ready tables and figures from finished experiment runs."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from . import db, storage  # noqa: E402
from .detector import load_checkpoint, predict_centroids  # noqa: E402
from .errors import DatasetMissingError, MissingDatasetError  # noqa: E402
from .experiment import load_target_cohort  # noqa: E402
from .labels import DEFAULT_PEAK_THRESHOLD, DEFAULT_SIGMA_PX  # noqa: E402
from .metrics import INTERVAL_BINS, bin_label, paired_one_sided  # noqa: E402

logger = logging.getLogger(__name__)

F1_COLUMNS = ("cell", "image_id", "f1")
BIN_COLUMNS = ("cell", "interval", "patients", "mean_delta_pi")
TSNE_COLUMNS = ("cell", "id", "domain", "x", "y")
DOMAIN_COLOURS = {"source": "#1f77b4", "target": "#d62728"}


def _cell_dirs(run_dir: Path) -> Dict[str, Path]:
    out: Dict[str, Path] = {}
    for parent in ("cells", "baseline"):
        base = run_dir / parent
        if base.is_dir():
            for d in sorted(base.iterdir()):
                if (d / "report.json").is_file():
                    out[d.name] = d
    return out


def load_run(run_dir: Path) -> dict:
    run_dir = Path(run_dir).expanduser()
    path = run_dir / "report.json"
    if not path.is_file():
        raise DatasetMissingError(f"no report.json in {run_dir}")
    return storage.read_json(path)


# ---------------------------
# Tables
# ---------------------------

def f1_distribution(run_dir: Path) -> pd.DataFrame:
    """Fold-averaged target F1 per annotated image and cell."""
    rows = []
    for cell, d in _cell_dirs(Path(run_dir)).items():
        for image_id, value in storage.read_json(d / "report.json").get("image_f1", {}).items():
            rows.append({"cell": cell, "image_id": image_id, "f1": value})
    return pd.DataFrame(rows, columns=list(F1_COLUMNS))


def delta_pi_bins(run_dir: Path) -> pd.DataFrame:
    rows = []
    for cell, d in _cell_dirs(Path(run_dir)).items():
        bins = storage.read_json(d / "report.json").get("bins", {})
        for lo, hi in INTERVAL_BINS:
            label = bin_label(lo, hi)
            entry = bins.get(label, {"patients": 0, "mean_delta_pi": float("nan")})
            rows.append({"cell": cell, "interval": label, **entry})
    return pd.DataFrame(rows, columns=list(BIN_COLUMNS))


def tsne_coordinates(run_dir: Path) -> pd.DataFrame:
    frames = []
    for cell, d in _cell_dirs(Path(run_dir)).items():
        path = d / "embedding.csv"
        if path.is_file():
            frame = storage.read_table(path, dtype={"id": str})
            frame.insert(0, "cell", cell)
            frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=list(TSNE_COLUMNS))
    return pd.concat(frames, ignore_index=True)[list(TSNE_COLUMNS)]


# ---------------------------
# Figures
# ---------------------------

def plot_f1(frame: pd.DataFrame, path: Path) -> Path:
    cells = sorted(frame["cell"].unique())
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(cells)), 4.0))
    ax.boxplot([frame.loc[frame["cell"] == c, "f1"].to_numpy() for c in cells])
    ax.set_xticks(range(1, len(cells) + 1))
    ax.set_xticklabels(cells, rotation=30, ha="right")
    ax.set_ylabel("F1 (target, annotated TMAs)")
    ax.set_ylim(0.0, 1.0)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_delta_pi(frame: pd.DataFrame, path: Path) -> Path:
    cells = sorted(frame["cell"].unique())
    labels = [bin_label(lo, hi) for lo, hi in INTERVAL_BINS]
    width = 0.8 / max(1, len(cells))
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for i, cell in enumerate(cells):
        sub = frame[frame["cell"] == cell].set_index("interval").reindex(labels)
        ax.bar(np.arange(len(labels)) + i * width, sub["mean_delta_pi"].to_numpy(dtype=float), width, label=cell)
    ax.set_xticks(np.arange(len(labels)) + 0.4 - width / 2)
    ax.set_xticklabels(labels)
    ax.set_xlabel("expert PI interval")
    ax.set_ylabel("mean delta PI")
    ax.legend(fontsize="small")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_tsne(frame: pd.DataFrame, cell: str, path: Path) -> Path:
    sub = frame[frame["cell"] == cell]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for domain, group in sub.groupby("domain"):
        ax.scatter(group["x"], group["y"], s=10, c=DOMAIN_COLOURS.get(domain, "grey"), label=domain)
    ax.set_title(cell)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.legend(fontsize="small")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_report(run_dir: Path, out_dir: Optional[Path] = None, *, plots: bool = True) -> List[Path]:
    """Write f1_distribution.csv, delta_pi_bins.csv, tsne.csv and, with
    `plots`, the matching PNG figures. Returns the files written."""
    run_dir = Path(run_dir).expanduser()
    load_run(run_dir)
    out_dir = Path(out_dir).expanduser() if out_dir is not None else run_dir / "figures"
    out_dir.mkdir(parents=True, exist_ok=True)

    f1 = f1_distribution(run_dir)
    bins = delta_pi_bins(run_dir)
    coords = tsne_coordinates(run_dir)
    written = []
    for name, frame in (("f1_distribution.csv", f1), ("delta_pi_bins.csv", bins), ("tsne.csv", coords)):
        frame.to_csv(out_dir / name, index=False)
        written.append(out_dir / name)

    if plots:
        if not f1.empty:
            written.append(plot_f1(f1, out_dir / "f1_distribution.png"))
        if not bins.empty:
            written.append(plot_delta_pi(bins, out_dir / "delta_pi_bins.png"))
        for cell in sorted(coords["cell"].unique()):
            safe = cell.replace("+", "_plus_").replace("@", "_")
            written.append(plot_tsne(coords, cell, out_dir / f"tsne_{safe}.png"))
    logger.info("wrote %d report files to %s", len(written), out_dir)
    return written


# ---------------------------
# Across runs
# ---------------------------

def resolve_run_id(ref: str) -> str:
    """A registered run id, or a run directory whose manifest names one."""
    path = Path(ref).expanduser()
    if (path / "manifest.json").is_file():
        return str(storage.read_json(path / "manifest.json")["run_id"])
    return str(ref)


def registered_metrics(run_id: str) -> Dict[Tuple[str, str], float]:
    """(cell, metric) -> value for one registered run; NULL reads back as NaN."""
    db.create_tables()
    if db.get_run(run_id) is None:
        raise MissingDatasetError(f"run {run_id!r} is not in the registry")
    return {
        (m["cell_id"], m["metric"]): float("nan") if m["value"] is None else float(m["value"])
        for m in db.list_metrics(run_id)
    }


def compare_runs(runs: Sequence[str], lower: str, higher: str, metric: str = "delta_pi") -> dict:
    """Paired one-sided test over registered runs (typically one per root
    seed): H1 is mean(metric[lower]) < mean(metric[higher])."""
    ids: List[str] = []
    a: List[float] = []
    b: List[float] = []
    for ref in runs:
        run_id = resolve_run_id(ref)
        values = registered_metrics(run_id)
        for cell, column in ((lower, a), (higher, b)):
            if (cell, metric) not in values:
                raise MissingDatasetError(f"run {run_id}: no {metric} recorded for cell {cell!r}")
            column.append(values[(cell, metric)])
        ids.append(run_id)
    t, p = paired_one_sided(a, b)
    return {
        "metric": metric, "lower": lower, "higher": higher, "n": len(a), "t": t, "p": p,
        "runs": ids, "values": list(zip(a, b)),
    }


def runs_table() -> pd.DataFrame:
    """Registered runs with their cell metrics, one row per (run, cell, metric)."""
    db.create_tables()
    rows = []
    for run in db.list_runs():
        for m in db.list_metrics(run["run_id"]):
            rows.append({**{k: run[k] for k in ("run_id", "config_hash", "root_seed", "status")}, **m})
    return pd.DataFrame(rows, columns=["run_id", "config_hash", "root_seed", "status", "cell_id", "metric", "value"])


# ---------------------------
# Overlays
# ---------------------------

def render_overlays(
    run_dir: Path,
    out_dir: Path,
    *,
    images: int = 1,
    peak_threshold: float = DEFAULT_PEAK_THRESHOLD,
    sigma_px: float = DEFAULT_SIGMA_PX,
) -> List[Path]:
    """Centroid overlays of each cell's fold-0 model on the first annotated
    target TMAs of the run's cohort."""
    run_dir = Path(run_dir).expanduser()
    manifest = storage.read_json(run_dir / "manifest.json")
    target = manifest.get("datasets", {}).get("target")
    if not target:
        raise DatasetMissingError(f"{run_dir}/manifest.json names no target cohort")
    cohort = load_target_cohort(Path(target["path"]))
    tmas = [t for t in cohort.of_role("test") if t.annotation_path is not None][:images]
    written: List[Path] = []
    for cell, d in _cell_dirs(run_dir).items():
        ckpt = d / "fold0.ckpt"
        if not ckpt.is_file():
            continue
        model, _ = load_checkpoint(ckpt)
        safe = cell.replace("+", "_plus_").replace("@", "_")
        for tma in tmas:
            img = storage.read_png(tma.image_path)
            cs = predict_centroids(model, img, peak_threshold=peak_threshold, sigma_px=sigma_px)
            written.append(storage.write_png(out_dir / f"overlay_{safe}_{tma.tma_id}.png", storage.draw_overlay(img, cs)))
    return written
