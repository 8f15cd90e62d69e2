"""Silver-standard dataset construction.

Tiling, tissue filtering, centroid <-> heatmap encoding and the incremental
SS dataset build. Dataset directories share one layout for SS and GS data:

    patches/NNNN.png
    labels/NNNN_neg.png, labels/NNNN_pos.png   (16-bit, round(65535 * p))
    centroids/NNNN.csv
    manifest.json
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial import cKDTree
from tqdm import tqdm

from . import storage
from .core import rgb_to_lab
from .errors import DatasetMissingError, InsufficientPatchesError
from .ihcch import IhcchConfig, ihcch_pipeline, subtract_background, tissue_fraction, vector_median_filter
from .models import Centroid, CentroidSet, HeatmapLabel, NucleusClass, RgbImage
from .models.centroid import DEFAULT_MICRONS_PER_PIXEL

logger = logging.getLogger(__name__)

DEFAULT_SIGMA_PX = 2.0
DEFAULT_PEAK_THRESHOLD = 0.5
KERNEL_TRUNCATE_SIGMAS = 3.0

T = TypeVar("T")
Offset = Tuple[int, int]


@dataclass(frozen=True)
class SsDatasetSpec:
    increment: int = 100
    patch_size: int = 256
    tumor_fraction_min: float = 0.8
    seed: int = 0
    sigma_px: float = DEFAULT_SIGMA_PX

    def __post_init__(self) -> None:
        if self.increment <= 0:
            raise ValueError("increment must be > 0")
        if self.patch_size <= 0:
            raise ValueError("patch_size must be > 0")
        if not 0.0 < self.tumor_fraction_min <= 1.0:
            raise ValueError("tumor_fraction_min must lie in (0, 1]")
        if self.sigma_px <= 0:
            raise ValueError("sigma_px must be > 0")


@dataclass(frozen=True)
class LabelledPatch:
    """One training/evaluation sample: patch, target heatmap and its centroids."""

    patch: RgbImage
    label: HeatmapLabel
    centroids: CentroidSet
    source_id: str = ""
    offset: Offset = (0, 0)


# ---------------------------
# Tiling and filtering
# ---------------------------

def tile_image(img: RgbImage, patch: int, stride: Optional[int] = None) -> List[Tuple[RgbImage, Offset]]:
    """Grid of patches with (x, y) offsets; right/bottom remainders are dropped."""
    stride = patch if stride is None else stride
    if patch <= 0 or stride <= 0:
        raise ValueError("patch and stride must be > 0")
    if patch > min(img.width, img.height):
        raise ValueError(f"patch {patch} larger than image {img.width}x{img.height}")
    out: List[Tuple[RgbImage, Offset]] = []
    for y in range(0, img.height - patch + 1, stride):
        for x in range(0, img.width - patch + 1, stride):
            out.append((img.crop(x, y, patch, patch), (x, y)))
    return out


def filter_patches(patches: Sequence[T], tissue_masks: Sequence[np.ndarray], min_fraction: float) -> List[T]:
    """Keep patches whose tissue-pixel fraction is at least min_fraction."""
    if not 0.0 < min_fraction <= 1.0:
        raise ValueError("min_fraction must lie in (0, 1]")
    if len(patches) != len(tissue_masks):
        raise ValueError("patches and tissue masks differ in length")
    kept = [p for p, m in zip(patches, tissue_masks) if tissue_fraction(m) >= min_fraction]
    logger.debug("tissue filter kept %d of %d patches", len(kept), len(patches))
    return kept


def patch_tissue_mask(patch: RgbImage, cfg: IhcchConfig) -> np.ndarray:
    return subtract_background(rgb_to_lab(vector_median_filter(patch, cfg.median_window)), cfg)


# ---------------------------
# Heatmap encoding
# ---------------------------

def centroids_to_heatmap(cs: CentroidSet, sigma_px: float = DEFAULT_SIGMA_PX) -> HeatmapLabel:
    """Gaussian kernel per centroid, truncated at 3 sigma, max-combined.

    Kernels are centred on the centroid's nearest pixel, so that pixel holds
    exactly 1.0.
    """
    if sigma_px <= 0:
        raise ValueError("sigma_px must be > 0")
    h, w = cs.height, cs.width
    channels: Dict[NucleusClass, np.ndarray] = {k: np.zeros((h, w), dtype=np.float64) for k in NucleusClass}
    reach = int(np.ceil(KERNEL_TRUNCATE_SIGMAS * sigma_px))
    cutoff = (KERNEL_TRUNCATE_SIGMAS * sigma_px) ** 2

    for c in cs.centroids:
        r0, c0 = c.pixel
        rs, re = max(0, r0 - reach), min(h, r0 + reach + 1)
        cs_, ce = max(0, c0 - reach), min(w, c0 + reach + 1)
        yy, xx = np.ogrid[rs:re, cs_:ce]
        d2 = (yy - r0) ** 2 + (xx - c0) ** 2
        kernel = np.exp(-d2 / (2.0 * sigma_px ** 2))
        kernel[d2 > cutoff] = 0.0
        view = channels[c.cls][rs:re, cs_:ce]
        np.maximum(view, kernel, out=view)

    return HeatmapLabel(channels[NucleusClass.KI67_NEG], channels[NucleusClass.KI67_POS], sigma_px)


def greedy_peaks(channel: np.ndarray, peak_threshold: float, min_separation_px: float) -> List[Tuple[int, int]]:
    """3x3 local maxima >= threshold, accepted by descending value with
    later maxima within min_separation_px of an accepted one suppressed."""
    peaks = (channel >= peak_threshold) & (
        channel == ndi.maximum_filter(channel, size=3, mode="constant", cval=-np.inf)
    )
    rows, cols = np.nonzero(peaks)
    if rows.size == 0:
        return []
    values = channel[rows, cols]
    order = np.lexsort((cols, rows, -values))
    tree = cKDTree(np.column_stack([rows, cols]).astype(np.float64))
    suppressed = np.zeros(rows.size, dtype=bool)
    accepted: List[Tuple[int, int]] = []
    for i in order:
        if suppressed[i]:
            continue
        accepted.append((int(rows[i]), int(cols[i])))
        for j in tree.query_ball_point([rows[i], cols[i]], r=min_separation_px - 1e-9):
            suppressed[j] = True
    return accepted


def heatmap_to_centroids(
    hm: HeatmapLabel,
    peak_threshold: float = DEFAULT_PEAK_THRESHOLD,
    min_separation_px: Optional[float] = None,
    microns_per_pixel: float = DEFAULT_MICRONS_PER_PIXEL,
) -> CentroidSet:
    if not 0.0 < peak_threshold < 1.0:
        raise ValueError("peak_threshold must lie in (0, 1)")
    sep = KERNEL_TRUNCATE_SIGMAS * hm.sigma_px if min_separation_px is None else float(min_separation_px)
    found: List[Centroid] = []
    for cls in NucleusClass:
        for r, c in greedy_peaks(hm.channel(cls), peak_threshold, sep):
            found.append(Centroid(c + 0.5, r + 0.5, cls))
    return CentroidSet(tuple(found), hm.width, hm.height, microns_per_pixel)


# ---------------------------
# SS dataset build
# ---------------------------

def _screen(args: Tuple[RgbImage, IhcchConfig]) -> float:
    patch, cfg = args
    return tissue_fraction(patch_tissue_mask(patch, cfg))


def _label(args: Tuple[RgbImage, IhcchConfig, float]) -> Tuple[CentroidSet, HeatmapLabel]:
    patch, cfg, sigma = args
    cs = ihcch_pipeline(patch, cfg)
    return cs, centroids_to_heatmap(cs, sigma)


def _ordered_map(fn, items: list, jobs: int, progress: bool, desc: str) -> list:
    """Map preserving input order whatever the worker scheduling."""
    if jobs <= 1:
        return [fn(x) for x in tqdm(items, desc=desc, disable=not progress)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(tqdm(pool.map(fn, items, chunksize=4), total=len(items), desc=desc, disable=not progress))


def qualifying_patches(
    images: Sequence[Tuple[str, RgbImage]],
    cfg: IhcchConfig,
    spec: SsDatasetSpec,
    *,
    jobs: int = 1,
    progress: bool = False,
) -> List[Tuple[str, Offset, RgbImage]]:
    tiles: List[Tuple[str, Offset, RgbImage]] = []
    for image_id, img in images:
        for patch, offset in tile_image(img, spec.patch_size):
            tiles.append((image_id, offset, patch))
    fractions = _ordered_map(_screen, [(t[2], cfg) for t in tiles], jobs, progress, "tissue screen")
    kept = [t for t, f in zip(tiles, fractions) if f >= spec.tumor_fraction_min]
    logger.info("%d of %d tiles hold >= %.0f%% tissue", len(kept), len(tiles), 100 * spec.tumor_fraction_min)
    return kept


def build_ss_dataset(
    images: Sequence[Tuple[str, RgbImage]],
    cfg: IhcchConfig,
    spec: SsDatasetSpec,
    *,
    jobs: int = 1,
    progress: bool = False,
) -> List[LabelledPatch]:
    """Tile, filter, label with IHCCH and encode heatmaps.

    The qualifying patches are put in one seeded order that does not depend on
    the increment, so the dataset for increment k is a prefix of the dataset
    for any larger increment.
    """
    pool = qualifying_patches(images, cfg, spec, jobs=jobs, progress=progress)
    if len(pool) < spec.increment:
        raise InsufficientPatchesError(len(pool), spec.increment)
    order = np.random.default_rng(spec.seed).permutation(len(pool))
    chosen = [pool[i] for i in order[: spec.increment]]
    labelled = _ordered_map(_label, [(p, cfg, spec.sigma_px) for _, _, p in chosen], jobs, progress, "IHCCH labels")
    return [
        LabelledPatch(patch=p, label=hm, centroids=cs, source_id=image_id, offset=offset)
        for (image_id, offset, p), (cs, hm) in zip(chosen, labelled)
    ]


# ---------------------------
# Persistence
# ---------------------------

def save_dataset(out_dir: Path, samples: Sequence[LabelledPatch], manifest: dict) -> List[Path]:
    """Write a dataset directory; returns every file written."""
    out_dir = Path(out_dir)
    written: List[Path] = []
    entries = []
    for i, s in enumerate(samples):
        stem = f"{i:04d}"
        written.append(storage.write_png(out_dir / "patches" / f"{stem}.png", s.patch))
        written.append(storage.write_probability_png(out_dir / "labels" / f"{stem}_neg.png", s.label.neg_channel))
        written.append(storage.write_probability_png(out_dir / "labels" / f"{stem}_pos.png", s.label.pos_channel))
        written.append(storage.write_centroids_csv(out_dir / "centroids" / f"{stem}.csv", s.centroids))
        entries.append({"index": i, "source_id": s.source_id, "offset": list(s.offset)})
    payload = dict(manifest)
    payload["samples"] = entries
    payload["count"] = len(samples)
    if samples:
        payload.setdefault("sigma_px", samples[0].label.sigma_px)
        payload.setdefault("microns_per_pixel", samples[0].centroids.microns_per_pixel)
    written.append(storage.write_json(out_dir / "manifest.json", payload))
    return written


def save_ss_dataset(
    out_dir: Path,
    samples: Sequence[LabelledPatch],
    spec: SsDatasetSpec,
    cfg: IhcchConfig,
    source_ids: Sequence[str],
) -> List[Path]:
    manifest = {
        "kind": "silver",
        "spec": asdict(spec),
        "seed": spec.seed,
        "source_image_ids": list(source_ids),
        "ihcch_config": cfg.to_dict(),
        "ihcch_config_hash": cfg.config_hash(),
    }
    return save_dataset(out_dir, samples, manifest)


def load_dataset(in_dir: Path) -> List[LabelledPatch]:
    in_dir = Path(in_dir)
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetMissingError(f"no dataset manifest at {manifest_path}")
    manifest = storage.read_json(manifest_path)
    sigma = float(manifest.get("sigma_px", DEFAULT_SIGMA_PX))
    mpp = float(manifest.get("microns_per_pixel", DEFAULT_MICRONS_PER_PIXEL))
    out: List[LabelledPatch] = []
    for entry in manifest.get("samples", []):
        stem = f"{int(entry['index']):04d}"
        patch = storage.read_png(in_dir / "patches" / f"{stem}.png")
        neg = storage.read_probability_png(in_dir / "labels" / f"{stem}_neg.png")
        pos = storage.read_probability_png(in_dir / "labels" / f"{stem}_pos.png")
        cs = storage.read_centroids_csv(in_dir / "centroids" / f"{stem}.csv", patch.width, patch.height, mpp)
        out.append(
            LabelledPatch(
                patch=patch,
                label=HeatmapLabel(neg, pos, sigma),
                centroids=cs,
                source_id=str(entry.get("source_id", "")),
                offset=tuple(entry.get("offset", (0, 0))),
            )
        )
    return out


def labelled_from_annotations(
    patch: RgbImage,
    cs: CentroidSet,
    sigma_px: float = DEFAULT_SIGMA_PX,
    source_id: str = "",
    offset: Offset = (0, 0),
) -> LabelledPatch:
    """GS sample: heatmap encoded from expert (or planted) centroids."""
    return LabelledPatch(patch, centroids_to_heatmap(cs, sigma_px), cs, source_id, offset)
