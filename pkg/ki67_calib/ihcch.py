"""Unsupervised Ki-67 nuclei detection (immunohistochemical colour histogram).

Stages, each usable on its own:

1. vector median filtering of the RGB patch
2. background subtraction on L* and chroma
3. blue/brown separation at a valley of the b* histogram
4. adaptive-radius nuclei detection on the distance transform of each mask

The output is the silver-standard label source for target-domain patches.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage as ndi
from scipy.signal import find_peaks

from .core import rgb_to_lab
from .errors import EmptyTissueError
from .models import Centroid, CentroidSet, LabImage, NucleusClass, RgbImage
from .models.centroid import DEFAULT_MICRONS_PER_PIXEL

logger = logging.getLogger(__name__)

MIN_TISSUE_PIXELS = 64
HISTOGRAM_BINS = 256
MIN_PEAK_GAP_BINS = 5
# element budget for one chunk of the pairwise window distance tensor
_VMF_CHUNK_ELEMENTS = 8_000_000


class BSplit(str, enum.Enum):
    HISTOGRAM_VALLEY = "valley"
    FIXED_ZERO = "zero"


@dataclass(frozen=True)
class IhcchConfig:
    median_window: int = 3
    background_l_threshold: float = 85.0
    background_chroma_max: float = 10.0
    stain_chroma_min: float = 15.0
    b_split: BSplit = BSplit.HISTOGRAM_VALLEY
    min_nucleus_radius_px: float = 2.5
    max_nucleus_radius_px: float = 12.0
    microns_per_pixel: float = DEFAULT_MICRONS_PER_PIXEL

    def __post_init__(self) -> None:
        if self.median_window < 3 or self.median_window % 2 == 0:
            raise ValueError("median_window must be odd and >= 3")
        if not 0 < self.min_nucleus_radius_px < self.max_nucleus_radius_px:
            raise ValueError("need 0 < min_nucleus_radius_px < max_nucleus_radius_px")
        if self.microns_per_pixel <= 0:
            raise ValueError("microns_per_pixel must be > 0")
        object.__setattr__(self, "b_split", BSplit(self.b_split))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["b_split"] = self.b_split.value
        return d

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True)
class StainMasks:
    blue_mask: np.ndarray
    brown_mask: np.ndarray
    b_threshold_used: float
    microns_per_pixel: float = DEFAULT_MICRONS_PER_PIXEL

    def __post_init__(self) -> None:
        if self.blue_mask.shape != self.brown_mask.shape:
            raise ValueError("stain masks differ in shape")
        if np.any(self.blue_mask & self.brown_mask):
            raise ValueError("blue and brown masks overlap")


# ---------------------------
# Filtering / background
# ---------------------------

def vector_median_filter(img: RgbImage, window: int = 3) -> RgbImage:
    """True vector median: each pixel becomes the window member with the
    smallest summed Euclidean RGB distance to the other members.

    Borders are edge-replicated. Ties resolve to the first member in
    row-major window order, so output colours always come from the input.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    half = window // 2
    h, w = img.height, img.width
    k2 = window * window
    padded = np.pad(img.data.astype(np.float64), ((half, half), (half, half), (0, 0)), mode="edge")
    out = np.empty_like(img.data)
    rows_per_chunk = max(1, _VMF_CHUNK_ELEMENTS // (w * k2 * k2))

    for r0 in range(0, h, rows_per_chunk):
        r1 = min(h, r0 + rows_per_chunk)
        block = padded[r0:r1 + 2 * half]
        win = sliding_window_view(block, (window, window), axis=(0, 1))  # (rows, w, 3, k, k)
        win = win.transpose(0, 1, 3, 4, 2).reshape(r1 - r0, w, k2, 3)
        sq = np.einsum("...ic,...ic->...i", win, win)
        gram = np.einsum("...ic,...jc->...ij", win, win)
        d2 = sq[..., :, None] + sq[..., None, :] - 2.0 * gram
        dist = np.sqrt(np.maximum(d2, 0.0)).sum(axis=-1)
        idx = dist.argmin(axis=-1)
        chosen = np.take_along_axis(win, idx[..., None, None], axis=2)[:, :, 0, :]
        out[r0:r1] = np.rint(chosen).astype(np.uint8)
    return RgbImage(out)


def subtract_background(lab: LabImage, cfg: IhcchConfig) -> np.ndarray:
    """Tissue mask: True everywhere except bright, achromatic background."""
    background = (lab.L > cfg.background_l_threshold) & (lab.chroma < cfg.background_chroma_max)
    return ~background


def tissue_fraction(tissue: np.ndarray) -> float:
    return float(np.count_nonzero(tissue)) / float(tissue.size)


# ---------------------------
# Colour separation
# ---------------------------

def histogram_valley(values: np.ndarray) -> Tuple[float, bool]:
    """Threshold at the least-populated b* bin between the two dominant peaks.

    Returns (threshold, found). When two peaks at least MIN_PEAK_GAP_BINS apart
    do not exist, returns (0.0, False). Ties among minimum bins go to the bin
    closest to b* = 0.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 0.0, False
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-9:
        return 0.0, False
    counts, edges = np.histogram(values, bins=HISTOGRAM_BINS, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])

    smooth = ndi.gaussian_filter1d(counts.astype(np.float64), sigma=2.0, mode="constant")
    padded = np.concatenate([[0.0], smooth, [0.0]])
    peaks, _ = find_peaks(padded, distance=MIN_PEAK_GAP_BINS, prominence=0.05 * smooth.max())
    peaks = peaks - 1
    if len(peaks) < 2:
        return 0.0, False

    order = np.argsort(-smooth[peaks], kind="stable")
    p1, p2 = sorted(int(p) for p in peaks[order[:2]])
    if p2 - p1 < MIN_PEAK_GAP_BINS:
        return 0.0, False

    segment = counts[p1:p2 + 1]
    candidates = np.flatnonzero(segment == segment.min()) + p1
    best = candidates[np.argmin(np.abs(centers[candidates]))]
    return float(centers[best]), True


def separate_stains(lab: LabImage, tissue: np.ndarray, cfg: IhcchConfig) -> StainMasks:
    """Split chroma-bearing tissue pixels into hematoxylin (blue) and DAB (brown).

    Tissue pixels with chroma below cfg.stain_chroma_min are left in neither
    mask (the achromatic residue: stroma, dust).
    """
    tissue = np.asarray(tissue, dtype=bool)
    if tissue.shape != lab.L.shape:
        raise ValueError("tissue mask does not match image")
    n_tissue = int(np.count_nonzero(tissue))
    if n_tissue < MIN_TISSUE_PIXELS:
        raise EmptyTissueError(f"{n_tissue} tissue pixels (< {MIN_TISSUE_PIXELS})")

    stained = tissue & (lab.chroma >= cfg.stain_chroma_min)
    threshold = 0.0
    if cfg.b_split == BSplit.HISTOGRAM_VALLEY:
        threshold, found = histogram_valley(lab.b[stained])
        if not found:
            logger.debug("b* histogram has no second peak; splitting at b*=0")

    brown = stained & (lab.b > threshold)
    blue = stained & ~brown
    return StainMasks(blue_mask=blue, brown_mask=brown, b_threshold_used=threshold,
                      microns_per_pixel=cfg.microns_per_pixel)


# ---------------------------
# Nuclei detection
# ---------------------------

def adaptive_radius_maxima(mask: np.ndarray, min_radius: float, max_radius: float) -> List[Tuple[int, int]]:
    """(row, col) seeds: distance-transform maxima of each component.

    Components smaller than pi * min_radius**2 are debris and skipped. Maxima
    are accepted in descending distance; a later maximum closer to an
    accepted one than that one's own distance value (capped at max_radius)
    is suppressed, so touching nuclei split while one nucleus yields one seed.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndi.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= np.pi * min_radius ** 2
    keep[0] = False
    kept = keep[labels]
    if not kept.any():
        return []

    dist = ndi.distance_transform_edt(kept)
    peaks = kept & (dist >= min_radius) & (dist == ndi.maximum_filter(dist, size=3))
    rows, cols = np.nonzero(peaks)
    if rows.size == 0:
        return []
    values = dist[rows, cols]
    comp = labels[rows, cols]

    seeds: List[Tuple[int, int]] = []
    order = np.lexsort((cols, rows, -values, comp))
    start = 0
    while start < len(order):
        stop = start
        while stop < len(order) and comp[order[stop]] == comp[order[start]]:
            stop += 1
        acc_r: List[float] = []
        acc_c: List[float] = []
        acc_rad: List[float] = []
        for i in order[start:stop]:
            if acc_r:
                d = np.hypot(np.asarray(acc_r) - rows[i], np.asarray(acc_c) - cols[i])
                if np.any(d < np.asarray(acc_rad)):
                    continue
            acc_r.append(float(rows[i]))
            acc_c.append(float(cols[i]))
            acc_rad.append(min(float(values[i]), max_radius))
            seeds.append((int(rows[i]), int(cols[i])))
        start = stop
    return seeds


def detect_nuclei(masks: StainMasks, cfg: IhcchConfig) -> CentroidSet:
    h, w = masks.blue_mask.shape
    found: List[Centroid] = []
    for cls, mask in ((NucleusClass.KI67_NEG, masks.blue_mask), (NucleusClass.KI67_POS, masks.brown_mask)):
        for r, c in adaptive_radius_maxima(mask, cfg.min_nucleus_radius_px, cfg.max_nucleus_radius_px):
            found.append(Centroid(c + 0.5, r + 0.5, cls))
    return CentroidSet(tuple(found), w, h, masks.microns_per_pixel)


def ihcch_pipeline(img: RgbImage, cfg: IhcchConfig = IhcchConfig()) -> CentroidSet:
    """Filter, remove background, separate stains, detect nuclei."""
    filtered = vector_median_filter(img, cfg.median_window)
    lab = rgb_to_lab(filtered)
    tissue = subtract_background(lab, cfg)
    masks = separate_stains(lab, tissue, cfg)
    cs = detect_nuclei(masks, cfg)
    counts = cs.counts()
    logger.debug(
        "IHCCH: threshold b*=%.2f, %d neg / %d pos nuclei",
        masks.b_threshold_used, counts[NucleusClass.KI67_NEG], counts[NucleusClass.KI67_POS],
    )
    return cs
