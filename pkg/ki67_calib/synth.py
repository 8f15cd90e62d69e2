"""Synthetic Ki-67 IHC images with planted ground truth.

Nuclei are anti-aliased ellipses in hematoxylin blue (Ki-67-) or DAB brown
(Ki-67+) over a low-chroma tissue tone, on a near-white background. Domain
shift between laboratories is modelled by perturbing stain colours,
background tint, sensor noise and nucleus size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage as ndi
from skimage.color import lab2rgb

from .core import compute_pi
from .errors import PlacementOverflowError
from .models import Centroid, CentroidSet, NucleusClass, PiScore, RgbImage
from .models.centroid import DEFAULT_MICRONS_PER_PIXEL
from .seeding import substream, substream_seed

logger = logging.getLogger(__name__)

Lab = Tuple[float, float, float]

PATCH_SIZE = 256
TMA_SIZE = 2000
DENSITY_AREA_UM2 = 100.0 * 100.0
PLACEMENT_ATTEMPTS_PER_NUCLEUS = 1000
SUPERSAMPLE = 4
ARTIFACT_KINDS = ("blur", "fold", "dust")
TARGET_SEVERITY = 0.6
TARGET_SHIFT_SEED = 7


@dataclass(frozen=True)
class DomainParams:
    blue_stain_lab: Lab = (45.0, 12.0, -38.0)
    brown_stain_lab: Lab = (42.0, 16.0, 38.0)
    tissue_lab: Lab = (80.0, 4.0, 5.0)
    background_rgb: Tuple[int, int, int] = (244, 244, 241)
    nucleus_radius_um: Tuple[float, float] = (3.0, 0.4)  # mean, sd
    cell_density: float = 20.0  # per 100 x 100 um
    overlap_fraction: float = 0.1
    stain_jitter: float = 2.0
    sensor_noise_sigma: float = 2.0
    artifact_rate: float = 0.0
    microns_per_pixel: float = DEFAULT_MICRONS_PER_PIXEL

    def __post_init__(self) -> None:
        if self.nucleus_radius_um[0] <= 0 or self.nucleus_radius_um[1] < 0:
            raise ValueError("nucleus radius mean must be > 0 and sd >= 0")
        if self.cell_density <= 0:
            raise ValueError("cell_density must be > 0")
        if not 0.0 <= self.overlap_fraction <= 0.5:
            raise ValueError("overlap_fraction must lie in [0, 0.5]")
        if self.stain_jitter < 0 or self.sensor_noise_sigma < 0:
            raise ValueError("jitter and noise must be >= 0")
        if not 0.0 <= self.artifact_rate <= 1.0:
            raise ValueError("artifact_rate must lie in [0, 1]")
        for name in ("blue_stain_lab", "brown_stain_lab", "tissue_lab"):
            L, a, b = getattr(self, name)
            if not 0.0 <= L <= 100.0 or abs(a) > 128 or abs(b) > 128:
                raise ValueError(f"{name} outside the L*a*b* gamut")
        if any(not 0 <= v <= 255 for v in self.background_rgb):
            raise ValueError("background_rgb must be 8-bit")

    @property
    def radius_px(self) -> float:
        return self.nucleus_radius_um[0] / self.microns_per_pixel


@dataclass(frozen=True)
class SynthGroundTruth:
    centroids: CentroidSet
    true_pi: Optional[PiScore]
    radii_px: np.ndarray  # (n, 2) semi-axes
    footprint: np.ndarray  # (H, W) int32, nucleus index + 1 where coverage >= 0.5
    tissue_fraction: float
    artifact: Optional[str] = None


SOURCE_PRESET = DomainParams()


def shift_domain(params: DomainParams, severity: float, seed: int) -> DomainParams:
    """Inter-laboratory shift: stain colours move up to 8*severity L*a*b*
    units (b* by at least 60% of that), background tint and tissue tone
    drift, noise grows by up to 4*severity and mean radius by +-20%*severity."""
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    if severity == 0:
        return params
    rng = substream(seed, "shift")
    span = 8.0 * severity

    def move(lab: Lab, limit: float) -> Lab:
        L, a, b = lab
        db = rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.0) * limit
        dL, da = rng.uniform(-0.5, 0.5, size=2) * limit
        return (float(np.clip(L + dL, 0, 100)), float(a + da), float(b + db))

    tint = rng.uniform(-6.0, 6.0, size=3) * severity
    background = tuple(int(np.clip(round(v + t), 0, 255)) for v, t in zip(params.background_rgb, tint))
    mean, sd = params.nucleus_radius_um
    return replace(
        params,
        blue_stain_lab=move(params.blue_stain_lab, span),
        brown_stain_lab=move(params.brown_stain_lab, span),
        tissue_lab=move(params.tissue_lab, 0.5 * span),
        background_rgb=background,
        sensor_noise_sigma=params.sensor_noise_sigma + 4.0 * severity * rng.uniform(0.5, 1.0),
        nucleus_radius_um=(mean * (1.0 + 0.2 * severity * rng.uniform(-1.0, 1.0)), sd),
    )


def target_preset(severity: float = TARGET_SEVERITY) -> DomainParams:
    return shift_domain(SOURCE_PRESET, severity, TARGET_SHIFT_SEED)


def preset(name: str) -> DomainParams:
    key = (name or "").strip().lower()
    if key == "source":
        return SOURCE_PRESET
    if key == "target":
        return target_preset()
    raise ValueError(f"Unknown preset {name!r} (use source or target)")


# ---------------------------
# Rendering
# ---------------------------

def _lab_to_rgb(lab: Sequence[float]) -> np.ndarray:
    return lab2rgb(np.asarray(lab, dtype=np.float64).reshape(1, 1, 3))[0, 0]


def _place(
    rng: np.random.Generator,
    count: int,
    region: np.ndarray,
    radii: np.ndarray,
    overlap: float,
    margin: float,
) -> np.ndarray:
    """Dart throwing: centres inside region, pairwise distance at least
    (r_i + r_j) * (1 - overlap)."""
    h, w = region.shape
    pts = np.empty((count, 2), dtype=np.float64)
    limit = PLACEMENT_ATTEMPTS_PER_NUCLEUS * max(count, 1)
    placed = attempts = 0
    while placed < count:
        if attempts >= limit:
            raise PlacementOverflowError(f"placed {placed} of {count} nuclei in {limit} attempts")
        attempts += 1
        x = rng.uniform(margin, w - margin)
        y = rng.uniform(margin, h - margin)
        if not region[int(y), int(x)]:
            continue
        if placed:
            d = np.hypot(pts[:placed, 0] - x, pts[:placed, 1] - y)
            if np.any(d < (radii[:placed] + radii[placed]) * (1.0 - overlap)):
                continue
        pts[placed] = (x, y)
        placed += 1
    return pts


def _ellipse_coverage(x: float, y: float, a: float, b: float, theta: float, h: int, w: int):
    """(row slice, col slice, coverage) of an anti-aliased ellipse."""
    reach = int(np.ceil(max(a, b))) + 1
    r0, r1 = max(0, int(y) - reach), min(h, int(y) + reach + 1)
    c0, c1 = max(0, int(x) - reach), min(w, int(x) + reach + 1)
    offs = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    ys = (np.arange(r0, r1)[:, None] + offs[None, :]).ravel()
    xs = (np.arange(c0, c1)[:, None] + offs[None, :]).ravel()
    dy, dx = np.meshgrid(ys - y, xs - x, indexing="ij")
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    cov = inside.reshape(r1 - r0, SUPERSAMPLE, c1 - c0, SUPERSAMPLE).mean(axis=(1, 3))
    return slice(r0, r1), slice(c0, c1), cov


def _apply_artifact(canvas: np.ndarray, kind: str, rng: np.random.Generator) -> None:
    h, w = canvas.shape[:2]
    if kind == "blur":
        for ch in range(3):
            canvas[..., ch] = ndi.gaussian_filter(canvas[..., ch], sigma=1.5)
    elif kind == "fold":
        yy, xx = np.mgrid[0:h, 0:w]
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(0.3, 0.7) * (h * abs(np.sin(theta)) + w * abs(np.cos(theta)))
        dist = np.abs(xx * np.cos(theta) + yy * np.sin(theta) - offset)
        band = dist < max(h, w) / 16.0
        canvas[band] *= 0.65
    elif kind == "dust":
        for _ in range(int(rng.integers(3, 9))):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(1.0, 3.0)
            rs, cs, cov = _ellipse_coverage(cx, cy, rad, rad, 0.0, h, w)
            grey = rng.uniform(0.25, 0.45)
            canvas[rs, cs] = canvas[rs, cs] * (1 - cov[..., None]) + grey * cov[..., None]
    else:
        raise ValueError(f"unknown artifact {kind!r}")


def render(
    params: DomainParams,
    target_pi: float,
    seed: int,
    size: int,
    *,
    count: Optional[int] = None,
    region: Optional[np.ndarray] = None,
    artifact: Optional[str] = None,
) -> Tuple[RgbImage, SynthGroundTruth]:
    """Core generator behind gen_patch / gen_tma.

    `region` is the tissue mask (default: whole image); `count` overrides the
    density-derived nucleus count; `artifact` forces one artifact kind,
    otherwise one is drawn with probability params.artifact_rate.
    """
    if not 0.0 <= target_pi <= 100.0:
        raise ValueError("target_pi must lie in [0, 100]")
    rng = np.random.default_rng(seed)
    h = w = int(size)
    region = np.ones((h, w), dtype=bool) if region is None else np.asarray(region, dtype=bool)
    mpp = params.microns_per_pixel
    if count is None:
        area_units = np.count_nonzero(region) * mpp * mpp / DENSITY_AREA_UM2
        count = int(round(params.cell_density * area_units))

    r_mean, r_sd = params.nucleus_radius_um
    radii = np.maximum(rng.normal(r_mean, r_sd, size=count), 0.5 * r_mean) / mpp
    margin = float(np.ceil(r_mean / mpp))
    centres = _place(rng, count, region, radii, params.overlap_fraction, margin)
    ratios = rng.uniform(0.7, 1.0, size=count)
    thetas = rng.uniform(0.0, np.pi, size=count)

    n_pos = int(np.floor(target_pi / 100.0 * count + 0.5))
    classes = np.zeros(count, dtype=bool)
    if n_pos:
        classes[rng.choice(count, size=n_pos, replace=False)] = True

    canvas = np.empty((h, w, 3), dtype=np.float64)
    canvas[...] = np.asarray(params.background_rgb, dtype=np.float64) / 255.0
    canvas[region] = _lab_to_rgb(params.tissue_lab)
    footprint = np.zeros((h, w), dtype=np.int32)

    centroids: List[Centroid] = []
    semi_axes = np.empty((count, 2))
    for i in range(count):
        base = params.brown_stain_lab if classes[i] else params.blue_stain_lab
        colour = _lab_to_rgb(np.asarray(base) + rng.normal(0.0, params.stain_jitter, size=3))
        a, b = radii[i], radii[i] * ratios[i]
        semi_axes[i] = (a, b)
        x, y = centres[i]
        rs, cs, cov = _ellipse_coverage(x, y, a, b, thetas[i], h, w)
        canvas[rs, cs] = canvas[rs, cs] * (1.0 - cov[..., None]) + colour * cov[..., None]
        footprint[rs, cs][cov >= 0.5] = i + 1
        cls = NucleusClass.KI67_POS if classes[i] else NucleusClass.KI67_NEG
        centroids.append(Centroid(float(x), float(y), cls))

    if artifact is None and params.artifact_rate > 0 and rng.random() < params.artifact_rate:
        artifact = ARTIFACT_KINDS[int(rng.integers(len(ARTIFACT_KINDS)))]
    if artifact is not None:
        _apply_artifact(canvas, artifact, rng)

    pixels = canvas * 255.0
    if params.sensor_noise_sigma > 0:
        pixels = pixels + rng.normal(0.0, params.sensor_noise_sigma, size=pixels.shape)
    img = RgbImage(np.clip(np.rint(pixels), 0, 255).astype(np.uint8))

    cs_ = CentroidSet(tuple(centroids), w, h, mpp)
    true_pi = compute_pi(n_pos, count - n_pos) if count else None
    gt = SynthGroundTruth(
        centroids=cs_,
        true_pi=true_pi,
        radii_px=semi_axes,
        footprint=footprint,
        tissue_fraction=float(np.count_nonzero(region)) / region.size,
        artifact=artifact,
    )
    return img, gt


def band_region(size: int, coverage: float) -> np.ndarray:
    """Tissue occupying the left `coverage` fraction of columns."""
    if not 0.0 <= coverage <= 1.0:
        raise ValueError("coverage must lie in [0, 1]")
    region = np.zeros((size, size), dtype=bool)
    region[:, : int(round(coverage * size))] = True
    return region


def core_region(size: int, radius_fraction: float) -> np.ndarray:
    """Circular TMA core centred in the image."""
    yy, xx = np.mgrid[0:size, 0:size]
    c = size / 2.0
    return (xx + 0.5 - c) ** 2 + (yy + 0.5 - c) ** 2 <= (radius_fraction * size) ** 2


def gen_patch(
    params: DomainParams,
    target_pi: float,
    seed: int,
    *,
    size: int = PATCH_SIZE,
    count: Optional[int] = None,
    coverage: float = 1.0,
    artifact: Optional[str] = None,
) -> Tuple[RgbImage, SynthGroundTruth]:
    region = None if coverage >= 1.0 else band_region(size, coverage)
    return render(params, target_pi, seed, size, count=count, region=region, artifact=artifact)


def gen_tma(
    params: DomainParams,
    target_pi: float,
    seed: int,
    *,
    size: int = TMA_SIZE,
    core_radius_fraction: Optional[float] = None,
) -> Tuple[RgbImage, SynthGroundTruth]:
    """Whole-field tissue by default; a circular core when
    core_radius_fraction is given."""
    region = None if core_radius_fraction is None else core_region(size, core_radius_fraction)
    return render(params, target_pi, seed, size, region=region)


# ---------------------------
# Cohorts
# ---------------------------

@dataclass(frozen=True)
class CohortTma:
    tma_id: str
    patient_id: str
    target_pi: float
    seed: int


def plan_cohort(n_patients: int, seed: int, prefix: str = "P") -> List[CohortTma]:
    """Patients with 1 to 3 TMAs each; patient PIs skew low as in clinical
    cohorts, and each TMA varies a few points around its patient."""
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    rng = substream(seed, "cohort", prefix)
    plan: List[CohortTma] = []
    for p in range(n_patients):
        pid = f"{prefix}{p:03d}"
        base = float(np.clip(rng.gamma(1.5, 10.0), 1.0, 90.0))
        for t in range(int(rng.integers(1, 4))):
            pi = float(np.clip(base + rng.normal(0.0, 3.0), 0.0, 100.0))
            plan.append(CohortTma(f"{pid}_T{t}", pid, pi, substream_seed(seed, "tma", pid, t)))
    return plan


def expert_pis(plan: Sequence[CohortTma], planted: Mapping[str, Optional[PiScore]]) -> Dict[str, float]:
    """Reference patient PI: mean of the patient's planted TMA PIs."""
    grouped: Dict[str, List[float]] = {}
    for entry in plan:
        score = planted.get(entry.tma_id)
        if score is None:
            continue
        grouped.setdefault(entry.patient_id, []).append(score.value)
    return {pid: float(np.mean(v)) for pid, v in grouped.items()}
