"""Evaluation protocol.

All functions in this module are **pure**:
- centroid matching within a micron radius, per class, and F1
- PI from detections, patient-level aggregation and clinical interval bins
- one-way ANOVA (and the paired one-sided variant built on it)
- cross-fold reproducibility
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import betainc

from .core import compute_pi, delta_pi
from .errors import (
    CalibrationMismatchError,
    DegenerateGroupsError,
    NoCellsError,
    TooFewSamplesError,
    UnknownPatientError,
)
from .models import CentroidSet, NucleusClass, PiScore
from .models.centroid import DEFAULT_MICRONS_PER_PIXEL

logger = logging.getLogger(__name__)

INTERVAL_BINS: Tuple[Tuple[float, float], ...] = ((0, 10), (10, 20), (20, 30), (30, 40), (40, 100))


@dataclass(frozen=True)
class MatchConfig:
    radius_um: float = 6.0
    microns_per_pixel: float = DEFAULT_MICRONS_PER_PIXEL

    def __post_init__(self) -> None:
        if self.radius_um <= 0 or self.microns_per_pixel <= 0:
            raise ValueError("radius_um and microns_per_pixel must be > 0")


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    matches: Tuple[Tuple[int, int, float], ...] = ()  # (pred index, gt index, distance um)

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.matches + other.matches)


# ---------------------------
# Matching / F1
# ---------------------------

def _optimal_pairs(dist: np.ndarray, radius: float) -> List[Tuple[int, int]]:
    """Maximum-cardinality matching under dist < radius, minimum total
    distance among those.

    Valid pairs cost d - M with M = radius * (min(n, m) + 1), invalid pairs
    cost 0, so one more valid pair always beats any saving in distance.
    """
    n, m = dist.shape
    if n == 0 or m == 0:
        return []
    valid = dist < radius
    big = radius * (min(n, m) + 1)
    cost = np.where(valid, dist - big, 0.0)
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if valid[r, c]]


def match_centroids(pred: CentroidSet, gt: CentroidSet, cfg: MatchConfig = MatchConfig()) -> MatchResult:
    """Per-class one-to-one matching, results summed over classes.

    Unmatched predictions (duplicates of one cell included) are FP,
    unmatched ground truths FN.
    """
    return sum(match_by_class(pred, gt, cfg).values(), MatchResult(0, 0, 0))


def match_by_class(pred: CentroidSet, gt: CentroidSet, cfg: MatchConfig = MatchConfig()) -> Dict[NucleusClass, MatchResult]:
    for name, cs in (("prediction", pred), ("ground truth", gt)):
        if not np.isclose(cs.microns_per_pixel, cfg.microns_per_pixel, rtol=0.0, atol=1e-12):
            raise CalibrationMismatchError(
                f"{name} at {cs.microns_per_pixel} um/px, matching at {cfg.microns_per_pixel} um/px"
            )
    out: Dict[NucleusClass, MatchResult] = {}
    for cls in NucleusClass:
        p_idx = [i for i, c in enumerate(pred.centroids) if c.cls == cls]
        g_idx = [i for i, c in enumerate(gt.centroids) if c.cls == cls]
        p_pts = np.array([[pred.centroids[i].x, pred.centroids[i].y] for i in p_idx]).reshape(-1, 2)
        g_pts = np.array([[gt.centroids[i].x, gt.centroids[i].y] for i in g_idx]).reshape(-1, 2)
        dist = cdist(p_pts, g_pts) * cfg.microns_per_pixel if p_idx and g_idx else np.zeros((len(p_idx), len(g_idx)))
        pairs = _optimal_pairs(dist, cfg.radius_um)
        matches = tuple((p_idx[r], g_idx[c], float(dist[r, c])) for r, c in pairs)
        tp = len(matches)
        out[cls] = MatchResult(tp=tp, fp=len(p_idx) - tp, fn=len(g_idx) - tp, matches=matches)
    return out


def f1(mr: MatchResult) -> Tuple[float, float, float]:
    """(precision, recall, F1); F1 = 0 when precision + recall = 0."""
    if mr.tp + mr.fp + mr.fn == 0:
        raise NoCellsError("no predictions and no ground truth")
    precision = mr.tp / (mr.tp + mr.fp) if mr.tp + mr.fp else 0.0
    recall = mr.tp / (mr.tp + mr.fn) if mr.tp + mr.fn else 0.0
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class ImageScore:
    image_id: str
    f1_neg: Optional[float]
    f1_pos: Optional[float]
    f1_pooled: float
    precision: float
    recall: float


def score_image(image_id: str, pred: CentroidSet, gt: CentroidSet, cfg: MatchConfig = MatchConfig()) -> ImageScore:
    """Per-class and pooled F1 for one image; a class with no cells on
    either side scores None."""
    per = match_by_class(pred, gt, cfg)
    per_f1: Dict[NucleusClass, Optional[float]] = {}
    for cls, mr in per.items():
        try:
            per_f1[cls] = f1(mr)[2]
        except NoCellsError:
            per_f1[cls] = None
    pooled = sum(per.values(), MatchResult(0, 0, 0))
    p, r, f = f1(pooled)
    return ImageScore(image_id, per_f1[NucleusClass.KI67_NEG], per_f1[NucleusClass.KI67_POS], f, p, r)


def score_images(
    pairs: Iterable[Tuple[str, CentroidSet, CentroidSet]], cfg: MatchConfig = MatchConfig()
) -> List[ImageScore]:
    """Score (image_id, pred, gt) triples; images with no cells at all are
    logged and left out."""
    scores: List[ImageScore] = []
    for image_id, pred, gt in pairs:
        try:
            scores.append(score_image(image_id, pred, gt, cfg))
        except NoCellsError:
            logger.warning("image %s has no cells; excluded from F1", image_id)
    return scores


# ---------------------------
# PI / patients
# ---------------------------

def pi_from_detections(cs: CentroidSet) -> PiScore:
    counts = cs.counts()
    return compute_pi(counts[NucleusClass.KI67_POS], counts[NucleusClass.KI67_NEG])


def interval_bin(pi_value: float) -> str:
    """Label of the clinical interval holding pi_value; the last bin is closed."""
    for lo, hi in INTERVAL_BINS:
        if lo <= pi_value < hi or (hi == 100 and pi_value == 100):
            return bin_label(lo, hi)
    raise ValueError(f"PI {pi_value} outside [0, 100]")


def bin_label(lo: float, hi: float) -> str:
    close = "]" if hi == 100 else ")"
    return f"[{lo:g},{hi:g}{close}"


@dataclass(frozen=True)
class PatientRow:
    patient_id: str
    pi_actual: float
    pi_predicted: float
    tma_count: int

    @property
    def delta_pi(self) -> float:
        return delta_pi(self.pi_actual, self.pi_predicted)

    @property
    def interval(self) -> str:
        return interval_bin(self.pi_actual)


@dataclass(frozen=True)
class PatientReport:
    rows: Tuple[PatientRow, ...]

    @property
    def mean_delta_pi(self) -> float:
        return float(np.mean([r.delta_pi for r in self.rows])) if self.rows else float("nan")

    @property
    def pi_accuracy(self) -> float:
        return 100.0 - self.mean_delta_pi

    def bins(self) -> Dict[str, Dict[str, float]]:
        """Per interval: patient count and mean delta PI (NaN when empty)."""
        grouped: Dict[str, List[float]] = defaultdict(list)
        for r in self.rows:
            grouped[r.interval].append(r.delta_pi)
        out: Dict[str, Dict[str, float]] = {}
        for lo, hi in INTERVAL_BINS:
            label = bin_label(lo, hi)
            vals = grouped.get(label, [])
            out[label] = {"patients": len(vals), "mean_delta_pi": float(np.mean(vals)) if vals else float("nan")}
        return out


def patient_report(
    tma_scores: Mapping[str, Union[PiScore, float]],
    patient_of: Mapping[str, str],
    expert_pi: Mapping[str, float],
) -> PatientReport:
    """Patient PI = unweighted mean of that patient's TMA PIs."""
    grouped: Dict[str, List[float]] = defaultdict(list)
    for tma_id, score in tma_scores.items():
        if tma_id not in patient_of:
            raise UnknownPatientError(f"TMA {tma_id} has no patient")
        patient = patient_of[tma_id]
        if patient not in expert_pi:
            raise UnknownPatientError(f"patient {patient} has no expert PI")
        grouped[patient].append(score.value if isinstance(score, PiScore) else float(score))
    rows = tuple(
        PatientRow(pid, float(expert_pi[pid]), float(np.mean(vals)), len(vals))
        for pid, vals in sorted(grouped.items())
    )
    return PatientReport(rows)


# ---------------------------
# Statistics
# ---------------------------

def f_sf(f_value: float, df1: float, df2: float) -> float:
    """Upper tail of the F(df1, df2) distribution via the regularized
    incomplete beta function."""
    if f_value <= 0:
        return 1.0
    return float(betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f_value)))


def one_way_anova(groups: Sequence[Sequence[float]]) -> Tuple[float, float]:
    """(F, p) for an ordinary one-way ANOVA."""
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(arrays) < 2 or any(a.size < 2 for a in arrays):
        raise TooFewSamplesError("ANOVA needs >= 2 groups of >= 2 samples")
    grand = np.concatenate(arrays).mean()
    ss_between = sum(a.size * (a.mean() - grand) ** 2 for a in arrays)
    ss_within = sum(((a - a.mean()) ** 2).sum() for a in arrays)
    df_between = len(arrays) - 1
    df_within = sum(a.size for a in arrays) - len(arrays)
    if ss_within <= 0:
        raise DegenerateGroupsError("zero variance within every group")
    f_value = (ss_between / df_between) / (ss_within / df_within)
    return float(f_value), f_sf(f_value, df_between, df_within)


def paired_one_sided(lower: Sequence[float], higher: Sequence[float]) -> Tuple[float, float]:
    """(t, p) for H1: mean(lower - higher) < 0 over paired samples.

    Uses F = t**2 on F(1, n-1), halved for direction.
    """
    d = np.asarray(lower, dtype=np.float64) - np.asarray(higher, dtype=np.float64)
    if d.size < 2:
        raise TooFewSamplesError("paired test needs >= 2 pairs")
    sd = d.std(ddof=1)
    if sd == 0:
        raise DegenerateGroupsError("paired differences have zero variance")
    t = d.mean() / (sd / np.sqrt(d.size))
    two_sided = f_sf(t * t, 1, d.size - 1)
    p = two_sided / 2.0 if t < 0 else 1.0 - two_sided / 2.0
    return float(t), float(p)


@dataclass(frozen=True)
class AnovaRow:
    first: str
    second: str
    f_value: float
    p_value: float


def pairwise_anova(samples: Mapping[str, Sequence[float]]) -> List[AnovaRow]:
    """One-way ANOVA per model pair; degenerate pairs yield NaN and a warning."""
    rows: List[AnovaRow] = []
    for a, b in combinations(sorted(samples), 2):
        try:
            f_value, p = one_way_anova([samples[a], samples[b]])
        except (DegenerateGroupsError, TooFewSamplesError) as exc:
            logger.warning("ANOVA %s vs %s skipped: %s", a, b, exc)
            f_value, p = float("nan"), float("nan")
        rows.append(AnovaRow(a, b, f_value, p))
    return rows


def reproducibility(fold_metrics: Sequence[Mapping[str, float]]) -> Dict[str, float]:
    """Sample standard deviation of each metric across fold models."""
    if len(fold_metrics) < 2:
        raise TooFewSamplesError("reproducibility needs >= 2 fold models")
    keys = sorted(set().union(*fold_metrics))
    return {k: float(np.std([m[k] for m in fold_metrics if k in m], ddof=1)) for k in keys}


# ---------------------------
# Report container
# ---------------------------

@dataclass
class EvalReport:
    images: List[ImageScore] = field(default_factory=list)
    patients: Optional[PatientReport] = None
    anova: List[AnovaRow] = field(default_factory=list)
    fold_sigma: Dict[str, float] = field(default_factory=dict)

    @property
    def mean_f1(self) -> float:
        return float(np.mean([s.f1_pooled for s in self.images])) if self.images else float("nan")

    def to_dict(self) -> dict:
        out: dict = {
            "images": [vars(s) for s in self.images],
            "mean_f1": self.mean_f1,
            "anova": [vars(a) for a in self.anova],
            "fold_sigma": dict(self.fold_sigma),
        }
        if self.patients is not None:
            out["patients"] = [
                {
                    "patient_id": r.patient_id,
                    "pi_actual": r.pi_actual,
                    "pi_predicted": r.pi_predicted,
                    "delta_pi": r.delta_pi,
                    "interval": r.interval,
                    "tma_count": r.tma_count,
                }
                for r in self.patients.rows
            ]
            out["mean_delta_pi"] = self.patients.mean_delta_pi
            out["pi_accuracy"] = self.patients.pi_accuracy
            out["bins"] = self.patients.bins()
        return out
