"""End-to-end experiment runner.

One run covers: source GS data, the target cohort, the nested SS datasets,
every regime x increment cell under cross-validation, the IHCCH baseline,
pairwise ANOVA across cells and per-cell t-SNE embeddings. Everything lands
under one run directory:

    report.json              metrics only (stable across reruns)
    manifest.json            provenance, timing and every file written
    anova.csv
    cells/<cell>/report.json, fold<k>.ckpt, losses.csv, embedding.csv
    baseline/ihcch/report.json

Generated datasets live in the cache (KI67_CACHE_DIR) keyed by the settings
that produced them.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from . import __version__, db, storage
from .config import ExperimentConfig
from .detector import MiniDetector, predict_centroids, save_checkpoint
from .embed import SOURCE, TARGET, TsneConfig, domain_overlap_score, feature_matrix, tsne
from .errors import (
    DatasetMissingError,
    DegenerateInputError,
    EmptyTissueError,
    InsufficientPatchesError,
    Ki67Error,
    PatientLeakageError,
    ZeroCellsError,
)
from .ihcch import ihcch_pipeline, tissue_fraction
from .labels import (
    LabelledPatch,
    SsDatasetSpec,
    build_ss_dataset,
    labelled_from_annotations,
    load_dataset,
    patch_tissue_mask,
    save_dataset,
    save_ss_dataset,
    tile_image,
)
from .metrics import (
    EvalReport,
    ImageScore,
    PatientReport,
    pairwise_anova,
    patient_report,
    pi_from_detections,
    reproducibility,
    score_images,
)
from .models import ArtifactRecord, CentroidSet, PiScore, RgbImage, RunManifest
from .models.manifest import now_utc
from .regimes import Regime, RegimeResult, cross_validate, fold_seed, run_regime
from .seeding import substream, substream_seed
from .synth import SOURCE_PRESET, expert_pis, gen_patch, gen_tma, plan_cohort, target_preset

logger = logging.getLogger(__name__)

COHORT_FILE = "cohort.csv"
COHORT_COLUMNS = ("tma_id", "patient_id", "role", "expert_pi")
TSNE_PATCHES_PER_DOMAIN = 50
BASELINE_ID = "ihcch"
Detector = Callable[[RgbImage], CentroidSet]


# ---------------------------
# Target cohort
# ---------------------------

@dataclass(frozen=True)
class TargetTma:
    tma_id: str
    patient_id: str
    role: str  # "ss" (pseudo-label source) or "test"
    image_path: Path
    annotation_path: Optional[Path] = None


@dataclass(frozen=True)
class TargetCohort:
    """Target-domain TMAs on disk.

    Layout: cohort.csv (tma_id, patient_id, role, expert_pi),
    tmas/<tma_id>.png and, for the annotated subset,
    annotations/<tma_id>.csv.
    """

    root: Path
    tmas: Tuple[TargetTma, ...]
    expert_pi: Dict[str, float]

    def of_role(self, role: str) -> List[TargetTma]:
        return [t for t in self.tmas if t.role == role]

    def patients(self, role: str) -> List[str]:
        return sorted({t.patient_id for t in self.of_role(role)})

    @property
    def patient_of(self) -> Dict[str, str]:
        return {t.tma_id: t.patient_id for t in self.tmas}


def check_patient_leakage(cohort: TargetCohort) -> None:
    shared = set(cohort.patients("ss")) & set(cohort.patients("test"))
    if shared:
        raise PatientLeakageError(f"patients used for SS labels and for testing: {sorted(shared)}")


def load_target_cohort(root: Path) -> TargetCohort:
    root = Path(root).expanduser()
    table = root / COHORT_FILE
    if not table.is_file():
        raise DatasetMissingError(f"no {COHORT_FILE} in {root}")
    frame = storage.read_table(table, dtype={"tma_id": str, "patient_id": str, "role": str})
    tmas: List[TargetTma] = []
    expert: Dict[str, float] = {}
    for tma_id, patient_id, role, pi in zip(frame["tma_id"], frame["patient_id"], frame["role"], frame["expert_pi"]):
        image = root / "tmas" / f"{tma_id}.png"
        if not image.is_file():
            raise DatasetMissingError(f"missing TMA image {image}")
        ann = root / "annotations" / f"{tma_id}.csv"
        tmas.append(TargetTma(tma_id, patient_id, role, image, ann if ann.is_file() else None))
        if role == "test" and pi == pi:
            expert[patient_id] = float(pi)
    cohort = TargetCohort(root, tuple(tmas), expert)
    check_patient_leakage(cohort)
    return cohort


def synthesize_target_cohort(cfg: ExperimentConfig, root: Path, *, progress: bool = False) -> TargetCohort:
    s = cfg.synth
    params = target_preset(s.severity)
    seed = substream_seed(cfg.root_seed, "synth", "target")
    ss_plan = plan_cohort(s.ss_tmas, seed, prefix="S")[: s.ss_tmas]
    test_plan = plan_cohort(s.target_patients, seed, prefix="T")
    annotated = {e.tma_id for e in test_plan[: s.annotated_tmas]}

    planted: Dict[str, Optional[PiScore]] = {}
    for entry in tqdm(ss_plan + test_plan, desc="target TMAs", disable=not progress):
        img, gt = gen_tma(params, entry.target_pi, entry.seed, size=s.tma_size, core_radius_fraction=s.core_radius_fraction)
        storage.write_png(root / "tmas" / f"{entry.tma_id}.png", img)
        planted[entry.tma_id] = gt.true_pi
        if entry.tma_id in annotated:
            storage.write_centroids_csv(root / "annotations" / f"{entry.tma_id}.csv", gt.centroids)

    expert = expert_pis(test_plan, planted)
    rows = [{"tma_id": e.tma_id, "patient_id": e.patient_id, "role": "ss", "expert_pi": None} for e in ss_plan]
    rows += [
        {"tma_id": e.tma_id, "patient_id": e.patient_id, "role": "test", "expert_pi": expert.get(e.patient_id)}
        for e in test_plan
    ]
    storage.write_table(root / COHORT_FILE, rows, COHORT_COLUMNS)
    return load_target_cohort(root)


# ---------------------------
# Source GS data
# ---------------------------

def synthesize_gs(cfg: ExperimentConfig, root: Path, *, progress: bool = False) -> List[LabelledPatch]:
    s = cfg.synth
    params = replace(SOURCE_PRESET, artifact_rate=s.artifact_rate, microns_per_pixel=cfg.match.microns_per_pixel)
    pis = substream(cfg.root_seed, "synth", "gs-pi").uniform(0.0, 80.0, size=s.gs_patches)
    samples: List[LabelledPatch] = []
    for i in tqdm(range(s.gs_patches), desc="GS patches", disable=not progress):
        seed = substream_seed(cfg.root_seed, "synth", "gs", i)
        img, gt = gen_patch(params, float(pis[i]), seed, size=s.patch_size)
        samples.append(labelled_from_annotations(img, gt.centroids, cfg.sigma_px, source_id=f"G{i:04d}"))
    save_dataset(root, samples, {"kind": "gold", "preset": "source", "artifact_rate": s.artifact_rate})
    return samples


def _cache_dir(kind: str, payload: dict) -> Path:
    return db.get_cache_dir() / f"{kind}-{storage.sha256_json(payload)[:16]}"


def _dataset_hash(path: Path) -> str:
    for name in ("manifest.json", COHORT_FILE):
        if (path / name).is_file():
            return storage.sha256_file(path / name)
    raise DatasetMissingError(f"{path} holds no dataset manifest")


# ---------------------------
# Evaluation
# ---------------------------

@dataclass
class FoldEval:
    metrics: Dict[str, float]
    image_scores: List[ImageScore]
    predicted_pi: Dict[str, float]  # tma id -> PI


def model_detector(model: MiniDetector, cfg: ExperimentConfig) -> Detector:
    return partial(
        predict_centroids,
        model,
        peak_threshold=cfg.peak_threshold,
        sigma_px=cfg.sigma_px,
        microns_per_pixel=cfg.match.microns_per_pixel,
    )


def _ihcch_detect(cfg: ExperimentConfig, img: RgbImage) -> CentroidSet:
    try:
        return ihcch_pipeline(img, cfg.ihcch)
    except EmptyTissueError:
        return CentroidSet.empty(img.width, img.height, cfg.ihcch.microns_per_pixel)


def evaluate_detector(
    detect: Detector,
    source: Sequence[LabelledPatch],
    cohort: TargetCohort,
    cfg: ExperimentConfig,
) -> FoldEval:
    """Source F1 on held-out GS patches, target F1 on annotated TMAs and
    patient delta PI on the test cohort."""
    src_scores = score_images(((s.source_id, detect(s.patch), s.centroids) for s in source), cfg.match)

    tgt_pairs = []
    predicted: Dict[str, float] = {}
    for tma in cohort.of_role("test"):
        img = storage.read_png(tma.image_path)
        cs = detect(img)
        try:
            predicted[tma.tma_id] = pi_from_detections(cs).value
        except ZeroCellsError:
            logger.warning("TMA %s: no nuclei detected; excluded from PI", tma.tma_id)
        if tma.annotation_path is not None:
            gt = storage.read_centroids_csv(tma.annotation_path, img.width, img.height, cfg.match.microns_per_pixel)
            tgt_pairs.append((tma.tma_id, cs, gt))
    tgt_scores = score_images(tgt_pairs, cfg.match)

    report = patient_report(predicted, cohort.patient_of, cohort.expert_pi)
    metrics = {
        "source_f1": float(np.mean([s.f1_pooled for s in src_scores])) if src_scores else float("nan"),
        "target_f1": float(np.mean([s.f1_pooled for s in tgt_scores])) if tgt_scores else float("nan"),
        "delta_pi": report.mean_delta_pi,
        "pi_accuracy": report.pi_accuracy,
    }
    return FoldEval(metrics, tgt_scores, predicted)


def _averaged_patients(evals: Sequence[FoldEval], cohort: TargetCohort) -> PatientReport:
    """Patient report from TMA PIs averaged over fold models."""
    tma_ids = sorted(set().union(*(e.predicted_pi for e in evals)))
    mean_pi = {t: float(np.mean([e.predicted_pi[t] for e in evals if t in e.predicted_pi])) for t in tma_ids}
    return patient_report(mean_pi, cohort.patient_of, cohort.expert_pi)


# ---------------------------
# Cells
# ---------------------------

@dataclass
class CellJob:
    cell_id: str
    regime: Optional[Regime]  # None: IHCCH baseline
    cfg: ExperimentConfig
    gs_dir: Path
    ss_dir: Optional[Path]
    cohort: TargetCohort
    out_dir: Path
    tsne_target: List[Tuple[str, RgbImage]] = field(default_factory=list)
    progress: bool = False


@dataclass
class CellOutcome:
    cell_id: str
    folds: List[Dict[str, float]] = field(default_factory=list)
    image_f1: Dict[str, float] = field(default_factory=dict)
    patient_delta: Dict[str, float] = field(default_factory=dict)
    summary: Dict[str, object] = field(default_factory=dict)
    written: List[Tuple[str, str]] = field(default_factory=list)  # (path, kind)
    error: Optional[str] = None


def _summarise(outcome: CellOutcome, evals: Sequence[FoldEval], cohort: TargetCohort) -> None:
    outcome.folds = [e.metrics for e in evals]
    per_image: Dict[str, List[float]] = {}
    for e in evals:
        for s in e.image_scores:
            per_image.setdefault(s.image_id, []).append(s.f1_pooled)
    outcome.image_f1 = {k: float(np.mean(v)) for k, v in sorted(per_image.items())}
    patients = _averaged_patients(evals, cohort)
    outcome.patient_delta = {r.patient_id: r.delta_pi for r in patients.rows}
    mean = {k: float(np.nanmean([f[k] for f in outcome.folds])) for k in outcome.folds[0]}
    report = EvalReport(patients=patients, fold_sigma=reproducibility(outcome.folds) if len(evals) >= 2 else {})
    outcome.summary = {
        "mean": mean,
        "fold_sigma": report.fold_sigma,
        "bins": patients.bins(),
        "patients": report.to_dict()["patients"],
    }


def _write_cell_report(job: CellJob, outcome: CellOutcome) -> None:
    payload = {
        "cell": job.cell_id,
        "config_hash": job.cfg.config_hash(),
        "manifest": "manifest.json",
        "folds": outcome.folds,
        "image_f1": outcome.image_f1,
        **outcome.summary,
    }
    path = storage.write_json(job.out_dir / "report.json", payload)
    outcome.written.append((str(path), "cell-report"))


def run_baseline(job: CellJob) -> CellOutcome:
    outcome = CellOutcome(job.cell_id)
    gs = load_dataset(job.gs_dir)
    ev = evaluate_detector(partial(_ihcch_detect, job.cfg), gs, job.cohort, job.cfg)
    _summarise(outcome, [ev], job.cohort)
    _write_cell_report(job, outcome)
    return outcome


def run_cell(job: CellJob) -> CellOutcome:
    """Train and evaluate one regime cell over its folds; never raises for
    domain or validation errors, which are returned in CellOutcome.error."""
    try:
        if job.regime is None:
            return run_baseline(job)
        return _run_regime_cell(job)
    except (Ki67Error, ValueError) as exc:
        logger.error("cell %s failed: %s", job.cell_id, exc)
        return CellOutcome(job.cell_id, error=f"{type(exc).__name__}: {exc}")


def _run_regime_cell(job: CellJob) -> CellOutcome:
    cfg = job.cfg
    outcome = CellOutcome(job.cell_id)
    gs = load_dataset(job.gs_dir)
    ss = load_dataset(job.ss_dir) if job.ss_dir is not None and job.regime.kind.uses_ss else []

    def train_fold(pool: List[LabelledPatch], k: int) -> RegimeResult:
        train_cfg = replace(cfg.train, seed=fold_seed(cfg.root_seed, k))
        return run_regime(job.regime, pool, ss, train_cfg, progress=job.progress)

    runs = cross_validate(
        gs, cfg.folds, train_fold, seed=substream_seed(cfg.root_seed, "cv"), limit=cfg.folds_to_run
    )

    evals: List[FoldEval] = []
    loss_rows = []
    for run in runs:
        res = run.result
        parent = None
        if len(res.stages) > 1:
            stage1 = save_checkpoint(
                job.out_dir / f"fold{run.fold}_stage1.ckpt", res.stages[0].model,
                seed=fold_seed(cfg.root_seed, run.fold), regime=job.cell_id,
            )
            outcome.written.append((str(stage1), "checkpoint"))
            parent = storage.sha256_file(stage1)
        ckpt = save_checkpoint(
            job.out_dir / f"fold{run.fold}.ckpt", res.model,
            seed=fold_seed(cfg.root_seed, run.fold), regime=job.cell_id, parent_sha256=parent,
        )
        outcome.written.append((str(ckpt), "checkpoint"))
        for s_idx, stage in enumerate(res.stages):
            for epoch, (tl, vl) in enumerate(zip(stage.train_losses, stage.val_losses)):
                loss_rows.append({
                    "fold": run.fold, "stage": s_idx + 1, "epoch": epoch + 1,
                    "train_loss": tl, "val_loss": vl, "best": epoch == stage.best_epoch,
                })
        held_out = [gs[i] for i in run.held_out]
        evals.append(evaluate_detector(model_detector(res.model, cfg), held_out, job.cohort, cfg))

    path = storage.write_table(
        job.out_dir / "losses.csv", loss_rows, ("fold", "stage", "epoch", "train_loss", "val_loss", "best")
    )
    outcome.written.append((str(path), "losses"))
    _summarise(outcome, evals, job.cohort)

    if cfg.tsne and job.tsne_target:
        first = runs[0]
        source = [(gs[i].source_id, SOURCE, gs[i].patch) for i in first.held_out[:TSNE_PATCHES_PER_DOMAIN]]
        target = [(pid, TARGET, patch) for pid, patch in job.tsne_target]
        fm = feature_matrix(first.result.model, source + target)
        perplexity = float(min(15, (len(fm) - 1) // 3))
        if perplexity >= 1 and source and target:
            try:
                emb = tsne(fm, TsneConfig(perplexity=perplexity, seed=substream_seed(cfg.root_seed, "tsne"))).embedding
            except DegenerateInputError as exc:
                logger.warning("cell %s: t-SNE skipped: %s", job.cell_id, exc)
                _write_cell_report(job, outcome)
                return outcome
            outcome.summary["domain_overlap"] = domain_overlap_score(emb, fm.domains)
            rows = [
                {"id": i, "domain": d, "x": float(x), "y": float(y)}
                for i, d, (x, y) in zip(fm.ids, fm.domains, emb[:, :2])
            ]
            path = storage.write_table(job.out_dir / "embedding.csv", rows, ("id", "domain", "x", "y"))
            outcome.written.append((str(path), "embedding"))

    _write_cell_report(job, outcome)
    return outcome


# ---------------------------
# Runner
# ---------------------------

@dataclass
class ExperimentOutcome:
    run_dir: Path
    report: dict
    manifest: RunManifest
    failed: List[Tuple[str, str]]

    @property
    def exit_status(self) -> int:
        return 0 if not self.failed else 1


class ExperimentRunner:
    def __init__(self, cfg: ExperimentConfig, out_dir: Path, *, progress: bool = False):
        self.cfg = cfg
        self.out_dir = Path(out_dir).expanduser()
        self.progress = progress
        self._written: List[Tuple[Path, str]] = []

    def _record(self, path: Path, kind: str) -> Path:
        self._written.append((Path(path), kind))
        return Path(path)

    # -- data --

    def prepare_gs(self) -> Path:
        cfg = self.cfg
        if cfg.gs_dir is not None:
            if not (cfg.gs_dir / "manifest.json").is_file():
                raise DatasetMissingError(f"GS dataset not found at {cfg.gs_dir}")
            return cfg.gs_dir
        root = _cache_dir("gs", {
            "synth": asdict(cfg.synth), "seed": cfg.root_seed, "sigma": cfg.sigma_px,
            "mpp": cfg.match.microns_per_pixel, "version": __version__,
        })
        if not (root / "manifest.json").is_file():
            logger.info("generating %d GS patches in %s", cfg.synth.gs_patches, root)
            synthesize_gs(cfg, root, progress=self.progress)
        return root

    def prepare_target(self) -> TargetCohort:
        cfg = self.cfg
        if cfg.target_dir is not None:
            return load_target_cohort(cfg.target_dir)
        root = _cache_dir("target", {"synth": asdict(cfg.synth), "seed": cfg.root_seed, "version": __version__})
        if not (root / COHORT_FILE).is_file():
            logger.info("generating target cohort in %s", root)
            return synthesize_target_cohort(cfg, root, progress=self.progress)
        return load_target_cohort(root)

    def prepare_ss(self, cohort: TargetCohort) -> Tuple[Optional[Path], Dict[int, str]]:
        """Build the nested SS dataset at the largest configured increment the
        SS source TMAs can fill. Returns its directory (None when no
        increment fits or no cell needs SS) and an error per increment
        that could not be built."""
        cfg = self.cfg
        increments = sorted({r.ss_increment for r in cfg.cells() if r.kind.uses_ss})
        if not increments:
            return None, {}
        try:
            return self._build_ss(cohort, increments[-1]), {}
        except InsufficientPatchesError as exc:
            fits = [i for i in increments if i <= exc.found]
            errors = {i: f"{type(exc).__name__}: only {exc.found} qualifying patches, {i} required"
                      for i in increments if i > exc.found}
            logger.warning("SS dataset: %s; building increments %s only", exc, fits or "none")
            if not fits:
                return None, errors
            return self._build_ss(cohort, fits[-1]), errors

    def _build_ss(self, cohort: TargetCohort, increment: int) -> Path:
        cfg = self.cfg
        spec = SsDatasetSpec(
            increment=increment,
            patch_size=cfg.synth.patch_size,
            seed=substream_seed(cfg.root_seed, "ss"),
            sigma_px=cfg.sigma_px,
        )
        sources = cohort.of_role("ss")
        root = _cache_dir("ss", {
            "cohort": _dataset_hash(cohort.root), "spec": asdict(spec),
            "ihcch": cfg.ihcch.config_hash(), "version": __version__,
        })
        if not (root / "manifest.json").is_file():
            images = [(t.tma_id, storage.read_png(t.image_path)) for t in sources]
            samples = build_ss_dataset(images, cfg.ihcch, spec, jobs=cfg.jobs, progress=self.progress)
            save_ss_dataset(root, samples, spec, cfg.ihcch, [t.tma_id for t in sources])
        return root

    def tsne_target_patches(self, cohort: TargetCohort) -> List[Tuple[str, RgbImage]]:
        """Tissue tiles from annotated test TMAs (all test TMAs when none are
        annotated), seeded subset shared by every cell."""
        tmas = [t for t in cohort.of_role("test") if t.annotation_path is not None] or cohort.of_role("test")
        size = self.cfg.synth.patch_size
        tiles: List[Tuple[str, RgbImage]] = []
        for t in tmas:
            img = storage.read_png(t.image_path)
            if min(img.width, img.height) < size:
                continue
            for patch, (x, y) in tile_image(img, size):
                if tissue_fraction(patch_tissue_mask(patch, self.cfg.ihcch)) >= 0.8:
                    tiles.append((f"{t.tma_id}@{x},{y}", patch))
        if len(tiles) > TSNE_PATCHES_PER_DOMAIN:
            pick = np.sort(substream(self.cfg.root_seed, "tsne-target").choice(len(tiles), TSNE_PATCHES_PER_DOMAIN, replace=False))
            tiles = [tiles[i] for i in pick]
        return tiles

    # -- run --

    def run(self) -> ExperimentOutcome:
        cfg = self.cfg
        started = now_utc()
        config_hash = cfg.config_hash()
        run_id = f"{cfg.name}-{started:%Y%m%dT%H%M%S.%f}-{config_hash[:8]}"
        manifest = RunManifest(
            run_id=run_id,
            config_hash=config_hash,
            root_seed=cfg.root_seed,
            tool_version=__version__,
            seeds={
                "root": cfg.root_seed,
                "cv": substream_seed(cfg.root_seed, "cv"),
                "ss": substream_seed(cfg.root_seed, "ss"),
                "tsne": substream_seed(cfg.root_seed, "tsne"),
            },
            started_at=started,
        )
        db.create_tables()
        db.insert_run(manifest)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        gs_dir = self.prepare_gs()
        cohort = self.prepare_target()
        check_patient_leakage(cohort)
        ss_dir, ss_errors = self.prepare_ss(cohort)
        manifest.datasets = {
            "gs": {"path": str(gs_dir), "sha256": _dataset_hash(gs_dir)},
            "target": {
                "path": str(cohort.root),
                "sha256": _dataset_hash(cohort.root),
                "ss_patients": cohort.patients("ss"),
                "test_patients": cohort.patients("test"),
            },
        }
        if ss_dir is not None:
            manifest.datasets["ss"] = {"path": str(ss_dir), "sha256": _dataset_hash(ss_dir)}

        tsne_target = self.tsne_target_patches(cohort) if cfg.tsne else []
        jobs: List[CellJob] = []
        unbuilt: List[CellOutcome] = []
        for r in cfg.cells():
            if r.kind.uses_ss and r.ss_increment in ss_errors:
                logger.error("cell %s failed: %s", r.label, ss_errors[r.ss_increment])
                unbuilt.append(CellOutcome(r.label, error=ss_errors[r.ss_increment]))
                continue
            jobs.append(
                CellJob(r.label, r, cfg, gs_dir, ss_dir, cohort, self.out_dir / "cells" / r.label, tsne_target, self.progress)
            )
        if cfg.ihcch_baseline:
            jobs.append(CellJob(BASELINE_ID, None, cfg, gs_dir, None, cohort, self.out_dir / "baseline" / BASELINE_ID))

        outcomes = self._run_jobs(jobs) + unbuilt
        report, failed = self._collate(outcomes, config_hash)

        self._record(storage.write_json(self.out_dir / "report.json", report), "report")
        manifest.finished_at = now_utc()
        manifest.artifacts = [
            ArtifactRecord(str(p.relative_to(self.out_dir)), storage.sha256_file(p), kind)
            for p, kind in self._written
        ]
        storage.write_json(self.out_dir / "manifest.json", manifest.to_dict())

        db.insert_artifacts(run_id, manifest.artifacts)
        db.insert_metrics(run_id, (
            (cell, metric, value)
            for cell, body in {**report["cells"], **report["baseline"]}.items()
            for metric, value in body["mean"].items()
        ))
        db.finish_run(run_id, "ok" if not failed else "failed", manifest.finished_at.isoformat())
        logger.info("run %s finished: %d cells, %d failed", run_id, len(outcomes), len(failed))
        return ExperimentOutcome(self.out_dir, report, manifest, failed)

    def _run_jobs(self, jobs: List[CellJob]) -> List[CellOutcome]:
        if self.cfg.jobs <= 1:
            outcomes = [run_cell(j) for j in tqdm(jobs, desc="cells", disable=not self.progress)]
        else:
            with ProcessPoolExecutor(max_workers=self.cfg.jobs) as pool:
                outcomes = list(pool.map(run_cell, jobs))
        for o in outcomes:
            for path, kind in o.written:
                self._record(Path(path), kind)
        return outcomes

    def _collate(self, outcomes: Sequence[CellOutcome], config_hash: str) -> Tuple[dict, List[Tuple[str, str]]]:
        """Deterministic reduction over completed cells, ordered by cell id."""
        failed = sorted((o.cell_id, o.error) for o in outcomes if o.error)
        done = sorted((o for o in outcomes if not o.error), key=lambda o: o.cell_id)
        cells = {o.cell_id: {"folds": o.folds, **o.summary} for o in done if o.cell_id != BASELINE_ID}
        baseline = {o.cell_id: {"folds": o.folds, **o.summary} for o in done if o.cell_id == BASELINE_ID}

        anova = {
            "delta_pi": pairwise_anova({o.cell_id: list(o.patient_delta.values()) for o in done}),
            "target_f1": pairwise_anova({o.cell_id: list(o.image_f1.values()) for o in done}),
        }
        rows = [
            {"metric": metric, "first": a.first, "second": a.second, "f": a.f_value, "p": a.p_value}
            for metric, table in anova.items()
            for a in table
        ]
        self._record(storage.write_table(self.out_dir / "anova.csv", rows, ("metric", "first", "second", "f", "p")), "anova")

        report = {
            "experiment": self.cfg.name,
            "config_hash": config_hash,
            "manifest": "manifest.json",
            "cells": cells,
            "baseline": baseline,
            "anova": {m: [vars(a) for a in t] for m, t in anova.items()},
            "failed": [{"cell": c, "error": e} for c, e in failed],
        }
        return report, failed
