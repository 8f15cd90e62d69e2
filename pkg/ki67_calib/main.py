"""Command-line interface: `python -m ki67_calib <subcommand>`."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import pandas as pd

from . import __version__, storage
from .config import load_config
from .detector import load_checkpoint, save_checkpoint
from .embed import TsneConfig, achieved_perplexity, conditional_affinities, domain_overlap_score, feature_matrix, tsne
from .errors import DatasetMissingError, Ki67Error, ZeroCellsError
from .experiment import ExperimentRunner, load_target_cohort
from .ihcch import BSplit, IhcchConfig, ihcch_pipeline
from .labels import DEFAULT_SIGMA_PX, SsDatasetSpec, build_ss_dataset, load_dataset, save_ss_dataset
from .metrics import EvalReport, MatchConfig, patient_report, pi_from_detections, score_images
from .models import CentroidSet, RgbImage
from .regimes import Regime, RegimeKind, cross_validate, fold_seed, run_regime
from .report import compare_runs, render_overlays, render_report, runs_table
from .seeding import substream_seed
from .synth import gen_patch, gen_tma, preset
from .training import TrainConfig

logger = logging.getLogger(__name__)


# ---------------------------
# Helpers
# ---------------------------

def _png_files(directory: Path) -> List[Path]:
    """PNGs of a dataset dir (its patches/ folder) or of a plain folder."""
    d = Path(directory).expanduser()
    if (d / "patches").is_dir():
        d = d / "patches"
    if not d.is_dir():
        raise DatasetMissingError(f"not a directory: {d}")
    return sorted(d.glob("*.png"))


def _csv_extent(path: Path) -> Tuple[int, int]:
    frame = pd.read_csv(path)
    if frame.empty:
        return 1, 1
    return int(math.floor(frame["x"].max())) + 1, int(math.floor(frame["y"].max())) + 1


def _read_pair(pred: Path, gt: Path, mpp: float) -> Tuple[CentroidSet, CentroidSet]:
    """Both sets share one frame large enough to hold every point."""
    w = max(_csv_extent(pred)[0], _csv_extent(gt)[0])
    h = max(_csv_extent(pred)[1], _csv_extent(gt)[1])
    return storage.read_centroids_csv(pred, w, h, mpp), storage.read_centroids_csv(gt, w, h, mpp)


# ---------------------------
# Subcommands
# ---------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    params = replace(preset(args.preset), sensor_noise_sigma=args.noise) if args.noise is not None else preset(args.preset)
    out = Path(args.out).expanduser()
    rows = []
    for i in range(args.n):
        seed = args.seed + i
        if args.kind == "patch":
            img, gt = gen_patch(params, args.pi, seed, size=args.size or 256)
        else:
            img, gt = gen_tma(params, args.pi, seed, size=args.size or 2000, core_radius_fraction=args.core)
        stem = f"{args.kind}_{i:04d}"
        storage.write_png(out / "images" / f"{stem}.png", img)
        storage.write_centroids_csv(out / "centroids" / f"{stem}.csv", gt.centroids)
        rows.append({
            "id": stem,
            "seed": seed,
            "true_pi": gt.true_pi.value if gt.true_pi else None,
            "cells": len(gt.centroids.centroids),
            "artifact": gt.artifact,
        })
    storage.write_table(out / "truth.csv", rows, ("id", "seed", "true_pi", "cells", "artifact"))
    storage.write_json(out / "manifest.json", {
        "preset": args.preset, "kind": args.kind, "target_pi": args.pi, "seed": args.seed, "count": args.n,
        "tool_version": __version__,
    })
    print(f"Wrote {args.n} {args.kind} image(s) to {out}")
    return 0


def cmd_ihcch_detect(args: argparse.Namespace) -> int:
    cfg = IhcchConfig(
        median_window=args.median_window,
        background_l_threshold=args.bg_l,
        b_split=BSplit(args.b_split),
        microns_per_pixel=args.mpp,
    )
    img = storage.read_png(args.input)
    cs = ihcch_pipeline(img, cfg)
    storage.write_centroids_csv(args.out, cs)
    counts = cs.counts()
    print(f"{len(cs.centroids)} nuclei ({', '.join(f'{k.value}: {v}' for k, v in counts.items())})")
    if args.overlay:
        storage.write_png(args.overlay, storage.draw_overlay(img, cs))
    return 0


def cmd_gen_ss(args: argparse.Namespace) -> int:
    images: List[Tuple[str, RgbImage]] = []
    for d in args.inputs:
        for p in _png_files(Path(d)):
            images.append((p.stem, storage.read_png(p)))
    if not images:
        raise DatasetMissingError("no PNG images found in the inputs")
    cfg = IhcchConfig(microns_per_pixel=args.mpp)
    spec = SsDatasetSpec(increment=args.increment, patch_size=args.patch_size, seed=args.seed, sigma_px=args.sigma)
    samples = build_ss_dataset(images, cfg, spec, jobs=args.jobs, progress=not args.quiet)
    save_ss_dataset(Path(args.out).expanduser(), samples, spec, cfg, [i for i, _ in images])
    print(f"Wrote {len(samples)} SS patches to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    kind = RegimeKind.parse(args.regime)
    regime = Regime(kind, args.ss_increment if kind.uses_ss else None)
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        finetune_epochs=args.finetune_epochs,
        seed=args.seed,
        folds=args.folds,
    )
    gs = load_dataset(Path(args.gs)) if args.gs else []
    ss = load_dataset(Path(args.ss)) if args.ss else []
    out = Path(args.out).expanduser()
    progress = not args.quiet

    if kind == RegimeKind.SS_ONLY and not gs:
        # nothing to cross-validate over: one model on the SS data
        res = run_regime(regime, None, ss, cfg, progress=progress)
        save_checkpoint(out / "model.ckpt", res.model, seed=cfg.seed, regime=regime.label)
        _write_losses(out, [(0, res)])
        print(f"Trained {regime.label}; checkpoint in {out}")
        return 0

    runs = cross_validate(
        gs,
        cfg.folds,
        lambda pool, k: run_regime(regime, pool, ss, replace(cfg, seed=fold_seed(cfg.seed, k)), progress=progress),
        seed=substream_seed(cfg.seed, "cv"),
        limit=args.max_folds or None,
    )
    for run in runs:
        save_checkpoint(out / f"fold{run.fold}.ckpt", run.result.model, seed=fold_seed(cfg.seed, run.fold), regime=regime.label)
        storage.write_json(out / f"fold{run.fold}_heldout.json", [int(i) for i in run.held_out])
    _write_losses(out, [(r.fold, r.result) for r in runs])
    print(f"Trained {regime.label} on {len(runs)} fold(s); checkpoints in {out}")
    return 0


def _write_losses(out: Path, results) -> None:
    rows = []
    for fold, res in results:
        for s_idx, stage in enumerate(res.stages):
            for epoch, (tl, vl) in enumerate(zip(stage.train_losses, stage.val_losses)):
                rows.append({"fold": fold, "stage": s_idx + 1, "epoch": epoch + 1, "train_loss": tl, "val_loss": vl})
    storage.write_table(out / "losses.csv", rows, ("fold", "stage", "epoch", "train_loss", "val_loss"))


def cmd_evaluate(args: argparse.Namespace) -> int:
    match = MatchConfig(radius_um=args.radius_um, microns_per_pixel=args.mpp)
    pred_dir, gt_dir = Path(args.pred_dir).expanduser(), Path(args.gt_dir).expanduser()
    pairs = []
    predicted_pi = {}
    for pred in sorted(pred_dir.glob("*.csv")):
        gt = gt_dir / pred.name
        if not gt.is_file():
            logger.warning("no ground truth for %s; skipped", pred.name)
            continue
        p, g = _read_pair(pred, gt, args.mpp)
        pairs.append((pred.stem, p, g))
        try:
            predicted_pi[pred.stem] = pi_from_detections(p).value
        except ZeroCellsError:
            logger.warning("%s: no nuclei detected; excluded from PI", pred.stem)
    if not pairs:
        raise DatasetMissingError(f"no matching CSV pairs in {pred_dir} and {gt_dir}")

    report = EvalReport(images=score_images(pairs, match))
    if args.cohort:
        cohort = load_target_cohort(Path(args.cohort))
        known = {k: v for k, v in predicted_pi.items() if k in cohort.patient_of}
        report.patients = patient_report(known, cohort.patient_of, cohort.expert_pi)
    payload = report.to_dict()
    storage.write_json(args.out, payload)
    storage.write_table(
        Path(args.out).with_suffix(".csv"),
        [vars(s) for s in report.images],
        ("image_id", "f1_neg", "f1_pos", "f1_pooled", "precision", "recall"),
    )
    print(f"{len(report.images)} image(s), mean F1 {report.mean_f1:.3f}")
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(Path(args.checkpoint))
    tags = [t.strip() for t in args.tags.split(",")]
    if len(tags) != len(args.patches):
        raise ValueError("--tags needs one tag per --patches directory")
    items = []
    for d, tag in zip(args.patches, tags):
        for p in _png_files(Path(d)):
            items.append((f"{Path(d).name}/{p.stem}", tag, storage.read_png(p)))
    fm = feature_matrix(model, items)
    result = tsne(fm, TsneConfig(perplexity=args.perplexity, iterations=args.iterations, seed=args.seed))
    rows = [
        {"id": i, "domain": d, "x": float(x), "y": float(y)}
        for i, d, (x, y) in zip(fm.ids, fm.domains, result.embedding[:, :2])
    ]
    storage.write_table(args.out, rows, ("id", "domain", "x", "y"))
    perp = achieved_perplexity(conditional_affinities(fm.rows, args.perplexity))
    msg = f"Embedded {len(fm)} patches (KL {result.kl[-1]:.4f}, perplexity {perp.min():.3f}-{perp.max():.3f})"
    if len(set(tags)) > 1:
        msg += f", domain overlap {domain_overlap_score(result.embedding, fm.domains):.3f}"
    print(msg)
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    cfg = load_config(Path(args.config))
    if args.jobs is not None:
        cfg = replace(cfg, jobs=args.jobs)
    if args.seed is not None:
        cfg = replace(cfg, root_seed=args.seed, train=replace(cfg.train, seed=args.seed))
    outcome = ExperimentRunner(cfg, Path(args.out), progress=not args.quiet).run()
    for cell, error in outcome.failed:
        print(f"cell {cell} failed: {error}", file=sys.stderr)
    print(f"Report: {outcome.run_dir / 'report.json'}")
    return outcome.exit_status


def cmd_report(args: argparse.Namespace) -> int:
    if args.list_runs:
        table = runs_table()
        print(table.to_string(index=False) if not table.empty else "No runs recorded.")
        return 0
    if args.compare:
        lower, higher = args.compare
        result = compare_runs(args.runs, lower, higher, metric=args.metric)
        print(f"{args.metric}: {lower} < {higher} over {result['n']} runs: t = {result['t']:.3f}, p = {result['p']:.4f}")
        if args.out:
            storage.write_json(args.out, result)
        return 0
    if not args.runs:
        print("Nothing to do: give run directories, --compare or --list-runs.", file=sys.stderr)
        return 1
    for run_dir in args.runs:
        out = Path(args.out).expanduser() if args.out else None
        written = render_report(Path(run_dir), out, plots=not args.no_plots)
        if args.overlays:
            written += render_overlays(Path(run_dir), out or Path(run_dir) / "figures", images=args.overlays)
        print(f"{run_dir}: {len(written)} file(s) written")
    return 0


# ---------------------------
# Parser
# ---------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ki67_calib", description="Ki-67 scoring with silver-standard calibration")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging and tracebacks")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only, no progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic IHC images with ground truth")
    p.add_argument("--preset", choices=["source", "target"], default="source")
    p.add_argument("--kind", choices=["patch", "tma"], default="patch")
    p.add_argument("--pi", type=float, default=20.0)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--core", type=float, default=None, help="TMA core radius as a fraction of the image")
    p.add_argument("--noise", type=float, default=None, help="sensor noise sigma override")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ihcch-detect", help="unsupervised nuclei detection on one image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--median-window", type=int, default=3)
    p.add_argument("--bg-l", type=float, default=85.0)
    p.add_argument("--b-split", choices=[b.value for b in BSplit], default=BSplit.HISTOGRAM_VALLEY.value)
    p.add_argument("--mpp", type=float, default=0.5)
    p.add_argument("--overlay", default=None, help="write a PNG with centroid markers")
    p.set_defaults(func=cmd_ihcch_detect)

    p = sub.add_parser("gen-ss", help="build a silver-standard dataset from target images")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--increment", type=int, default=100)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA_PX)
    p.add_argument("--mpp", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_ss)

    p = sub.add_parser("train", help="train one regime under cross-validation")
    p.add_argument("--regime", default="gs", choices=[k.value for k in RegimeKind])
    p.add_argument("--ss-increment", type=int, default=100)
    p.add_argument("--gs", default=None)
    p.add_argument("--ss", default=None)
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--max-folds", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--finetune-epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score predicted centroid CSVs against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--radius-um", type=float, default=6.0)
    p.add_argument("--mpp", type=float, default=0.5)
    p.add_argument("--cohort", default=None, help="target cohort dir for patient delta PI")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("embed", help="t-SNE of detector features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patches", nargs="+", required=True)
    p.add_argument("--tags", default="source,target")
    p.add_argument("--perplexity", type=float, default=15.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("experiment", help="run the regime x increment matrix from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="override experiment.root_seed")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="CSV tables, figures and run comparisons")
    p.add_argument("runs", nargs="*", help="run directories (or registered run ids with --compare)")
    p.add_argument("--out", default=None)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--overlays", type=int, default=0, help="overlay N annotated target TMAs per cell")
    p.add_argument("--compare", nargs=2, metavar=("LOWER", "HIGHER"), default=None)
    p.add_argument("--metric", default="delta_pi")
    p.add_argument("--list-runs", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return int(args.func(args) or 0)
    except (Ki67Error, ValueError) as exc:
        if args.verbose:
            logger.exception("%s failed", args.command)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
