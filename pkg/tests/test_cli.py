import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from ki67_calib import db, storage
from ki67_calib.detector import load_checkpoint
from ki67_calib.labels import load_dataset
from ki67_calib.main import build_parser, main
from ki67_calib.models import RunManifest
from ki67_calib.regimes import Regime, RegimeKind, cross_validate, fold_seed, run_regime
from ki67_calib.report import registered_metrics
from ki67_calib.seeding import substream_seed
from ki67_calib.training import TrainConfig

TINY_EXPERIMENT = """
[experiment]
name = "smoke"
root_seed = 5
regimes = ["gs"]
folds = 2
max_folds = 1
tsne = false

[synth]
gs_patches = 6
target_patients = 2
ss_tmas = 1
annotated_tmas = 1
tma_size = 128
patch_size = 64
artifact_rate = 0.0

[train]
epochs = 1
batch_size = 2
learning_rate = 0.01
"""


def test_parser_requires_a_command() -> None:
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    args = build_parser().parse_args(["-q", "evaluate", "--pred-dir", "p", "--gt-dir", "g", "--out", "r.json"])
    assert args.quiet and args.radius_um == 6.0


def test_synth_detect_and_evaluate(tmp_path: Path) -> None:
    data = tmp_path / "synth"
    assert main(["-q", "synth", "--n", "2", "--size", "96", "--pi", "30", "--out", str(data)]) == 0
    truth = pd.read_csv(data / "truth.csv")
    assert list(truth["id"]) == ["patch_0000", "patch_0001"]
    assert (data / "images" / "patch_0001.png").is_file()

    pred = tmp_path / "pred"
    for stem in truth["id"]:
        rc = main([
            "-q", "ihcch-detect", "--in", str(data / "images" / f"{stem}.png"),
            "--out", str(pred / f"{stem}.csv"), "--overlay", str(tmp_path / f"{stem}_overlay.png"),
        ])
        assert rc == 0
    assert (tmp_path / "patch_0000_overlay.png").is_file()

    out = tmp_path / "eval" / "report.json"
    assert main(["-q", "evaluate", "--pred-dir", str(pred), "--gt-dir", str(data / "centroids"), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert [s["image_id"] for s in report["images"]] == ["patch_0000", "patch_0001"]
    assert 0.0 <= report["mean_f1"] <= 1.0
    assert out.with_suffix(".csv").is_file()


def test_gen_ss_train_and_embed(tmp_path: Path) -> None:
    src = tmp_path / "target"
    assert main(["-q", "synth", "--preset", "target", "--n", "2", "--size", "128", "--out", str(src)]) == 0
    ss = tmp_path / "ss"
    rc = main(["-q", "gen-ss", "--in", str(src / "images"), "--increment", "4", "--patch-size", "32", "--out", str(ss)])
    assert rc == 0
    assert len(list((ss / "patches").glob("*.png"))) == 4

    model_dir = tmp_path / "model"
    rc = main(["-q", "train", "--regime", "ss", "--ss-increment", "4", "--ss", str(ss), "--epochs", "1", "--out", str(model_dir)])
    assert rc == 0
    _, header = load_checkpoint(model_dir / "model.ckpt")
    assert header["regime"] == "ss@4"
    assert len(pd.read_csv(model_dir / "losses.csv")) == 1

    emb = tmp_path / "tsne.csv"
    rc = main([
        "-q", "embed", "--checkpoint", str(model_dir / "model.ckpt"),
        "--patches", str(ss), str(src / "images"), "--tags", "target,source",
        "--perplexity", "1.5", "--iterations", "250", "--out", str(emb),
    ])
    assert rc == 0
    coords = pd.read_csv(emb)
    assert len(coords) == 6
    assert set(coords["domain"]) == {"source", "target"}


def test_errors_exit_with_status_two(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    rc = main(["-q", "train", "--regime", "gs", "--gs", str(tmp_path / "missing"), "--out", str(tmp_path / "m")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err
    bad = tmp_path / "bad.toml"
    bad.write_text("[experiment]\nfolds = 1\n", encoding="utf-8")
    assert main(["-q", "experiment", "--config", str(bad), "--out", str(tmp_path / "run")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_experiment_end_to_end(tmp_path: Path, temp_cache: Path) -> None:
    config = tmp_path / "smoke.toml"
    config.write_text(TINY_EXPERIMENT, encoding="utf-8")
    run = tmp_path / "run"
    assert main(["-q", "experiment", "--config", str(config), "--out", str(run)]) == 0

    report = json.loads((run / "report.json").read_text())
    assert set(report["cells"]) == {"gs"}
    assert set(report["baseline"]) == {"ihcch"}
    assert report["failed"] == []
    assert set(report["cells"]["gs"]["mean"]) == {"source_f1", "target_f1", "delta_pi", "pi_accuracy"}
    assert len(report["cells"]["gs"]["folds"]) == 1
    assert (run / "cells" / "gs" / "fold0.ckpt").is_file()
    assert (run / "anova.csv").is_file()

    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["root_seed"] == 5
    paths = {a["path"] for a in manifest["artifacts"]}
    assert "report.json" in paths and "cells/gs/fold0.ckpt" in paths
    for a in manifest["artifacts"]:
        assert storage.sha256_file(run / a["path"]) == a["sha256"]

    runs = db.list_runs()
    assert len(runs) == 1 and runs[0]["status"] == "ok"
    assert any(m["cell_id"] == "ihcch" for m in db.list_metrics(runs[0]["run_id"]))
    values = registered_metrics(manifest["run_id"])
    assert values[("gs", "target_f1")] == pytest.approx(report["cells"]["gs"]["mean"]["target_f1"], nan_ok=True)
    assert values[("ihcch", "target_f1")] == pytest.approx(report["baseline"]["ihcch"]["mean"]["target_f1"], nan_ok=True)

    # the cached datasets are reused and the metrics repeat exactly
    again = tmp_path / "again"
    assert main(["-q", "experiment", "--config", str(config), "--out", str(again)]) == 0
    assert (again / "report.json").read_text() == (run / "report.json").read_text()

    assert main(["-q", "report", str(run), "--overlays", "1"]) == 0
    figures = run / "figures"
    assert (figures / "f1_distribution.csv").is_file()
    assert (figures / "delta_pi_bins.csv").is_file()
    assert list(figures.glob("overlay_gs_*.png"))
    assert main(["-q", "report", "--list-runs"]) == 0


def _registered_run(root: Path, run_id: str, gs: float, ss: float) -> Path:
    db.insert_run(RunManifest(run_id=run_id, config_hash="abc", root_seed=0, tool_version="0.4.0"))
    db.insert_metrics(run_id, [("gs", "delta_pi", gs), ("ss@100", "delta_pi", ss)])
    run = root / run_id
    storage.write_json(run / "manifest.json", {"run_id": run_id})
    return run


def test_report_compare_reads_the_registry(tmp_path: Path, temp_db: str, capsys: pytest.CaptureFixture) -> None:
    runs = [
        _registered_run(tmp_path, "r1", 8.0, 5.0),
        _registered_run(tmp_path, "r2", 9.0, 5.5),
        _registered_run(tmp_path, "r3", 7.5, 5.2),
    ]
    out = tmp_path / "cmp.json"
    # a run directory and a bare run id resolve to the same registry rows
    refs = [str(runs[0]), "r2", str(runs[2])]
    rc = main(["-q", "report", *refs, "--compare", "ss@100", "gs", "--out", str(out)])
    assert rc == 0
    result = json.loads(out.read_text())
    assert result["n"] == 3
    assert result["runs"] == ["r1", "r2", "r3"]
    assert result["values"][1] == [5.5, 9.0]
    assert result["t"] < 0 and result["p"] < 0.05
    assert "ss@100 < gs" in capsys.readouterr().out


def test_report_compare_rejects_unknown_runs_and_cells(tmp_path: Path, temp_db: str) -> None:
    run = _registered_run(tmp_path, "r1", 8.0, 5.0)
    _registered_run(tmp_path, "r2", 9.0, 5.5)
    out = tmp_path / "cmp.json"
    assert main(["-q", "report", str(run), "r2", "--compare", "ss@100", "tl", "--out", str(out)]) == 2
    assert main(["-q", "report", "r1", "never-ran", "--compare", "ss@100", "gs", "--out", str(out)]) == 2
    assert not out.exists()


def test_oversized_ss_increment_fails_only_its_cell(tmp_path: Path, temp_cache: Path, capsys: pytest.CaptureFixture) -> None:
    config = tmp_path / "ss.toml"
    text = TINY_EXPERIMENT.replace('regimes = ["gs"]', 'regimes = ["gs", "ss"]\nss_increments = [5000]')
    config.write_text(text, encoding="utf-8")
    run = tmp_path / "run"
    assert main(["-q", "experiment", "--config", str(config), "--out", str(run)]) == 1
    err = capsys.readouterr().err
    assert "cell ss@5000 failed: InsufficientPatchesError" in err
    assert "5000 required" in err

    report = json.loads((run / "report.json").read_text())
    assert set(report["cells"]) == {"gs"}
    assert set(report["baseline"]) == {"ihcch"}
    assert [f["cell"] for f in report["failed"]] == ["ss@5000"]
    assert db.list_runs()[0]["status"] == "failed"


def test_train_folds_use_the_experiment_seeds(tmp_path: Path) -> None:
    src = tmp_path / "target"
    assert main(["-q", "synth", "--preset", "target", "--n", "2", "--size", "128", "--out", str(src)]) == 0
    data = tmp_path / "data"
    assert main(["-q", "gen-ss", "--in", str(src / "images"), "--increment", "6", "--patch-size", "32", "--out", str(data)]) == 0

    model_dir = tmp_path / "model"
    rc = main([
        "-q", "train", "--regime", "gs", "--gs", str(data), "--folds", "3", "--max-folds", "1",
        "--epochs", "1", "--seed", "4", "--out", str(model_dir),
    ])
    assert rc == 0
    model, header = load_checkpoint(model_dir / "fold0.ckpt")
    assert header["seed"] == fold_seed(4, 0)

    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, epochs=1, seed=4, folds=3)
    expected = cross_validate(
        load_dataset(data),
        3,
        lambda pool, k: run_regime(Regime(RegimeKind.GS_ONLY), pool, [], replace(cfg, seed=fold_seed(4, k))),
        seed=substream_seed(4, "cv"),
        limit=1,
    )[0].result.model
    for got, want in zip(model.weights, expected.weights):
        assert np.array_equal(got, want.astype(np.float32).astype(np.float64))
