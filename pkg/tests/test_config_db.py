import datetime as dt
from pathlib import Path

import pytest

from ki67_calib import db
from ki67_calib.config import load_config, parse_config
from ki67_calib.errors import ConfigError
from ki67_calib.ihcch import BSplit
from ki67_calib.models import ArtifactRecord, RunManifest
from ki67_calib.regimes import RegimeKind


def test_empty_config_uses_defaults() -> None:
    cfg = parse_config("")
    assert cfg.regimes == tuple(RegimeKind)
    assert cfg.ss_increments == (100,)
    assert cfg.folds == 3 and cfg.folds_to_run == 3
    assert cfg.train.finetune_epochs is None
    assert cfg.match.radius_um == 6.0
    assert [r.label for r in cfg.cells()] == ["gs", "ss@100", "mixed@100", "gs+ss@100", "ss+gs@100"]


def test_config_values_flow_into_sections() -> None:
    text = """
[experiment]
root_seed = 7
regimes = ["gs", "ss"]
ss_increments = [50, 100]
max_folds = 1

[ihcch]
b_split = "fixed_zero"

[train]
epochs = 2
finetune_epochs = 1
learning_rate = 0.01
"""
    cfg = parse_config(text)
    assert cfg.train.seed == 7
    assert cfg.train.stage_two_epochs == 1
    assert cfg.ihcch.b_split is BSplit.FIXED_ZERO
    assert cfg.folds_to_run == 1
    assert [r.label for r in cfg.cells()] == ["gs", "ss@50", "ss@100"]
    assert cfg.to_dict()["train"]["epochs"] == 2
    assert cfg.to_dict()["eval"]["radius_um"] == 6.0
    assert cfg.config_hash() == parse_config(text).config_hash()
    assert cfg.config_hash() != parse_config("").config_hash()


@pytest.mark.parametrize(
    "text, line",
    [
        ("[experiment]\nname = 'x'\nbogus = 1\n", 3),
        ("[experiment]\nname = 'x'\n\n[plots]\ndpi = 3\n", 4),
        ("[experiment]\nfolds = 'three'\n", 2),
        ("[experiment]\nfolds = 1\n", 2),
        ("[experiment]\nfolds = 3\nmax_folds = 4\n", 3),
        ("[experiment]\nregimes = ['gs', 'transfer']\n", 2),
        ("[synth]\nseverity = 1.5\n", 2),
        ("[train]\nepochs = 0\n", None),
        ("[eval]\npeak_threshold = 1.0\n", 2),
    ],
)
def test_config_errors_name_the_line(text: str, line) -> None:
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    if line is not None:
        assert info.value.line == line
        assert f"line {line}" in str(info.value)


def test_invalid_toml_and_missing_file(tmp_path: Path) -> None:
    with pytest.raises(ConfigError):
        parse_config("[experiment\nname = 1")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    path = tmp_path / "exp.toml"
    path.write_text("[experiment]\nname = 'demo'\n", encoding="utf-8")
    assert load_config(path).name == "demo"


def _manifest(run_id: str, minute: int) -> RunManifest:
    return RunManifest(
        run_id=run_id,
        config_hash="abc",
        root_seed=1,
        tool_version="0.4.0",
        started_at=dt.datetime(2024, 1, 1, 12, minute, tzinfo=dt.timezone.utc),
    )


def test_registry_runs_roundtrip(temp_db: str) -> None:
    db.insert_run(_manifest("r2", 5))
    db.insert_run(_manifest("r1", 1))
    assert [r["run_id"] for r in db.list_runs()] == ["r1", "r2"]
    assert db.get_run("r1")["status"] == "running"
    db.finish_run("r1", "ok", "2024-01-01T13:00:00+00:00")
    row = db.get_run("r1")
    assert (row["status"], row["finished_at"]) == ("ok", "2024-01-01T13:00:00+00:00")
    assert db.get_run("nope") is None


def test_registry_artifacts_and_metrics(temp_db: str) -> None:
    db.insert_run(_manifest("r1", 1))
    db.insert_run(_manifest("r2", 2))
    assert db.insert_artifacts("r1", [ArtifactRecord("b.csv", "00", "table"), ArtifactRecord("a.ckpt", "11", "checkpoint")]) == 2
    db.insert_metrics("r1", [("gs", "target_f1", 0.7), ("gs", "delta_pi", float("nan"))])
    db.insert_metrics("r2", [("gs", "target_f1", 0.8)])
    metrics = {(m["cell_id"], m["metric"]): m["value"] for m in db.list_metrics("r1")}
    assert metrics == {("gs", "target_f1"): 0.7, ("gs", "delta_pi"): None}
    assert [m["value"] for m in db.list_metrics("r2")] == [0.8]


def test_rerecording_a_metric_replaces_it(temp_db: str) -> None:
    db.insert_run(_manifest("r1", 1))
    db.insert_metrics("r1", [("gs", "target_f1", 0.7)])
    db.insert_metrics("r1", [("gs", "target_f1", 0.75)])
    assert db.list_metrics("r1") == [{"cell_id": "gs", "metric": "target_f1", "value": 0.75}]
