"""Experiment configuration (TOML).

A config file holds flat keys inside the sections below; every key is
optional and falls back to the default shown. Unknown sections or keys and
out-of-range values raise ConfigError naming the offending line.

    [experiment]  name, root_seed, jobs, regimes, ss_increments, folds,
                  max_folds, tsne, ihcch_baseline
    [data]        gs_dir, target_dir
    [synth]       gs_patches, ss_tmas, target_patients, annotated_tmas,
                  severity, tma_size, patch_size, artifact_rate,
                  core_radius_fraction
    [ihcch]       median_window, background_l_threshold, b_split,
                  min_nucleus_radius_px, max_nucleus_radius_px
    [train]       learning_rate, batch_size, epochs, finetune_epochs,
                  huber_delta, validation_fraction, sigma_px
    [eval]        radius_um, microns_per_pixel, peak_threshold
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import toml

from .errors import ConfigError
from .ihcch import BSplit, IhcchConfig
from .labels import DEFAULT_PEAK_THRESHOLD, DEFAULT_SIGMA_PX
from .metrics import MatchConfig
from .regimes import Regime, RegimeKind
from .storage import sha256_json
from .training import TrainConfig

SCHEMA: Dict[str, Dict[str, Any]] = {
    "experiment": {
        "name": "ki67-calibration",
        "root_seed": 0,
        "jobs": 1,
        "regimes": ["gs", "ss", "mixed", "gs+ss", "ss+gs"],
        "ss_increments": [100],
        "folds": 3,
        "max_folds": 0,  # 0: run every fold
        "tsne": True,
        "ihcch_baseline": True,
    },
    "data": {
        "gs_dir": "",
        "target_dir": "",
    },
    "synth": {
        "gs_patches": 300,
        "ss_tmas": 10,
        "target_patients": 20,
        "annotated_tmas": 10,
        "severity": 0.6,
        "tma_size": 2000,
        "patch_size": 256,
        "artifact_rate": 0.15,
        "core_radius_fraction": 0.48,
    },
    "ihcch": {
        "median_window": 3,
        "background_l_threshold": 85.0,
        "b_split": "valley",
        "min_nucleus_radius_px": 2.5,
        "max_nucleus_radius_px": 12.0,
    },
    "train": {
        "learning_rate": 1e-3,
        "batch_size": 4,
        "epochs": 30,
        "finetune_epochs": -1,  # -1: same as epochs
        "huber_delta": 1.0,
        "validation_fraction": 0.15,
        "sigma_px": DEFAULT_SIGMA_PX,
    },
    "eval": {
        "radius_um": 6.0,
        "microns_per_pixel": 0.5,
        "peak_threshold": DEFAULT_PEAK_THRESHOLD,
    },
}


@dataclass(frozen=True)
class SynthSettings:
    gs_patches: int
    ss_tmas: int
    target_patients: int
    annotated_tmas: int
    severity: float
    tma_size: int
    patch_size: int
    artifact_rate: float
    core_radius_fraction: float


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "ki67-calibration"
    root_seed: int = 0
    jobs: int = 1
    regimes: Tuple[RegimeKind, ...] = tuple(RegimeKind)
    ss_increments: Tuple[int, ...] = (100,)
    folds: int = 3
    max_folds: int = 0
    tsne: bool = True
    ihcch_baseline: bool = True
    gs_dir: Optional[Path] = None
    target_dir: Optional[Path] = None
    synth: SynthSettings = field(default_factory=lambda: SynthSettings(**SCHEMA["synth"]))
    ihcch: IhcchConfig = field(default_factory=IhcchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sigma_px: float = DEFAULT_SIGMA_PX
    match: MatchConfig = field(default_factory=MatchConfig)
    peak_threshold: float = DEFAULT_PEAK_THRESHOLD
    raw: Dict[str, Dict[str, Any]] = field(default_factory=dict, compare=False, repr=False)

    def cells(self) -> List[Regime]:
        """The regime x increment matrix, in a stable order."""
        out: List[Regime] = []
        for kind in self.regimes:
            if kind.uses_ss:
                out.extend(Regime(kind, inc) for inc in self.ss_increments)
            else:
                out.append(Regime(kind))
        return out

    @property
    def folds_to_run(self) -> int:
        return self.max_folds or self.folds

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        """Every section with defaults filled in."""
        merged = {s: dict(keys) for s, keys in SCHEMA.items()}
        for section, values in self.raw.items():
            merged[section].update(values)
        return merged

    def config_hash(self) -> str:
        return sha256_json(self.to_dict())[:16]


def _line_of(text: str, section: str, key: Optional[str] = None) -> Optional[int]:
    """1-based line of `[section]` or of `key` inside it."""
    current = None
    header = re.compile(r"^\s*\[\s*([^\]]+?)\s*\]")
    for no, line in enumerate(text.splitlines(), start=1):
        m = header.match(line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section and re.match(rf"^\s*{re.escape(key)}\s*=", line):
            return no
    return None


def _check_type(value: Any, default: Any) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = toml.loads(text)
    except toml.TomlDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc.msg}", getattr(exc, "lineno", None)) from exc

    raw: Dict[str, Dict[str, Any]] = {}
    for section, values in doc.items():
        if section not in SCHEMA or not isinstance(values, dict):
            raise ConfigError(f"unknown section [{section}]", _line_of(text, section))
        for key, value in values.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}", _line_of(text, section, key))
            if not _check_type(value, SCHEMA[section][key]):
                raise ConfigError(
                    f"{section}.{key} should be {type(SCHEMA[section][key]).__name__}, got {value!r}",
                    _line_of(text, section, key),
                )
        raw[section] = dict(values)

    def get(section: str, key: str) -> Any:
        return raw.get(section, {}).get(key, SCHEMA[section][key])

    def build(section: str, key: str, fn):
        try:
            return fn()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{section}.{key}: {exc}", _line_of(text, section, key) or _line_of(text, section)) from exc

    regimes = build("experiment", "regimes", lambda: tuple(RegimeKind.parse(r) for r in get("experiment", "regimes")))
    increments = build("experiment", "ss_increments", lambda: tuple(int(v) for v in get("experiment", "ss_increments")))
    if not regimes:
        raise ConfigError("experiment.regimes is empty", _line_of(text, "experiment", "regimes"))
    if any(r.uses_ss for r in regimes) and (not increments or min(increments) <= 0):
        raise ConfigError("experiment.ss_increments needs positive values", _line_of(text, "experiment", "ss_increments"))
    for key in ("jobs", "folds"):
        minimum = 1 if key == "jobs" else 2
        if get("experiment", key) < minimum:
            raise ConfigError(f"experiment.{key} must be >= {minimum}", _line_of(text, "experiment", key))
    if not 0 <= get("experiment", "max_folds") <= get("experiment", "folds"):
        raise ConfigError("experiment.max_folds must lie in [0, folds]", _line_of(text, "experiment", "max_folds"))

    synth_values = {k: get("synth", k) for k in SCHEMA["synth"]}
    for key in ("gs_patches", "ss_tmas", "target_patients", "tma_size", "patch_size"):
        if synth_values[key] < 1:
            raise ConfigError(f"synth.{key} must be >= 1", _line_of(text, "synth", key))
    if synth_values["annotated_tmas"] < 0:
        raise ConfigError("synth.annotated_tmas must be >= 0", _line_of(text, "synth", "annotated_tmas"))
    if not 0.0 <= synth_values["severity"] <= 1.0:
        raise ConfigError("synth.severity must lie in [0, 1]", _line_of(text, "synth", "severity"))
    if not 0.0 <= synth_values["artifact_rate"] <= 1.0:
        raise ConfigError("synth.artifact_rate must lie in [0, 1]", _line_of(text, "synth", "artifact_rate"))
    if synth_values["patch_size"] > synth_values["tma_size"]:
        raise ConfigError("synth.patch_size exceeds synth.tma_size", _line_of(text, "synth", "patch_size"))

    mpp = float(get("eval", "microns_per_pixel"))
    ihcch = build("ihcch", "median_window", lambda: IhcchConfig(
        median_window=get("ihcch", "median_window"),
        background_l_threshold=float(get("ihcch", "background_l_threshold")),
        b_split=BSplit(get("ihcch", "b_split")),
        min_nucleus_radius_px=float(get("ihcch", "min_nucleus_radius_px")),
        max_nucleus_radius_px=float(get("ihcch", "max_nucleus_radius_px")),
        microns_per_pixel=mpp,
    ))
    finetune = get("train", "finetune_epochs")
    train = build("train", "learning_rate", lambda: TrainConfig(
        learning_rate=float(get("train", "learning_rate")),
        batch_size=get("train", "batch_size"),
        epochs=get("train", "epochs"),
        finetune_epochs=None if finetune < 0 else finetune,
        huber_delta=float(get("train", "huber_delta")),
        seed=get("experiment", "root_seed"),
        validation_fraction=float(get("train", "validation_fraction")),
        folds=get("experiment", "folds"),
    ))
    sigma = float(get("train", "sigma_px"))
    if sigma <= 0:
        raise ConfigError("train.sigma_px must be > 0", _line_of(text, "train", "sigma_px"))
    match = build("eval", "radius_um", lambda: MatchConfig(float(get("eval", "radius_um")), mpp))
    peak = float(get("eval", "peak_threshold"))
    if not 0.0 < peak < 1.0:
        raise ConfigError("eval.peak_threshold must lie in (0, 1)", _line_of(text, "eval", "peak_threshold"))

    gs_dir = get("data", "gs_dir")
    target_dir = get("data", "target_dir")
    return ExperimentConfig(
        name=get("experiment", "name"),
        root_seed=get("experiment", "root_seed"),
        jobs=get("experiment", "jobs"),
        regimes=regimes,
        ss_increments=increments,
        folds=get("experiment", "folds"),
        max_folds=get("experiment", "max_folds"),
        tsne=get("experiment", "tsne"),
        ihcch_baseline=get("experiment", "ihcch_baseline"),
        gs_dir=Path(gs_dir).expanduser() if gs_dir else None,
        target_dir=Path(target_dir).expanduser() if target_dir else None,
        synth=SynthSettings(**synth_values),
        ihcch=ihcch,
        train=train,
        sigma_px=sigma,
        match=match,
        peak_threshold=peak,
        raw=raw,
    )


def load_config(path: Path) -> ExperimentConfig:
    p = Path(path).expanduser()
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))
