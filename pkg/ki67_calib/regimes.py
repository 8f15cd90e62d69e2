"""Training regimes and cross-validation.

Five ways to combine source gold-standard (GS) and target silver-standard
(SS) data:

    gs      train on GS
    ss      train on SS
    mixed   train on GS and SS shuffled together
    gs+ss   train on GS, fine-tune on SS
    ss+gs   train on SS, fine-tune on GS
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Generic, List, Optional, Sequence, TypeVar

import numpy as np

from .detector import MiniDetector
from .errors import InsufficientPatchesError, MissingDatasetError, TooFewSamplesError
from .labels import LabelledPatch
from .seeding import substream, substream_seed
from .training import TrainConfig, TrainResult, train

logger = logging.getLogger(__name__)

T = TypeVar("T")


class RegimeKind(str, enum.Enum):
    GS_ONLY = "gs"
    SS_ONLY = "ss"
    MIXED = "mixed"
    GS_THEN_SS = "gs+ss"
    SS_THEN_GS = "ss+gs"

    @classmethod
    def parse(cls, value: str) -> "RegimeKind":
        v = (value or "").strip().lower()
        for member in cls:
            if v == member.value:
                return member
        raise ValueError(f"Unsupported regime: {value!r} (use {', '.join(m.value for m in cls)})")

    @property
    def uses_ss(self) -> bool:
        return self != RegimeKind.GS_ONLY

    @property
    def uses_gs(self) -> bool:
        return self != RegimeKind.SS_ONLY


@dataclass(frozen=True)
class Regime:
    kind: RegimeKind
    ss_increment: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", RegimeKind(self.kind))
        if self.kind.uses_ss:
            if self.ss_increment is None or self.ss_increment <= 0:
                raise ValueError(f"regime {self.kind.value} needs a positive ss_increment")
        elif self.ss_increment is not None:
            raise ValueError("gs regime takes no ss_increment")

    @property
    def label(self) -> str:
        if self.ss_increment is None:
            return self.kind.value
        return f"{self.kind.value}@{self.ss_increment}"


@dataclass
class RegimeResult:
    regime: Regime
    model: MiniDetector
    stages: List[TrainResult] = field(default_factory=list)


def mixed_pool(gs_data: Sequence[LabelledPatch], ss_data: Sequence[LabelledPatch], seed: int) -> List[LabelledPatch]:
    pool = list(gs_data) + list(ss_data)
    order = substream(seed, "mixed").permutation(len(pool))
    return [pool[i] for i in order]


def ss_subset(ss_data: Sequence[LabelledPatch], increment: int) -> List[LabelledPatch]:
    """The first `increment` SS patches (SS datasets are built nested)."""
    if len(ss_data) < increment:
        raise InsufficientPatchesError(len(ss_data), increment)
    return list(ss_data[:increment])


def run_regime(
    regime: Regime,
    gs_data: Optional[Sequence[LabelledPatch]],
    ss_data: Optional[Sequence[LabelledPatch]],
    cfg: TrainConfig,
    *,
    progress: bool = False,
) -> RegimeResult:
    """Train a fresh model (seeded from cfg.seed) under one regime.

    Fine-tuning stages reuse cfg with fresh Adam state and run
    cfg.stage_two_epochs epochs.
    """
    if regime.kind.uses_gs and not gs_data:
        raise MissingDatasetError(f"regime {regime.label} needs GS data")
    if regime.kind.uses_ss and not ss_data:
        raise MissingDatasetError(f"regime {regime.label} needs SS data")
    ss = ss_subset(ss_data, regime.ss_increment) if regime.kind.uses_ss else []
    gs = list(gs_data or [])

    model = MiniDetector.initialize(substream_seed(cfg.seed, "init"))
    kind = regime.kind
    if kind == RegimeKind.GS_ONLY:
        plan = [(gs, None, "gs")]
    elif kind == RegimeKind.SS_ONLY:
        plan = [(ss, None, "ss")]
    elif kind == RegimeKind.MIXED:
        plan = [(mixed_pool(gs, ss, cfg.seed), None, "mixed")]
    elif kind == RegimeKind.GS_THEN_SS:
        plan = [(gs, None, "gs"), (ss, cfg.stage_two_epochs, "finetune ss")]
    else:
        plan = [(ss, None, "ss"), (gs, cfg.stage_two_epochs, "finetune gs")]

    stages: List[TrainResult] = []
    for i, (data, epochs, name) in enumerate(plan):
        stage_cfg = cfg if i == 0 else replace(cfg, seed=substream_seed(cfg.seed, "finetune"))
        logger.info("%s: stage %s on %d patches", regime.label, name, len(data))
        res = train(model, data, stage_cfg, epochs=epochs, progress=progress, desc=f"{regime.label} {name}")
        stages.append(res)
        model = res.model
    return RegimeResult(regime=regime, model=model, stages=stages)


# ---------------------------
# Cross-validation
# ---------------------------

def fold_partition(n: int, folds: int, seed: int) -> List[np.ndarray]:
    """Seeded split of range(n) into `folds` near-equal sorted subsets."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if n < folds:
        raise TooFewSamplesError(f"{n} samples cannot fill {folds} folds")
    perm = substream(seed, "folds").permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def fold_seed(root_seed: int, fold: int) -> int:
    """Training seed of one cross-validation fold."""
    return substream_seed(root_seed, "train", fold)


@dataclass
class FoldRun(Generic[T]):
    fold: int
    held_out: np.ndarray
    train_indices: np.ndarray
    result: T


def cross_validate(
    gs_data: Sequence[LabelledPatch],
    folds: int,
    runner: Callable[[List[LabelledPatch], int], T],
    *,
    seed: int = 0,
    limit: Optional[int] = None,
) -> List[FoldRun[T]]:
    """Hold out each fold in turn and call runner(train_pool, fold_index).

    `limit` runs only the first folds of the partition (quick experiments).
    """
    parts = fold_partition(len(gs_data), folds, seed)
    runs: List[FoldRun[T]] = []
    for k, held in enumerate(parts[: limit or folds]):
        train_idx = np.sort(np.concatenate([p for j, p in enumerate(parts) if j != k]))
        logger.info("fold %d/%d: %d train, %d held out", k + 1, folds, len(train_idx), len(held))
        result = runner([gs_data[i] for i in train_idx], k)
        runs.append(FoldRun(fold=k, held_out=held, train_indices=train_idx, result=result))
    return runs
