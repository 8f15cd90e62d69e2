import numpy as np
import pytest

from ki67_calib.errors import InsufficientPatchesError, MissingDatasetError, TooFewSamplesError
from ki67_calib.labels import labelled_from_annotations
from ki67_calib.regimes import (
    Regime,
    RegimeKind,
    cross_validate,
    fold_partition,
    mixed_pool,
    run_regime,
    ss_subset,
)
from ki67_calib.synth import SOURCE_PRESET, gen_patch, target_preset
from ki67_calib.training import TrainConfig

TINY = TrainConfig(learning_rate=1e-2, batch_size=2, epochs=1, validation_fraction=0.0, augment=False, seed=1)


def _samples(n: int, params=SOURCE_PRESET, prefix: str = "G"):
    out = []
    for i in range(n):
        img, gt = gen_patch(params, 30.0, i, size=16)
        out.append(labelled_from_annotations(img, gt.centroids, 2.0, source_id=f"{prefix}{i}"))
    return out


def test_regime_kind_parse_and_labels() -> None:
    assert RegimeKind.parse(" GS+SS ") is RegimeKind.GS_THEN_SS
    with pytest.raises(ValueError):
        RegimeKind.parse("transfer")
    assert Regime(RegimeKind.GS_ONLY).label == "gs"
    assert Regime("mixed", 50).label == "mixed@50"


def test_regime_increment_rules() -> None:
    with pytest.raises(ValueError):
        Regime(RegimeKind.SS_ONLY)
    with pytest.raises(ValueError):
        Regime(RegimeKind.MIXED, 0)
    with pytest.raises(ValueError):
        Regime(RegimeKind.GS_ONLY, 10)


def test_fold_partition_covers_every_index_once() -> None:
    parts = fold_partition(11, 3, seed=4)
    assert sorted(len(p) for p in parts) == [3, 4, 4]
    assert sorted(np.concatenate(parts).tolist()) == list(range(11))
    again = fold_partition(11, 3, seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(parts, again))
    with pytest.raises(TooFewSamplesError):
        fold_partition(2, 3, seed=0)
    with pytest.raises(ValueError):
        fold_partition(10, 1, seed=0)


def test_cross_validate_holds_out_each_fold() -> None:
    data = _samples(6)
    seen = []

    def runner(pool, k):
        seen.append((k, sorted(s.source_id for s in pool)))
        return len(pool)

    runs = cross_validate(data, 3, runner, seed=2)
    assert [r.fold for r in runs] == [0, 1, 2]
    assert all(r.result == 4 for r in runs)
    for r in runs:
        held = {data[i].source_id for i in r.held_out}
        assert held.isdisjoint(seen[r.fold][1])
    limited = cross_validate(data, 3, runner, seed=2, limit=1)
    assert len(limited) == 1


def test_ss_subset_and_mixed_pool() -> None:
    gs = _samples(2)
    ss = _samples(3, target_preset(), "S")
    assert [s.source_id for s in ss_subset(ss, 2)] == ["S0", "S1"]
    with pytest.raises(InsufficientPatchesError):
        ss_subset(ss, 4)
    pool = mixed_pool(gs, ss, seed=5)
    assert sorted(s.source_id for s in pool) == ["G0", "G1", "S0", "S1", "S2"]
    assert [s.source_id for s in mixed_pool(gs, ss, seed=5)] == [s.source_id for s in pool]


@pytest.mark.parametrize("kind", list(RegimeKind))
def test_run_regime_every_kind(kind: RegimeKind) -> None:
    gs = _samples(2)
    ss = _samples(2, target_preset(), "S")
    regime = Regime(kind, None if kind is RegimeKind.GS_ONLY else 2)
    result = run_regime(regime, gs, ss, TINY)
    expected_stages = 2 if kind in (RegimeKind.GS_THEN_SS, RegimeKind.SS_THEN_GS) else 1
    assert len(result.stages) == expected_stages
    assert result.model is result.stages[-1].model


def test_run_regime_is_reproducible() -> None:
    gs = _samples(2)
    ss = _samples(2, target_preset(), "S")
    a = run_regime(Regime(RegimeKind.GS_THEN_SS, 2), gs, ss, TINY)
    b = run_regime(Regime(RegimeKind.GS_THEN_SS, 2), gs, ss, TINY)
    assert all(np.array_equal(x, y) for x, y in zip(a.model.weights, b.model.weights))


def test_run_regime_needs_its_datasets() -> None:
    with pytest.raises(MissingDatasetError):
        run_regime(Regime(RegimeKind.GS_ONLY), [], None, TINY)
    with pytest.raises(MissingDatasetError):
        run_regime(Regime(RegimeKind.MIXED, 2), _samples(1), None, TINY)
