import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from ki67_calib.detector import FEATURE_CHANNELS, MiniDetector
from ki67_calib.embed import (
    SOURCE,
    TARGET,
    FeatureMatrix,
    TsneConfig,
    achieved_perplexity,
    conditional_affinities,
    domain_overlap_score,
    feature_matrix,
    pairwise_affinities,
    tsne,
)
from ki67_calib.errors import DegenerateInputError, TooFewSamplesError
from ki67_calib.models import RgbImage


def _two_clusters(n: int = 15, dims: int = 5, gap: float = 20.0, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 1.0, size=(n, dims))
    b = rng.normal(0.0, 1.0, size=(n, dims))
    b[:, 0] += gap
    return np.vstack([a, b])


def test_conditional_affinities_hit_target_perplexity() -> None:
    X = np.random.default_rng(1).normal(size=(100, 5))
    cond = conditional_affinities(X, 15.0)
    assert np.allclose(cond.sum(axis=1), 1.0)
    assert np.all(np.diag(cond) == 0.0)
    assert np.allclose(achieved_perplexity(cond), 15.0, atol=1e-3)


def test_joint_affinities_are_symmetric_and_normalised() -> None:
    P = pairwise_affinities(np.random.default_rng(2).normal(size=(20, 3)), 4.0)
    assert np.allclose(P, P.T)
    assert P.sum() == pytest.approx(1.0)


def test_too_few_points_for_perplexity() -> None:
    with pytest.raises(TooFewSamplesError):
        conditional_affinities(np.random.default_rng(0).normal(size=(10, 2)), 5.0)


def test_identical_points_cannot_be_calibrated() -> None:
    with pytest.raises(DegenerateInputError) as info:
        conditional_affinities(np.ones((20, 3)), 5.0)
    assert len(info.value.indices) == 20


def test_tsne_separates_clusters_and_reduces_kl() -> None:
    X = _two_clusters()
    cfg = TsneConfig(perplexity=5.0, iterations=500)
    res = tsne(X, cfg)
    assert res.embedding.shape == (30, 2)
    assert len(res.kl) == 500
    assert res.kl[-1] < res.kl[cfg.exaggeration_iterations]
    a, b = res.embedding[:15], res.embedding[15:]
    spread = max(np.linalg.norm(a - a.mean(axis=0), axis=1).mean(), np.linalg.norm(b - b.mean(axis=0), axis=1).mean())
    assert np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)) > 2 * spread


def test_kl_keeps_falling_after_exaggeration() -> None:
    at_100, at_1000 = [], []
    for seed in range(10):
        X = np.random.default_rng(seed).normal(size=(100, 5))
        kl = tsne(X, TsneConfig(seed=seed)).kl
        at_100.append(kl[99])
        at_1000.append(kl[999])
    assert np.mean(at_1000) <= np.mean(at_100)


def test_separated_clusters_give_a_high_silhouette() -> None:
    X = _two_clusters(n=50)
    emb = tsne(X, TsneConfig(perplexity=15.0)).embedding
    labels = [0] * 50 + [1] * 50
    assert silhouette_score(emb, labels) > 0.5


def test_tsne_is_permutation_equivariant() -> None:
    X = _two_clusters(n=10, seed=4)
    cfg = TsneConfig(perplexity=5.0, iterations=250)
    perm = np.random.default_rng(9).permutation(len(X))
    base = tsne(X, cfg).embedding
    moved = tsne(X[perm], cfg).embedding
    assert np.allclose(moved, base[perm])


def test_tsne_config_validation() -> None:
    with pytest.raises(ValueError):
        TsneConfig(iterations=100)
    with pytest.raises(ValueError):
        TsneConfig(perplexity=0.0)


def test_domain_overlap_score() -> None:
    separated = np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [10.0, 10.0], [10.1, 10.0], [10.0, 10.1]])
    tags = [SOURCE] * 3 + [TARGET] * 3
    assert domain_overlap_score(separated, tags, k=2) == 0.0
    interleaved = [SOURCE, TARGET, SOURCE, TARGET, SOURCE, TARGET]
    assert domain_overlap_score(separated, interleaved, k=2) == 1.0
    with pytest.raises(ValueError):
        domain_overlap_score(separated, [SOURCE] * 6)
    with pytest.raises(ValueError):
        domain_overlap_score(separated, tags[:5])


def test_feature_matrix_from_patches(random_patch: RgbImage) -> None:
    fm = feature_matrix(MiniDetector.initialize(0), [("a", SOURCE, random_patch), ("b", TARGET, random_patch)])
    assert fm.rows.shape == (2, FEATURE_CHANNELS)
    assert fm.domains == (SOURCE, TARGET)
    assert fm.ids == ("a", "b")
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((2, 3)), (SOURCE,))
    with pytest.raises(ValueError):
        FeatureMatrix(np.array([[np.nan]]), (SOURCE,))
