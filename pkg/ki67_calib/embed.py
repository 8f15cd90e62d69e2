"""Exact t-SNE of detector features, for source/target alignment checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.neighbors import NearestNeighbors

from .detector import MiniDetector, pooled_features
from .errors import DegenerateInputError, TooFewSamplesError
from .models import RgbImage

logger = logging.getLogger(__name__)

SOURCE = "source"
TARGET = "target"
PERPLEXITY_TOL = 1e-4
BISECTION_STEPS = 64
_LOG_BETA_RANGE = (-60.0, 60.0)
_FLOOR = 1e-12


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 15.0
    output_dims: int = 2
    iterations: int = 1000
    early_exaggeration: float = 4.0
    exaggeration_iterations: int = 100
    learning_rate: float = 100.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    min_gain: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.perplexity <= 0:
            raise ValueError("perplexity must be > 0")
        if self.output_dims < 1:
            raise ValueError("output_dims must be >= 1")
        if self.iterations < 250:
            raise ValueError("iterations must be >= 250")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass(frozen=True)
class FeatureMatrix:
    rows: np.ndarray
    domains: Tuple[str, ...]
    ids: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError("feature rows must form a 2-D matrix")
        if not np.all(np.isfinite(rows)):
            raise ValueError("feature matrix holds non-finite values")
        if len(self.domains) != rows.shape[0]:
            raise ValueError("one domain tag per row required")
        ids = tuple(self.ids) or tuple(str(i) for i in range(rows.shape[0]))
        if len(ids) != rows.shape[0]:
            raise ValueError("one id per row required")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "domains", tuple(self.domains))
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return int(self.rows.shape[0])


def feature_matrix(model: MiniDetector, patches: Iterable[Tuple[str, str, RgbImage]]) -> FeatureMatrix:
    """Rows from (id, domain, patch) triples: mean-pooled feature layer."""
    ids, domains, rows = [], [], []
    for pid, domain, patch in patches:
        ids.append(pid)
        domains.append(domain)
        rows.append(pooled_features(model, patch))
    return FeatureMatrix(np.array(rows).reshape(len(rows), -1), tuple(domains), tuple(ids))


# ---------------------------
# Affinities
# ---------------------------

def _row_distribution(d: np.ndarray, log_beta: float) -> Tuple[np.ndarray, float]:
    """Conditional distribution for one row of squared distances (self
    excluded) and its perplexity."""
    beta = np.exp(log_beta)
    shifted = d - d.min()
    p = np.exp(-shifted * beta)
    total = p.sum()
    p /= total
    entropy = np.log(total) + beta * float(np.dot(shifted, p))
    return p, float(np.exp(entropy))


def conditional_affinities(X: np.ndarray, perplexity: float) -> np.ndarray:
    """Row-stochastic p(j|i), each row calibrated to the target perplexity
    by bisection on log precision."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 3 * perplexity + 1:
        raise TooFewSamplesError(f"{n} points cannot carry perplexity {perplexity} (need >= {3 * perplexity + 1:g})")
    D = cdist(X, X, "sqeuclidean")
    P = np.zeros((n, n))
    failed: List[int] = []
    for i in range(n):
        d = np.delete(D[i], i)
        lo, hi = _LOG_BETA_RANGE
        p, perp = _row_distribution(d, 0.0)
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            p, perp = _row_distribution(d, mid)
            if abs(perp - perplexity) <= PERPLEXITY_TOL:
                break
            if perp > perplexity:
                lo = mid
            else:
                hi = mid
        if abs(perp - perplexity) > 1e-3:
            failed.append(i)
        P[i, np.arange(n) != i] = p
    if failed:
        raise DegenerateInputError(f"perplexity {perplexity} unreachable for {len(failed)} points", failed)
    return P


def pairwise_affinities(X: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetric joint affinities P, summing to 1."""
    rows = X.rows if isinstance(X, FeatureMatrix) else X
    cond = conditional_affinities(rows, perplexity)
    P = cond + cond.T
    return P / P.sum()


def achieved_perplexity(cond: np.ndarray) -> np.ndarray:
    """Perplexity of each row of a conditional affinity matrix."""
    safe = np.where(cond > 0, cond, 1.0)
    return np.exp(-(cond * np.log(safe)).sum(axis=1))


# ---------------------------
# Embedding
# ---------------------------

@dataclass
class TsneResult:
    embedding: np.ndarray
    kl: List[float] = field(default_factory=list)  # KL(P || Q) after each iteration


def _kl(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne(X, cfg: TsneConfig = TsneConfig()) -> TsneResult:
    """Gradient descent on KL(P || Q) with a Student-t Q.

    Rows are processed in a canonical (lexicographic) order and the result
    is mapped back, so permuting the input rows permutes the output rows.
    """
    rows = X.rows if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
    n = rows.shape[0]
    canon = np.lexsort(rows.T[::-1])
    P = pairwise_affinities(rows[canon], cfg.perplexity)
    P = np.maximum(P, _FLOOR)
    np.fill_diagonal(P, 0.0)

    rng = np.random.default_rng(cfg.seed)
    Y = rng.normal(0.0, 1e-4, size=(n, cfg.output_dims))
    Y -= Y.mean(axis=0)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    result = TsneResult(embedding=Y)

    for it in range(1, cfg.iterations + 1):
        exaggeration = cfg.early_exaggeration if it <= cfg.exaggeration_iterations else 1.0
        momentum = cfg.momentum if it < cfg.momentum_switch else cfg.final_momentum

        num = 1.0 / (1.0 + cdist(Y, Y, "sqeuclidean"))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), _FLOOR)
        np.fill_diagonal(Q, 0.0)

        W = (exaggeration * P - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y

        same_sign = np.sign(grad) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, cfg.min_gain)
        update = momentum * update - cfg.learning_rate * gains * grad
        Y = Y + update
        Y -= Y.mean(axis=0)

        num = 1.0 / (1.0 + cdist(Y, Y, "sqeuclidean"))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), _FLOOR)
        result.kl.append(_kl(P, Q))
        if it % 250 == 0:
            logger.debug("t-SNE iteration %d: KL %.5f", it, result.kl[-1])

    out = np.empty_like(Y)
    out[canon] = Y
    result.embedding = out
    return result


def domain_overlap_score(embedding: np.ndarray, domains: Sequence[str], k: int = 10) -> float:
    """Fraction of points with at least one other-domain point among their
    k nearest neighbours; 1.0 means fully mixed."""
    emb = np.asarray(embedding, dtype=np.float64)
    tags = np.asarray(domains)
    if len(tags) != emb.shape[0]:
        raise ValueError("one domain tag per embedded point required")
    if len(set(tags.tolist())) < 2:
        raise ValueError("both domains must be present")
    k = min(k, emb.shape[0] - 1)
    nn = NearestNeighbors(n_neighbors=k + 1).fit(emb)
    _, idx = nn.kneighbors(emb)
    mixed = 0
    for i, neigh in enumerate(idx):
        others = [j for j in neigh if j != i][:k]
        if np.any(tags[others] != tags[i]):
            mixed += 1
    return mixed / emb.shape[0]
