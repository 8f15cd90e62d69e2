"""Loss, optimizer, augmentation and the training loop for MiniDetector."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage as ndi
from tqdm import tqdm

from .detector import MiniDetector, normalize_input
from .errors import EmptyDatasetError, ShapeMismatchError
from .labels import LabelledPatch
from .models import HeatmapLabel, RgbImage
from .seeding import substream

logger = logging.getLogger(__name__)

SCALE_RANGE = (0.8, 1.2)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    epochs: int = 30
    finetune_epochs: Optional[int] = None  # None: same as epochs
    huber_delta: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    validation_fraction: float = 0.15
    folds: int = 3
    augment: bool = True

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.finetune_epochs is not None and self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be >= 0")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be > 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")

    @property
    def stage_two_epochs(self) -> int:
        return self.epochs if self.finetune_epochs is None else self.finetune_epochs


# ---------------------------
# Loss / optimizer
# ---------------------------

def huber_loss(pred: np.ndarray, target: np.ndarray, delta: float = 1.0) -> Tuple[float, np.ndarray]:
    """Mean Huber loss over every element and its gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} vs target {target.shape}")
    r = pred - target
    a = np.abs(r)
    quad = a <= delta
    per = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    n = r.size
    grad = np.where(quad, r, delta * np.sign(r)) / n
    return float(per.sum() / n), grad


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def like(cls, weights: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(w) for w in weights], [np.zeros_like(w) for w in weights], 0)


def adam_step(
    weights: List[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    t: Optional[int] = None,
) -> Tuple[List[np.ndarray], AdamState]:
    """Bias-corrected Adam; t defaults to state.t + 1."""
    t = state.t + 1 if t is None else int(t)
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_w, new_m, new_v = [], [], []
    for w, g, m, v in zip(weights, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_w.append(w - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps))
        new_m.append(m)
        new_v.append(v)
    return new_w, AdamState(new_m, new_v, t)


# ---------------------------
# Augmentation
# ---------------------------

def _rescale(arr: np.ndarray, scale: float, mode: str) -> np.ndarray:
    """Isotropic zoom about the image centre, same output size (bilinear)."""
    h, w = arr.shape[:2]
    centre = np.array([h / 2.0 - 0.5, w / 2.0 - 0.5])
    inv = 1.0 / scale
    offset = centre - inv * centre
    out = np.empty_like(arr, dtype=np.float64)
    for ch in range(arr.shape[2]):
        out[..., ch] = ndi.affine_transform(
            arr[..., ch].astype(np.float64), np.array([inv, inv]), offset=offset,
            order=1, mode=mode, cval=0.0,
        )
    return out


def apply_transform_arrays(x: np.ndarray, y: np.ndarray, quarter_turns: int, scale: float) -> Tuple[np.ndarray, np.ndarray]:
    """Same rotation and zoom on an (H, W, C) image and (H, W, 2) label."""
    k = int(quarter_turns) % 4
    if k:
        x = np.rot90(x, k, axes=(0, 1))
        y = np.rot90(y, k, axes=(0, 1))
    if scale != 1.0:
        x = _rescale(x, scale, mode="nearest")
        y = np.clip(_rescale(y, scale, mode="constant"), 0.0, 1.0)
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


def apply_transform(patch: RgbImage, label: HeatmapLabel, quarter_turns: int, scale: float) -> Tuple[RgbImage, HeatmapLabel]:
    x, y = apply_transform_arrays(patch.data, label.stacked(), quarter_turns, scale)
    rgb = np.clip(np.rint(x), 0, 255).astype(np.uint8)
    return RgbImage(rgb), HeatmapLabel.from_stacked(y, label.sigma_px)


def draw_transform(rng: np.random.Generator) -> Tuple[int, float]:
    return int(rng.integers(4)), float(rng.uniform(*SCALE_RANGE))


def augment(patch: RgbImage, label: HeatmapLabel, seed: int) -> Tuple[RgbImage, HeatmapLabel]:
    turns, scale = draw_transform(np.random.default_rng(seed))
    return apply_transform(patch, label, turns, scale)


# ---------------------------
# Training loop
# ---------------------------

@dataclass
class TrainResult:
    model: MiniDetector
    train_losses: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    best_epoch: int = -1  # 0-based; -1 when no epoch ran

    @property
    def epochs_run(self) -> int:
        return len(self.train_losses)


def _arrays(sample: LabelledPatch) -> Tuple[np.ndarray, np.ndarray]:
    return normalize_input(sample.patch), sample.label.stacked()


def split_validation(n: int, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """(train indices, validation indices); at least one sample always trains."""
    order = rng.permutation(n)
    n_val = int(round(fraction * n))
    n_val = min(max(n_val, 1 if fraction > 0 and n >= 2 else 0), n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def evaluate_loss(model: MiniDetector, samples: Sequence[Tuple[np.ndarray, np.ndarray]], delta: float) -> float:
    losses = []
    for x, y in samples:
        pred, _ = model.forward_batch(x[None])
        losses.append(huber_loss(pred, y[None], delta)[0])
    return float(np.mean(losses))


def train(
    model: MiniDetector,
    dataset: Sequence[LabelledPatch],
    cfg: TrainConfig,
    *,
    epochs: Optional[int] = None,
    progress: bool = False,
    desc: str = "train",
) -> TrainResult:
    """Adam on mean Huber loss; returns the weights of the epoch with the
    lowest validation loss (training loss when there is no validation split).

    `epochs` overrides cfg.epochs and may be 0, which returns the model as is.
    """
    if not dataset:
        raise EmptyDatasetError("training dataset is empty")
    n_epochs = cfg.epochs if epochs is None else int(epochs)
    if n_epochs < 0:
        raise ValueError("epochs must be >= 0")

    rng = substream(cfg.seed, "train")
    arrays = [_arrays(s) for s in dataset]
    train_idx, val_idx = split_validation(len(arrays), cfg.validation_fraction, rng)
    val_set = [arrays[i] for i in val_idx]

    weights = [w.copy() for w in model.weights]
    state = AdamState.like(weights)
    result = TrainResult(model=model.copy())
    best_loss = np.inf
    working = MiniDetector(weights)

    for epoch in tqdm(range(n_epochs), desc=desc, disable=not progress):
        order = train_idx[rng.permutation(len(train_idx))]
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            xs, ys = [], []
            for i in order[start:start + cfg.batch_size]:
                x, y = arrays[i]
                if cfg.augment:
                    x, y = apply_transform_arrays(x, y, *draw_transform(rng))
                xs.append(x)
                ys.append(y)
            pred, cache = working.forward_batch(np.stack(xs))
            loss, dpred = huber_loss(pred, np.stack(ys), cfg.huber_delta)
            grads = working.backward(cache, dpred)
            weights, state = adam_step(weights, grads, state, cfg)
            working = MiniDetector(weights)
            batch_losses.append(loss)

        train_loss = float(np.mean(batch_losses))
        val_loss = evaluate_loss(working, val_set, cfg.huber_delta) if val_set else train_loss
        result.train_losses.append(train_loss)
        result.val_losses.append(val_loss)
        logger.debug("%s epoch %d: train %.6f val %.6f", desc, epoch + 1, train_loss, val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            result.best_epoch = epoch
            result.model = working.copy()

    if n_epochs:
        logger.info("%s: best epoch %d of %d (val loss %.6f)", desc, result.best_epoch + 1, n_epochs, best_loss)
    return result
