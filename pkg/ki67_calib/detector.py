"""MiniDetector: a small fully-convolutional nuclei-centre detector.

    conv 3x3 (3 -> 8)  + ReLU
    conv 3x3 (8 -> 16) + ReLU
    conv 3x3 (16 -> 8) + ReLU      <- feature layer
    conv 1x1 (8 -> 2)  + sigmoid   -> (Ki-67-, Ki-67+) probability map

Convolutions are zero-padded to keep H x W. Tensors are NHWC float64,
weights (out, in, k, k). Gradients are derived by hand; nothing here
depends on an autodiff framework.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from . import storage
from .labels import DEFAULT_PEAK_THRESHOLD, DEFAULT_SIGMA_PX, heatmap_to_centroids
from .models import CentroidSet, HeatmapLabel, RgbImage
from .models.centroid import DEFAULT_MICRONS_PER_PIXEL

logger = logging.getLogger(__name__)

ARCHITECTURE = "conv3x3(3,8)-relu-conv3x3(8,16)-relu-conv3x3(16,8)-relu-conv1x1(8,2)-sigmoid"
LAYER_SHAPES: Tuple[Tuple[int, int, int, int], ...] = (
    (8, 3, 3, 3),
    (16, 8, 3, 3),
    (8, 16, 3, 3),
    (2, 8, 1, 1),
)
PARAMETER_COUNT = 2570
FEATURE_CHANNELS = 8
# three 3x3 convolutions: an output pixel sees 3 pixels in every direction
RECEPTIVE_RADIUS = 3
DEFAULT_TILE = 512


def normalize_input(img: RgbImage) -> np.ndarray:
    """(H, W, 3) network input: RGB scaled to [0, 1] and centred at 0."""
    return img.as_float() - 0.5


# ---------------------------
# Convolution primitives
# ---------------------------

def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, h, wd, _ = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    out = np.empty((n, h, wd, cout), dtype=np.float64)
    out[...] = b
    for i in range(k):
        for j in range(k):
            out += xp[:, i:i + h, j:j + wd, :] @ w[:, :, i, j].T
    return out


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, dout: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(dx, dw, db) for conv2d given the upstream gradient dout."""
    n, h, wd, cin = x.shape
    k = w.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    dw = np.empty_like(w)
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, cin), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            dw[:, :, i, j] = np.tensordot(dout, xp[:, i:i + h, j:j + wd, :], axes=([0, 1, 2], [0, 1, 2]))
            dxp[:, i:i + h, j:j + wd, :] += dout @ w[:, :, i, j]
    dx = dxp[:, p:p + h, p:p + wd, :]
    db = dout.sum(axis=(0, 1, 2))
    return dx, dw, db


@dataclass
class ForwardCache:
    activations: List[np.ndarray]  # input, relu1, relu2, relu3 (features), sigmoid output
    preactivations: List[np.ndarray]

    @property
    def features(self) -> np.ndarray:
        return self.activations[3]

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


# ---------------------------
# Model
# ---------------------------

class MiniDetector:
    """Weights are kept as an ordered list [W1, b1, W2, b2, W3, b3, W4, b4]."""

    def __init__(self, weights: Sequence[np.ndarray]):
        weights = [np.array(t, dtype=np.float64) for t in weights]
        expected = []
        for shape in LAYER_SHAPES:
            expected.extend([shape, (shape[0],)])
        if [t.shape for t in weights] != expected:
            raise ValueError(f"weights do not match {ARCHITECTURE}")
        self.weights: List[np.ndarray] = weights

    @classmethod
    def initialize(cls, seed: int) -> "MiniDetector":
        """He-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights: List[np.ndarray] = []
        for li, (cout, cin, k, _) in enumerate(LAYER_SHAPES):
            gain = 2.0 if li < len(LAYER_SHAPES) - 1 else 1.0
            weights.append(rng.normal(0.0, np.sqrt(gain / (cin * k * k)), size=(cout, cin, k, k)))
            weights.append(np.zeros(cout))
        return cls(weights)

    @classmethod
    def zeros(cls) -> "MiniDetector":
        weights: List[np.ndarray] = []
        for shape in LAYER_SHAPES:
            weights.extend([np.zeros(shape), np.zeros(shape[0])])
        return cls(weights)

    def copy(self) -> "MiniDetector":
        return MiniDetector([t.copy() for t in self.weights])

    @property
    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.weights))

    def forward_batch(self, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        """x: (N, H, W, 3) normalized input -> ((N, H, W, 2) output, cache)."""
        acts = [np.asarray(x, dtype=np.float64)]
        pre: List[np.ndarray] = []
        h = acts[0]
        last = len(LAYER_SHAPES) - 1
        for li in range(len(LAYER_SHAPES)):
            z = conv2d(h, self.weights[2 * li], self.weights[2 * li + 1])
            pre.append(z)
            h = expit(z) if li == last else np.maximum(z, 0.0)
            acts.append(h)
        return h, ForwardCache(acts, pre)

    def backward(self, cache: ForwardCache, dout: np.ndarray) -> List[np.ndarray]:
        """Parameter gradients, same order as weights, for upstream dL/d(output)."""
        y = cache.output
        dz = dout * y * (1.0 - y)
        grads: List[Optional[np.ndarray]] = [None] * len(self.weights)
        for li in reversed(range(len(LAYER_SHAPES))):
            dx, dw, db = conv2d_backward(cache.activations[li], self.weights[2 * li], dz)
            grads[2 * li] = dw
            grads[2 * li + 1] = db
            if li > 0:
                dz = dx * (cache.preactivations[li - 1] > 0.0)
        return grads  # type: ignore[return-value]


def forward(model: MiniDetector, patch: RgbImage, sigma_px: float = DEFAULT_SIGMA_PX) -> Tuple[HeatmapLabel, np.ndarray]:
    """Heatmap and (H, W, 8) feature-layer activations for one image."""
    out, cache = model.forward_batch(normalize_input(patch)[None])
    return HeatmapLabel.from_stacked(out[0], sigma_px), cache.features[0]


def backward(model: MiniDetector, cache: ForwardCache, dout: np.ndarray) -> List[np.ndarray]:
    return model.backward(cache, dout)


def pooled_features(model: MiniDetector, patch: RgbImage) -> np.ndarray:
    """Spatial mean of the feature layer: one 8-vector per patch."""
    _, feats = forward(model, patch)
    return feats.mean(axis=(0, 1))


# ---------------------------
# Inference on large images
# ---------------------------

def predict(model: MiniDetector, img: RgbImage, tile: int = DEFAULT_TILE, sigma_px: float = DEFAULT_SIGMA_PX) -> HeatmapLabel:
    """Tile-by-tile inference; each tile carries a RECEPTIVE_RADIUS halo so
    the stitched map equals whole-image inference."""
    if tile <= 0:
        raise ValueError("tile must be > 0")
    x = normalize_input(img)
    h, w = img.height, img.width
    out = np.empty((h, w, 2), dtype=np.float64)
    halo = RECEPTIVE_RADIUS
    for y0 in range(0, h, tile):
        y1 = min(h, y0 + tile)
        for x0 in range(0, w, tile):
            x1 = min(w, x0 + tile)
            ry0, ry1 = max(0, y0 - halo), min(h, y1 + halo)
            rx0, rx1 = max(0, x0 - halo), min(w, x1 + halo)
            pred, _ = model.forward_batch(x[None, ry0:ry1, rx0:rx1])
            out[y0:y1, x0:x1] = pred[0, y0 - ry0:y1 - ry0, x0 - rx0:x1 - rx0]
    return HeatmapLabel.from_stacked(out, sigma_px)


def predict_centroids(
    model: MiniDetector,
    img: RgbImage,
    peak_threshold: float = DEFAULT_PEAK_THRESHOLD,
    sigma_px: float = DEFAULT_SIGMA_PX,
    microns_per_pixel: float = DEFAULT_MICRONS_PER_PIXEL,
    tile: int = DEFAULT_TILE,
) -> CentroidSet:
    hm = predict(model, img, tile=tile, sigma_px=sigma_px)
    return heatmap_to_centroids(hm, peak_threshold, microns_per_pixel=microns_per_pixel)


# ---------------------------
# Checkpoints
# ---------------------------

def save_checkpoint(
    path: Path,
    model: MiniDetector,
    *,
    seed: int,
    regime: str,
    parent_sha256: Optional[str] = None,
) -> Path:
    header = {"architecture": ARCHITECTURE, "seed": int(seed), "regime": regime, "parent_sha256": parent_sha256}
    return storage.write_checkpoint(path, model.weights, header)


def load_checkpoint(path: Path) -> Tuple[MiniDetector, dict]:
    tensors, header = storage.read_checkpoint(path)
    if header.get("architecture") != ARCHITECTURE:
        raise ValueError(f"{path}: checkpoint architecture {header.get('architecture')!r} is not {ARCHITECTURE!r}")
    return MiniDetector(tensors), header
