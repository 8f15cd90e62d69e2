"""Two-channel nuclei-centre probability map (network target and output)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .centroid import NucleusClass


@dataclass(frozen=True)
class HeatmapLabel:
    neg_channel: np.ndarray
    pos_channel: np.ndarray
    sigma_px: float

    def __post_init__(self) -> None:
        neg = np.asarray(self.neg_channel, dtype=np.float64)
        pos = np.asarray(self.pos_channel, dtype=np.float64)
        if neg.shape != pos.shape or neg.ndim != 2:
            raise ValueError(f"heatmap channels must be equal 2-D shapes, got {neg.shape} and {pos.shape}")
        if neg.size and (neg.min() < 0 or neg.max() > 1 or pos.min() < 0 or pos.max() > 1):
            raise ValueError("heatmap values must lie in [0, 1]")
        if self.sigma_px <= 0:
            raise ValueError("sigma_px must be > 0")
        for name, arr in (("neg_channel", neg), ("pos_channel", pos)):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def height(self) -> int:
        return int(self.neg_channel.shape[0])

    @property
    def width(self) -> int:
        return int(self.neg_channel.shape[1])

    def channel(self, cls: NucleusClass) -> np.ndarray:
        return self.pos_channel if cls == NucleusClass.KI67_POS else self.neg_channel

    def stacked(self) -> np.ndarray:
        """(H, W, 2) array with channel 0 = Ki-67-, channel 1 = Ki-67+."""
        return np.stack([self.neg_channel, self.pos_channel], axis=-1)

    @classmethod
    def from_stacked(cls, arr: np.ndarray, sigma_px: float) -> "HeatmapLabel":
        arr = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
        return cls(arr[..., 0], arr[..., 1], sigma_px)
