"""Raster containers (no conversions here; see ki67_calib.core)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RgbImage:
    """8-bit sRGB raster stored row-major as an (height, width, 3) uint8 array."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"RgbImage needs an (H, W, 3) array, got shape {arr.shape}")
        if arr.shape[0] <= 0 or arr.shape[1] <= 0:
            raise ValueError("RgbImage must be non-empty")
        if arr.dtype != np.uint8:
            raise ValueError(f"RgbImage needs uint8 data, got {arr.dtype}")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    def as_float(self) -> np.ndarray:
        """Pixel values scaled to [0, 1] as float64."""
        return self.data.astype(np.float64) / 255.0

    def crop(self, x: int, y: int, width: int, height: int) -> "RgbImage":
        return RgbImage(self.data[y:y + height, x:x + width])

    @classmethod
    def filled(cls, width: int, height: int, rgb) -> "RgbImage":
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[...] = np.asarray(rgb, dtype=np.uint8)
        return cls(arr)


@dataclass(frozen=True)
class LabImage:
    """CIE L*a*b* raster; three float64 channels of identical shape."""

    L: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        shapes = {np.shape(self.L), np.shape(self.a), np.shape(self.b)}
        if len(shapes) != 1:
            raise ValueError(f"LabImage channels differ in shape: {shapes}")
        if np.ndim(self.L) != 2:
            raise ValueError("LabImage channels must be 2-D")
        for name in ("L", "a", "b"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.float64)))

    @property
    def height(self) -> int:
        return int(self.L.shape[0])

    @property
    def width(self) -> int:
        return int(self.L.shape[1])

    @property
    def chroma(self) -> np.ndarray:
        return np.hypot(self.a, self.b)
