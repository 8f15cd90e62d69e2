"""Nuclei point sets.

Coordinates are continuous pixel coordinates: pixel column c spans [c, c+1),
so a centroid detected on pixel (row r, col c) sits at (c + 0.5, r + 0.5).
The nearest pixel of a centroid is (floor(y), floor(x)).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, Iterable, Tuple

import numpy as np

DEFAULT_MICRONS_PER_PIXEL = 0.5


class NucleusClass(str, enum.Enum):
    KI67_NEG = "neg"
    KI67_POS = "pos"

    @classmethod
    def parse(cls, value: str) -> "NucleusClass":
        v = (value or "").strip().lower()
        for member in cls:
            if v == member.value:
                return member
        raise ValueError(f"Unsupported nucleus class: {value!r} (use neg or pos)")


@dataclass(frozen=True)
class Centroid:
    x: float
    y: float
    cls: NucleusClass

    @property
    def pixel(self) -> Tuple[int, int]:
        """(row, col) of the nearest pixel."""
        return int(np.floor(self.y)), int(np.floor(self.x))


@dataclass(frozen=True)
class CentroidSet:
    centroids: Tuple[Centroid, ...]
    width: int
    height: int
    microns_per_pixel: float = DEFAULT_MICRONS_PER_PIXEL

    def __post_init__(self) -> None:
        object.__setattr__(self, "centroids", tuple(self.centroids))
        if self.width <= 0 or self.height <= 0:
            raise ValueError("CentroidSet needs positive width and height")
        if self.microns_per_pixel <= 0:
            raise ValueError("microns_per_pixel must be > 0")
        for c in self.centroids:
            if not (0 <= c.x < self.width and 0 <= c.y < self.height):
                raise ValueError(f"centroid {c} outside {self.width}x{self.height}")

    def __len__(self) -> int:
        return len(self.centroids)

    def __iter__(self):
        return iter(self.centroids)

    def points(self, cls: NucleusClass) -> np.ndarray:
        """(n, 2) array of (x, y) for one class."""
        pts = [(c.x, c.y) for c in self.centroids if c.cls == cls]
        return np.asarray(pts, dtype=np.float64).reshape(-1, 2)

    def counts(self) -> Dict[NucleusClass, int]:
        out = {k: 0 for k in NucleusClass}
        for c in self.centroids:
            out[c.cls] += 1
        return out

    @classmethod
    def empty(cls, width: int, height: int, microns_per_pixel: float = DEFAULT_MICRONS_PER_PIXEL) -> "CentroidSet":
        return cls((), width, height, microns_per_pixel)

    @classmethod
    def from_points(
        cls,
        points: Iterable[Tuple[float, float, NucleusClass]],
        width: int,
        height: int,
        microns_per_pixel: float = DEFAULT_MICRONS_PER_PIXEL,
    ) -> "CentroidSet":
        return cls(tuple(Centroid(float(x), float(y), k) for x, y, k in points), width, height, microns_per_pixel)
