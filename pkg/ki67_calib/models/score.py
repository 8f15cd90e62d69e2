"""Proliferation index value object."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class PiScore:
    value: float
    pos_count: int
    neg_count: int

    def __post_init__(self) -> None:
        if self.pos_count < 0 or self.neg_count < 0:
            raise ValueError("cell counts must be >= 0")
        if not 0.0 <= self.value <= 100.0:
            raise ValueError(f"PI must lie in [0, 100], got {self.value}")

    @property
    def total(self) -> int:
        return self.pos_count + self.neg_count
