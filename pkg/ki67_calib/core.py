"""Colour conversion and proliferation-index arithmetic.

All functions are pure (no I/O) and safe to call from worker processes.
"""

from __future__ import annotations

from typing import Union

import numpy as np
from skimage.color import rgb2lab

from .errors import ZeroCellsError
from .models import LabImage, PiScore, RgbImage


def rgb_to_lab(img: RgbImage) -> LabImage:
    """sRGB (D65, 2-degree observer) to CIE L*a*b*."""
    lab = rgb2lab(img.data, illuminant="D65", observer="2")
    return LabImage(L=np.clip(lab[..., 0], 0.0, 100.0), a=lab[..., 1], b=lab[..., 2])


def compute_pi(pos_count: int, neg_count: int) -> PiScore:
    """PI = 100 * pos / (pos + neg)."""
    pos, neg = int(pos_count), int(neg_count)
    if pos < 0 or neg < 0:
        raise ValueError("cell counts must be >= 0")
    if pos + neg == 0:
        raise ZeroCellsError("no tumour nuclei detected")
    return PiScore(value=100.0 * pos / (pos + neg), pos_count=pos, neg_count=neg)


def delta_pi(actual: Union[PiScore, float], predicted: Union[PiScore, float]) -> float:
    """Absolute PI error in percentage points; takes scores or bare PI values."""
    a = actual.value if isinstance(actual, PiScore) else float(actual)
    p = predicted.value if isinstance(predicted, PiScore) else float(predicted)
    return abs(a - p)
