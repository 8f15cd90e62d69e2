"""Named random substreams derived from one root seed.

Every stage asks for its generator by name, so any stage can be re-run in
isolation and still draw the same numbers.
"""

from __future__ import annotations

import zlib
from typing import Union

import numpy as np

Key = Union[str, int]


def _word(key: Key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def substream_seed(root: int, *names: Key) -> int:
    """Stable 32-bit seed for the substream `root/names...`."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, *(_word(n) for n in names)])
    return int(ss.generate_state(1)[0])


def substream(root: int, *names: Key) -> np.random.Generator:
    return np.random.default_rng(substream_seed(root, *names))
