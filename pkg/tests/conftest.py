"""Shared pytest fixtures."""

from __future__ import annotations

import os
import tempfile
from collections.abc import Iterator
from pathlib import Path

import numpy as np
import pytest

from ki67_calib.db import create_tables
from ki67_calib.models import CentroidSet, NucleusClass, RgbImage


@pytest.fixture()
def temp_db() -> Iterator[str]:
    """Create a temporary SQLite registry file and point the package to it."""
    previous = os.environ.get("KI67_DB_PATH")
    f = tempfile.NamedTemporaryFile(suffix=".db", delete=False)
    f.close()
    db_path = f.name
    os.environ["KI67_DB_PATH"] = db_path
    create_tables()
    try:
        yield db_path
    finally:
        if previous is None:
            os.environ.pop("KI67_DB_PATH", None)
        else:
            os.environ["KI67_DB_PATH"] = previous
        if os.path.exists(db_path):
            os.remove(db_path)


@pytest.fixture()
def temp_cache(tmp_path: Path, temp_db: str) -> Iterator[Path]:
    """Dataset cache in a temp dir (registry from temp_db)."""
    previous = os.environ.get("KI67_CACHE_DIR")
    cache = tmp_path / "cache"
    os.environ["KI67_CACHE_DIR"] = str(cache)
    try:
        yield cache
    finally:
        if previous is None:
            os.environ.pop("KI67_CACHE_DIR", None)
        else:
            os.environ["KI67_CACHE_DIR"] = previous


@pytest.fixture()
def blank_patch() -> RgbImage:
    return RgbImage.filled(32, 32, (244, 244, 241))


@pytest.fixture()
def random_patch() -> RgbImage:
    rng = np.random.default_rng(3)
    return RgbImage(rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8))


@pytest.fixture()
def sparse_centroids() -> CentroidSet:
    """Well separated nuclei on a 64 x 64 frame, both classes."""
    pts = [
        (10.5, 10.5, NucleusClass.KI67_NEG),
        (40.5, 12.5, NucleusClass.KI67_POS),
        (20.5, 45.5, NucleusClass.KI67_POS),
        (50.5, 50.5, NucleusClass.KI67_NEG),
    ]
    return CentroidSet.from_points(pts, 64, 64)
