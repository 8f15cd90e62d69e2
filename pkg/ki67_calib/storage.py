"""File formats.

All reading and writing of images, label rasters, centroid tables and JSON
documents goes through this module; algorithm modules never touch files.

- images: 8-bit RGB PNG
- probability rasters: 16-bit grayscale PNG, value = round(65535 * p)
- centroids: CSV with header ``x,y,class`` where class is ``neg`` or ``pos``
- model checkpoints: ``KI67MDL1`` magic, JSON header, float32 tensors
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image
from skimage.draw import circle_perimeter

from .models import Centroid, CentroidSet, NucleusClass, RgbImage
from .models.centroid import DEFAULT_MICRONS_PER_PIXEL

PathLike = Union[str, Path]

OVERLAY_COLORS = {
    NucleusClass.KI67_NEG: (0, 200, 0),
    NucleusClass.KI67_POS: (230, 0, 0),
}


def _prepare(path: PathLike) -> Path:
    p = Path(path).expanduser()
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def read_png(path: PathLike) -> RgbImage:
    with Image.open(Path(path).expanduser()) as im:
        return RgbImage(np.asarray(im.convert("RGB"), dtype=np.uint8).copy())


def write_png(path: PathLike, img: RgbImage) -> Path:
    p = _prepare(path)
    Image.fromarray(np.asarray(img.data)).save(p, format="PNG")
    return p


def write_probability_png(path: PathLike, channel: np.ndarray) -> Path:
    p = _prepare(path)
    arr = np.rint(np.clip(channel, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(p, format="PNG")
    return p


def read_probability_png(path: PathLike) -> np.ndarray:
    with Image.open(Path(path).expanduser()) as im:
        arr = np.asarray(im).astype(np.float64)
    return arr / 65535.0


def write_centroids_csv(path: PathLike, cs: CentroidSet) -> Path:
    p = _prepare(path)
    frame = pd.DataFrame(
        {
            "x": [c.x for c in cs.centroids],
            "y": [c.y for c in cs.centroids],
            "class": [c.cls.value for c in cs.centroids],
        },
        columns=["x", "y", "class"],
    )
    frame.to_csv(p, index=False, float_format="%.4f")
    return p


def read_centroids_csv(
    path: PathLike,
    width: int,
    height: int,
    microns_per_pixel: float = DEFAULT_MICRONS_PER_PIXEL,
) -> CentroidSet:
    frame = pd.read_csv(Path(path).expanduser(), dtype={"class": str})
    missing = {"x", "y", "class"} - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    pts = [
        Centroid(float(x), float(y), NucleusClass.parse(k))
        for x, y, k in zip(frame["x"], frame["y"], frame["class"])
    ]
    return CentroidSet(tuple(pts), width, height, microns_per_pixel)


def write_json(path: PathLike, payload: Any) -> Path:
    p = _prepare(path)
    p.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return p


def read_json(path: PathLike) -> Any:
    return json.loads(Path(path).expanduser().read_text(encoding="utf-8"))


def _json_default(value: Any) -> Any:
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "value"):
        return value.value
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def sha256_file(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(Path(path).expanduser(), "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_json(payload: Any) -> str:
    text = json.dumps(payload, sort_keys=True, default=_json_default)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def draw_overlay(img: RgbImage, cs: CentroidSet, radius: int = 4) -> RgbImage:
    """Centroid markers on a copy of the image: Ki-67- green, Ki-67+ red."""
    out = np.array(img.data, copy=True)
    for c in cs.centroids:
        r, col = c.pixel
        rr, cc = circle_perimeter(r, col, radius, shape=out.shape[:2])
        out[rr, cc] = OVERLAY_COLORS[c.cls]
    return RgbImage(out)


# ---------------------------
# Model checkpoints
# ---------------------------
# Layout: magic (8 bytes) | header length (uint32 LE) | UTF-8 JSON header |
# float32 LE tensors in architecture order.

CHECKPOINT_MAGIC = b"KI67MDL1"


def write_checkpoint(path: PathLike, tensors: Sequence[np.ndarray], header: Mapping[str, Any]) -> Path:
    p = _prepare(path)
    meta = dict(header)
    meta["shapes"] = [list(t.shape) for t in tensors]
    head = json.dumps(meta, sort_keys=True, default=_json_default).encode("utf-8")
    with open(p, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return p


def read_checkpoint(path: PathLike) -> Tuple[List[np.ndarray], dict]:
    raw = Path(path).expanduser().read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    (head_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    header = json.loads(raw[offset:offset + head_len].decode("utf-8"))
    offset += head_len
    tensors: List[np.ndarray] = []
    for shape in header["shapes"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        tensors.append(arr.reshape(shape).astype(np.float64))
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after tensors")
    return tensors, header


def write_table(path: PathLike, rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> Path:
    """CSV with a fixed column order; missing values are left blank."""
    p = _prepare(path)
    pd.DataFrame(list(rows), columns=list(columns)).to_csv(p, index=False)
    return p


def read_table(path: PathLike, **kwargs: Any) -> pd.DataFrame:
    return pd.read_csv(Path(path).expanduser(), **kwargs)
