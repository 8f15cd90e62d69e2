from .image import RgbImage, LabImage
from .centroid import Centroid, CentroidSet, NucleusClass, DEFAULT_MICRONS_PER_PIXEL
from .score import PiScore
from .heatmap import HeatmapLabel
from .manifest import RunManifest, ArtifactRecord

__all__ = [
    "RgbImage",
    "LabImage",
    "Centroid",
    "CentroidSet",
    "NucleusClass",
    "DEFAULT_MICRONS_PER_PIXEL",
    "PiScore",
    "HeatmapLabel",
    "RunManifest",
    "ArtifactRecord",
]
