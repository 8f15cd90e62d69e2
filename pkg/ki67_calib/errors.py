"""Domain exceptions.

Input-contract failures subclass ValueError so callers can catch either the
specific error or the generic one, the same way the rest of the package
raises ValueError for bad arguments.
"""

from __future__ import annotations

from typing import Optional, Sequence


class Ki67Error(Exception):
    """Marker base for every error raised on purpose by this package."""


class ZeroCellsError(Ki67Error, ValueError):
    """An image produced no tumour nuclei; it cannot carry a PI."""


class EmptyTissueError(Ki67Error, ValueError):
    """Too few tissue pixels to separate stains."""


class InsufficientPatchesError(Ki67Error, ValueError):
    def __init__(self, found: int, required: int):
        super().__init__(f"only {found} qualifying patches, {required} required")
        self.found = found
        self.required = required


class ShapeMismatchError(Ki67Error, ValueError):
    pass


class EmptyDatasetError(Ki67Error, ValueError):
    pass


class MissingDatasetError(Ki67Error, ValueError):
    pass


class TooFewSamplesError(Ki67Error, ValueError):
    pass


class CalibrationMismatchError(Ki67Error, ValueError):
    pass


class NoCellsError(Ki67Error, ValueError):
    """tp = fp = fn = 0: nothing to score."""


class UnknownPatientError(Ki67Error, ValueError):
    pass


class DegenerateGroupsError(Ki67Error, ValueError):
    pass


class DegenerateInputError(Ki67Error, ValueError):
    def __init__(self, message: str, indices: Sequence[int] = ()):
        super().__init__(f"{message} (rows: {list(indices)[:20]})")
        self.indices = list(indices)


class ConfigError(Ki67Error, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.line = line


class PlacementOverflowError(Ki67Error, RuntimeError):
    pass


class DatasetMissingError(Ki67Error, FileNotFoundError):
    pass


class PatientLeakageError(Ki67Error, ValueError):
    """SS source images share patients with the evaluation cohort."""
