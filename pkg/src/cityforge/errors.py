"""Exception types shared across the pipeline."""

from __future__ import annotations


class CityForgeError(Exception):
    """Base class; the CLI maps these to exit status 1."""

    module = "cityforge"


class ParseError(CityForgeError, ValueError):
    module = "geo"

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class EmptyRegionError(CityForgeError):
    module = "geo"


class ValidationError(CityForgeError, ValueError):
    pass


class OutOfFrameError(CityForgeError, ValueError):
    module = "voxels"

    def __init__(self, building_id: str, detail: str = ""):
        msg = f"building {building_id!r} exceeds the grid frame"
        super().__init__(f"{msg}: {detail}" if detail else msg)
        self.building_id = building_id


class NumericError(CityForgeError, FloatingPointError):
    module = "flow"


class TrainingDivergedError(CityForgeError):
    module = "flow"


class AlignmentError(CityForgeError, ValueError):
    module = "cluster"


class EmptyMeshError(CityForgeError, ValueError):
    module = "scene"


class PlacementError(CityForgeError, ValueError):
    module = "scene"


class FormatError(CityForgeError, ValueError):
    """Bad magic, truncated payload or unknown format name."""
