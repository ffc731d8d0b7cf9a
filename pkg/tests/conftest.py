from __future__ import annotations

import json
import shutil
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from cityforge.geo import BuildingRecord


def square(x0: float, y0: float, size: float) -> list[list[float]]:
    return [[x0, y0], [x0 + size, y0], [x0 + size, y0 + size], [x0, y0 + size], [x0, y0]]


def feature(geometry: dict, **props) -> dict:
    return {"type": "Feature", "properties": props, "geometry": geometry}


def collection(*features) -> bytes:
    return json.dumps({"type": "FeatureCollection", "features": list(features)}).encode()


@pytest.fixture
def l_record() -> BuildingRecord:
    """Union of two 8 x 4 m rectangles forming an L, 4 m tall."""
    outer = np.array([[0, 0], [8, 0], [8, 4], [4, 4], [4, 12], [0, 12], [0, 0]], dtype=float)
    return BuildingRecord("L", outer, 4.0)


@pytest.fixture
def demo_dir(tmp_path: Path) -> Path:
    """A scratch copy of the bundled demo region and config."""
    data = resources.files("cityforge.data")
    for name in ("demo_region.geojson", "demo_config.json"):
        with resources.as_file(data.joinpath(name)) as src:
            shutil.copy(src, tmp_path / name)
    return tmp_path
