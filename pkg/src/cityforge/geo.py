"""GeoJSON footprint ingestion into a local metric frame.

Coordinates are projected with an equirectangular tangent approximation
around the region origin, which keeps errors well below a centimetre for
regions a few kilometres across.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import EmptyRegionError, ParseError, ValidationError

EARTH_RADIUS = 6378137.0
_DEG = math.pi / 180.0


def to_local_frame(lon, lat, origin: tuple[float, float]):
    """Project lon/lat degrees to (x, y) meters east/north of ``origin``.

    Accepts scalars or numpy arrays.
    """
    lon0, lat0 = origin
    _check_lat(lat0)
    _check_lat(lat)
    k = EARTH_RADIUS * _DEG
    x = (np.asarray(lon, dtype=float) - lon0) * math.cos(lat0 * _DEG) * k
    y = (np.asarray(lat, dtype=float) - lat0) * k
    if np.ndim(x) == 0:
        return float(x), float(y)
    return x, y


def from_local_frame(x, y, origin: tuple[float, float]):
    lon0, lat0 = origin
    _check_lat(lat0)
    k = EARTH_RADIUS * _DEG
    lon = np.asarray(x, dtype=float) / (math.cos(lat0 * _DEG) * k) + lon0
    lat = np.asarray(y, dtype=float) / k + lat0
    if np.ndim(lon) == 0:
        return float(lon), float(lat)
    return lon, lat


def _check_lat(lat) -> None:
    if np.any(np.abs(np.asarray(lat, dtype=float)) >= 85.0):
        raise ValidationError("latitude must satisfy |lat| < 85 degrees")


@dataclass(frozen=True)
class HeightPolicy:
    meters_per_level: float = 3.0
    default_height: float = 10.0
    height_keys: tuple[str, ...] = ("height",)
    levels_keys: tuple[str, ...] = ("levels", "building:levels")


def _number(value: Any, key: str) -> float | None:
    if value is None:
        return None
    if isinstance(value, bool):
        raise ValidationError(f"property {key!r} is not numeric")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        text = value.strip().lower().removesuffix("m").strip()
        try:
            return float(text)
        except ValueError:
            raise ValidationError(f"property {key!r} is not numeric: {value!r}") from None
    raise ValidationError(f"property {key!r} is not numeric")


def resolve_height(properties: Mapping[str, Any], policy: HeightPolicy = HeightPolicy()) -> float:
    """Explicit height, else levels times meters_per_level, else the default."""
    for key in policy.height_keys:
        h = _number(properties.get(key), key)
        if h is not None:
            if not h > 0 or not math.isfinite(h):
                raise ValidationError(f"non-positive height {h}")
            return h
    for key in policy.levels_keys:
        levels = _number(properties.get(key), key)
        if levels is not None and levels > 0:
            return levels * policy.meters_per_level
    if policy.default_height <= 0:
        raise ValidationError("default_height must be positive")
    return policy.default_height


def ring_area(ring: np.ndarray) -> float:
    """Signed shoelace area of a closed ring; positive when counter-clockwise."""
    x, y = ring[:-1, 0], ring[:-1, 1]
    x1, y1 = ring[1:, 0], ring[1:, 1]
    return 0.5 * float(np.sum(x * y1 - x1 * y))


def ring_centroid(ring: np.ndarray) -> tuple[float, float]:
    # shift to the first vertex for numerical stability
    p0 = ring[0]
    r = ring - p0
    x, y = r[:-1, 0], r[:-1, 1]
    x1, y1 = r[1:, 0], r[1:, 1]
    cross = x * y1 - x1 * y
    a = 0.5 * float(cross.sum())
    cx = float(((x + x1) * cross).sum()) / (6.0 * a)
    cy = float(((y + y1) * cross).sum()) / (6.0 * a)
    return cx + float(p0[0]), cy + float(p0[1])


def _clean_ring(coords: Sequence[Sequence[float]], ccw: bool) -> np.ndarray:
    pts = np.asarray([[float(c[0]), float(c[1])] for c in coords], dtype=float)
    if pts.ndim != 2 or len(pts) == 0 or not np.all(np.isfinite(pts)):
        raise ValidationError("ring has no valid coordinates")
    keep = [0]
    for i in range(1, len(pts)):
        if not np.array_equal(pts[i], pts[keep[-1]]):
            keep.append(i)
    pts = pts[keep]
    if len(pts) > 1 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]
    if len({(p[0], p[1]) for p in pts}) < 3:
        raise ValidationError("ring needs at least 3 distinct vertices")
    ring = np.vstack([pts, pts[:1]])
    area = ring_area(ring)
    if area == 0.0:
        raise ValidationError("degenerate (zero-area) ring")
    if (area > 0) != ccw:
        ring = ring[::-1].copy()
    return ring


@dataclass(frozen=True, eq=False)
class BuildingRecord:
    """A footprint in local meters. Rings are closed; outer CCW, holes CW."""

    id: str
    outer: np.ndarray
    height: float
    holes: tuple[np.ndarray, ...] = ()
    levels: int | None = None
    centroid: tuple[float, float] = field(init=False)

    def __post_init__(self):
        outer = _clean_ring(self.outer, ccw=True)
        holes = tuple(_clean_ring(h, ccw=False) for h in self.holes)
        if not self.height > 0:
            raise ValidationError(f"building {self.id!r}: height must be positive")
        object.__setattr__(self, "outer", outer)
        object.__setattr__(self, "holes", holes)
        object.__setattr__(self, "centroid", ring_centroid(outer))
        outer.setflags(write=False)
        for h in holes:
            h.setflags(write=False)

    @property
    def rings(self) -> tuple[np.ndarray, ...]:
        return (self.outer, *self.holes)

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        x, y = self.outer[:, 0], self.outer[:, 1]
        return float(x.min()), float(y.min()), float(x.max()), float(y.max())

    @property
    def area(self) -> float:
        return ring_area(self.outer) + sum(ring_area(h) for h in self.holes)

    def translated(self, dx: float, dy: float) -> "BuildingRecord":
        d = np.array([dx, dy])
        return BuildingRecord(
            self.id, self.outer + d, self.height, tuple(h + d for h in self.holes), self.levels
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "height": self.height,
            "levels": self.levels,
            "centroid": list(self.centroid),
            "outer": self.outer.tolist(),
            "holes": [h.tolist() for h in self.holes],
        }


@dataclass(frozen=True)
class Region:
    name: str
    origin: tuple[float, float]
    buildings: tuple[BuildingRecord, ...]
    bounds: tuple[float, float, float, float]
    report: tuple[str, ...] = ()

    def __post_init__(self):
        ids = [b.id for b in self.buildings]
        if len(set(ids)) != len(ids):
            raise ValidationError("building ids must be unique within a region")

    def building(self, building_id: str) -> BuildingRecord:
        for b in self.buildings:
            if b.id == building_id:
                return b
        raise KeyError(building_id)

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.bounds
        return x0 <= x <= x1 and y0 <= y <= y1

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "origin": list(self.origin),
            "bounds": list(self.bounds),
            "buildings": [b.to_dict() for b in self.buildings],
            "report": list(self.report),
        }

    def dumps(self) -> str:
        """Canonical JSON dump (sorted keys, fixed separators)."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _polygon_parts(geometry: Mapping[str, Any]) -> list[list]:
    kind = geometry.get("type") if isinstance(geometry, Mapping) else None
    if kind == "Polygon":
        return [geometry["coordinates"]]
    if kind == "MultiPolygon":
        return list(geometry["coordinates"])
    raise ValidationError(f"unsupported geometry {kind!r}")


def _levels(properties: Mapping[str, Any], policy: HeightPolicy) -> int | None:
    for key in policy.levels_keys:
        try:
            v = _number(properties.get(key), key)
        except ValidationError:
            return None
        if v is not None:
            return int(v)
    return None


def parse_region(
    document: bytes | str,
    name: str = "region",
    policy: HeightPolicy = HeightPolicy(),
) -> Region:
    """Parse a GeoJSON FeatureCollection of building footprints.

    Per-feature problems (unsupported geometry, degenerate rings, bad
    heights, duplicate ids) are collected in ``Region.report`` and the
    feature is skipped. MultiPolygons become one record per part with
    ids ``<id>_<k>``.
    """
    text = document.decode("utf-8") if isinstance(document, (bytes, bytearray)) else document
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", len(text[: exc.pos].encode("utf-8"))) from None
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise ParseError("document is not a GeoJSON FeatureCollection", 0)
    features = doc.get("features")
    if not isinstance(features, list):
        raise ParseError("FeatureCollection has no 'features' array", 0)

    report: list[str] = []
    staged: list[tuple[str, list, float, int | None]] = []
    seen: set[str] = set()
    for index, feature in enumerate(features):
        props = (feature or {}).get("properties") or {}
        fid = props.get("id", (feature or {}).get("id"))
        fid = f"bldg_{index}" if fid is None else str(fid)
        try:
            parts = _polygon_parts((feature or {}).get("geometry") or {})
            height = resolve_height(props, policy)
        except (ValidationError, KeyError, TypeError) as exc:
            report.append(f"feature {index} ({fid}): {exc}")
            continue
        levels = _levels(props, policy)
        multi = (feature.get("geometry") or {}).get("type") == "MultiPolygon"
        for k, rings in enumerate(parts):
            rid = f"{fid}_{k}" if multi else fid
            if rid in seen:
                report.append(f"feature {index} ({rid}): duplicate id")
                continue
            if not rings:
                report.append(f"feature {index} ({rid}): empty polygon")
                continue
            seen.add(rid)
            staged.append((rid, rings, height, levels))

    if not staged:
        raise EmptyRegionError("region contains no valid buildings")

    # provisional frame at the first vertex; projection is affine in
    # lon/lat for a fixed origin, so centroids transform consistently
    first = staged[0][1][0][0]
    provisional = (float(first[0]), float(first[1]))
    records = []
    for rid, rings, height, levels in staged:
        rec = _project_record(rid, rings, height, levels, provisional, report)
        if rec is not None:
            records.append((rid, rings, height, levels, rec))
    if not records:
        raise EmptyRegionError("region contains no valid buildings")
    cx = float(np.mean([r[-1].centroid[0] for r in records]))
    cy = float(np.mean([r[-1].centroid[1] for r in records]))
    origin = from_local_frame(cx, cy, provisional)

    buildings = []
    for rid, rings, height, levels, _ in records:
        rec = _project_record(rid, rings, height, levels, origin, [])
        buildings.append(rec)
    buildings.sort(key=lambda b: b.id)
    allpts = np.vstack([b.outer for b in buildings])
    bounds = (
        float(allpts[:, 0].min()),
        float(allpts[:, 1].min()),
        float(allpts[:, 0].max()),
        float(allpts[:, 1].max()),
    )
    return Region(name, (float(origin[0]), float(origin[1])), tuple(buildings), bounds, tuple(report))


def _project_record(rid, rings, height, levels, origin, report) -> BuildingRecord | None:
    try:
        projected = []
        for ring in rings:
            arr = np.asarray([[float(c[0]), float(c[1])] for c in ring], dtype=float)
            if arr.ndim != 2 or arr.shape[0] == 0:
                raise ValidationError("ring has no valid coordinates")
            x, y = to_local_frame(arr[:, 0], arr[:, 1], origin)
            projected.append(np.column_stack([x, y]))
        return BuildingRecord(rid, projected[0], height, tuple(projected[1:]), levels)
    except (ValidationError, TypeError, IndexError, ValueError) as exc:
        report.append(f"building {rid}: {exc}")
        return None
