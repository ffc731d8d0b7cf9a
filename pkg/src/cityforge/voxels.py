"""Voxel occupancy grids, LOD0/LOD1 footprint extrusion and top-down masks."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, OutOfFrameError, ValidationError
from .geo import BuildingRecord

UVOX_MAGIC = b"UVOX"
_FRAME_TOL = 1e-9


class EmptyGridWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GridSpec:
    """A cubic grid of ``resolution`` cells per axis anchored at ``origin``."""

    resolution: int
    cell_size: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValidationError("resolution must be positive")
        if not self.cell_size > 0:
            raise ValidationError("cell_size must be positive")

    @property
    def extent(self) -> float:
        return self.resolution * self.cell_size

    def centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.resolution) + 0.5) * self.cell_size

    def coarsened(self, factor: int) -> "GridSpec":
        return GridSpec(self.resolution // factor, self.cell_size * factor, self.origin)


class VoxelGrid:
    """Binary occupancy over an N^3 grid; ``occupancy[i, j, k]`` is x, y, z."""

    def __init__(self, spec: GridSpec, occupancy: np.ndarray | None = None):
        n = spec.resolution
        if occupancy is None:
            occupancy = np.zeros((n, n, n), dtype=bool)
        occupancy = np.asarray(occupancy, dtype=bool)
        if occupancy.shape != (n, n, n):
            raise ValidationError(f"occupancy shape {occupancy.shape} != {(n, n, n)}")
        self.spec = spec
        self.occupancy = occupancy

    @classmethod
    def from_indices(cls, spec: GridSpec, indices) -> "VoxelGrid":
        idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        if idx.size and (idx.min() < 0 or idx.max() >= spec.resolution):
            raise ValidationError("voxel index out of range")
        occ = np.zeros((spec.resolution,) * 3, dtype=bool)
        occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
        return cls(spec, occ)

    @property
    def resolution(self) -> int:
        return self.spec.resolution

    @property
    def cell_size(self) -> float:
        return self.spec.cell_size

    @property
    def origin(self) -> tuple[float, float, float]:
        return self.spec.origin

    @property
    def indices(self) -> np.ndarray:
        """Activated cells p_i as a lexicographically sorted (L, 3) array."""
        return np.argwhere(self.occupancy)

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.occupancy, other.occupancy)

    def __repr__(self) -> str:
        return f"VoxelGrid(N={self.resolution}, cell={self.cell_size:g}, L={self.count})"

    def to_bytes(self) -> bytes:
        if self.resolution > 65536:
            raise FormatError("UVOX stores u16 indices; resolution too large")
        idx = self.indices.astype("<u2")
        header = UVOX_MAGIC + struct.pack(
            "<If3fI", self.resolution, self.cell_size, *self.origin, len(idx)
        )
        return header + idx.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "VoxelGrid":
        if data[:4] != UVOX_MAGIC:
            raise FormatError("not a UVOX file")
        n, cell, ox, oy, oz, count = struct.unpack_from("<If3fI", data, 4)
        body = data[4 + struct.calcsize("<If3fI"):]
        if len(body) != count * 6:
            raise FormatError("truncated UVOX payload")
        idx = np.frombuffer(body, dtype="<u2").reshape(-1, 3)
        return cls.from_indices(GridSpec(n, float(cell), (float(ox), float(oy), float(oz))), idx)


@dataclass(eq=False)
class BinaryMask:
    """Row-major raster; row r covers y, column c covers x (both ascending)."""

    bits: np.ndarray
    pixel_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2 or 0 in self.bits.shape:
            raise ValidationError("mask must be a non-empty 2D array")

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, Y) arrays of pixel-center coordinates, shaped like ``bits``."""
        xs = self.origin[0] + (np.arange(self.width) + 0.5) * self.pixel_size
        ys = self.origin[1] + (np.arange(self.height) + 0.5) * self.pixel_size
        return np.meshgrid(xs, ys)

    def to_pgm(self) -> bytes:
        """Binary P5 PGM with north up."""
        img = np.where(self.bits[::-1], 255, 0).astype(np.uint8)
        return f"P5\n{self.width} {self.height}\n255\n".encode() + img.tobytes()


def points_in_polygon(x, y, rings) -> np.ndarray:
    """Even-odd test of points against closed rings (outer plus holes).

    Uses the half-open edge convention: an edge counts as crossed when
    exactly one endpoint lies strictly above the query ``y``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    for ring in rings:
        ring = np.asarray(ring, dtype=float)
        for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
            if y1 == y2:
                continue
            straddle = (y1 > y) != (y2 > y)
            xcross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= straddle & (x < xcross)
    return inside


def building_frame(record: BuildingRecord, resolution: int = 64, padding: float = 0.05) -> GridSpec:
    """Per-building grid: bbox centred in x/y, ground at z=0, cubic cells.

    The cell size covers the largest of the footprint extents and the
    height, padded by ``padding`` so aspect ratio is preserved.
    """
    x0, y0, x1, y1 = record.bbox
    extent = max(x1 - x0, y1 - y0, record.height) * (1.0 + padding)
    cell = extent / resolution
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    return GridSpec(resolution, cell, (cx - 0.5 * extent, cy - 0.5 * extent, 0.0))


def _check_frame(record: BuildingRecord, spec: GridSpec) -> None:
    x0, y0, x1, y1 = record.bbox
    ox, oy, oz = spec.origin
    ext = spec.extent
    bad = []
    if x0 < ox - _FRAME_TOL or x1 > ox + ext + _FRAME_TOL:
        bad.append("x")
    if y0 < oy - _FRAME_TOL or y1 > oy + ext + _FRAME_TOL:
        bad.append("y")
    if oz > _FRAME_TOL or record.height > oz + ext + _FRAME_TOL:
        bad.append("z")
    if bad:
        raise OutOfFrameError(record.id, f"axes {','.join(bad)}")


def _extrude(columns: np.ndarray, record: BuildingRecord, spec: GridSpec) -> VoxelGrid:
    layers = spec.centers(2) < record.height
    occ = columns[:, :, None] & layers[None, None, :]
    if not occ.any():
        warnings.warn(f"building {record.id!r} produced an empty grid", EmptyGridWarning, stacklevel=3)
    return VoxelGrid(spec, occ)


def extrude_lod0(record: BuildingRecord, spec: GridSpec) -> VoxelGrid:
    """Axis-aligned bounding box of the footprint, extruded to its height."""
    _check_frame(record, spec)
    x0, y0, x1, y1 = record.bbox
    cx, cy = spec.centers(0), spec.centers(1)
    columns = ((cx >= x0) & (cx <= x1))[:, None] & ((cy >= y0) & (cy <= y1))[None, :]
    return _extrude(columns, record, spec)


def footprint_columns(record: BuildingRecord, spec: GridSpec) -> np.ndarray:
    """(N, N) boolean array over (x, y) column centers inside the footprint."""
    cx, cy = spec.centers(0), spec.centers(1)
    X, Y = np.meshgrid(cx, cy, indexing="ij")
    return points_in_polygon(X, Y, record.rings)


def extrude_lod1(record: BuildingRecord, spec: GridSpec) -> VoxelGrid:
    """Footprint polygon (holes respected) extruded to its height."""
    if record.area <= 0:
        raise ValidationError(f"building {record.id!r} has zero footprint area")
    _check_frame(record, spec)
    return _extrude(footprint_columns(record, spec), record, spec)


def extrude(record: BuildingRecord, spec: GridSpec, lod: int) -> VoxelGrid:
    if lod == 0:
        return extrude_lod0(record, spec)
    if lod == 1:
        return extrude_lod1(record, spec)
    raise ValueError(f"unsupported LOD {lod}; only 0 and 1 exist")


def downsample_occupancy(grid: VoxelGrid, factor: int) -> VoxelGrid:
    """Max-pool occupancy over factor^3 blocks."""
    n = grid.resolution
    if factor < 1 or n % factor:
        raise ValueError(f"factor {factor} does not divide resolution {n}")
    m = n // factor
    pooled = grid.occupancy.reshape(m, factor, m, factor, m, factor).any(axis=(1, 3, 5))
    return VoxelGrid(grid.spec.coarsened(factor), pooled)


def rasterize_topdown(grid: VoxelGrid, out_resolution: int) -> BinaryMask:
    """Column-OR projection onto the ground plane, nearest-neighbour resampled."""
    if out_resolution <= 0:
        raise ValueError("out_resolution must be positive")
    n = grid.resolution
    columns = grid.occupancy.any(axis=2)  # (x, y)
    src = ((np.arange(out_resolution) + 0.5) * n / out_resolution).astype(np.int64)
    bits = columns[np.ix_(src, src)].T  # rows are y
    return BinaryMask(bits, grid.spec.extent / out_resolution, grid.origin[:2])


def rasterize_footprint(record: BuildingRecord, spec: GridSpec, out_resolution: int | None = None) -> BinaryMask:
    """Ground-truth footprint mask over the grid's ground square."""
    r = spec.resolution if out_resolution is None else out_resolution
    pixel = spec.extent / r
    mask = BinaryMask(np.zeros((r, r), dtype=bool), pixel, spec.origin[:2])
    X, Y = mask.pixel_centers()
    mask.bits = points_in_polygon(X, Y, record.rings)
    return mask


def fill_pinches(grid: VoxelGrid, max_iter: int = 64) -> VoxelGrid:
    """Fill cells so no lattice edge is touched by exactly two diagonal cells.

    Such edge-only contacts cannot be meshed as a watertight indexed surface
    when both ends are bridged; filling one of the two empty cells removes
    the ambiguity at the cost of one voxel each.
    """
    occ = np.pad(grid.occupancy, 1)
    for _ in range(max_iter):
        changed = False
        for axis in range(3):
            o = np.moveaxis(occ, axis, 2)  # view; edges run along the last axis
            a, b = o[:-1, :-1], o[1:, :-1]
            c, d = o[:-1, 1:], o[1:, 1:]
            diag1 = a & d & ~b & ~c
            diag2 = b & c & ~a & ~d
            if diag1.any() or diag2.any():
                changed = True
                b |= diag1
                a |= diag2
        if not changed:
            break
    return VoxelGrid(grid.spec, occ[1:-1, 1:-1, 1:-1].copy())
