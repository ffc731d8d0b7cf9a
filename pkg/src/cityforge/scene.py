"""Voxel meshing, placement at footprint centroids, scene merge and export.

Meshes are z-up in meters: x east, y north. Each exposed voxel face becomes
one quad (two triangles). Vertices are shared between faces only when the
faces belong to the same sheet of surface around a lattice point, so two
cells touching at an edge or corner are meshed as separate closed shells.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import EmptyMeshError, FormatError, PlacementError
from .geo import BuildingRecord
from .voxels import BinaryMask, GridSpec, VoxelGrid, building_frame


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    groups: tuple[tuple[str, int, int], ...] = ()  # (name, first triangle, triangle count)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        end = 0
        for name, start, count in self.groups:
            if start != end or count < 0:
                raise ValueError(f"group {name!r} does not tile the triangle list")
            end = start + count
        if self.groups and end != len(t):
            raise ValueError("groups do not cover every triangle")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "groups", tuple((str(n), int(s), int(c)) for n, s, c in self.groups))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def surface_area(self) -> float:
        return float(self.triangle_areas().sum())

    def group(self, name: str) -> "Mesh":
        for n, start, count in self.groups:
            if n == name:
                tris = self.triangles[start : start + count]
                used, inv = np.unique(tris, return_inverse=True)
                return Mesh(self.vertices[used], inv.reshape(-1, 3), ((n, 0, count),))
        raise KeyError(name)


def is_watertight(mesh: Mesh) -> bool:
    """True when every undirected edge is used by exactly two triangles."""
    t = mesh.triangles
    if not len(t):
        return False
    edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def exposed_faces(occ: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cells, axes and signs (+1/-1) of faces whose neighbour is empty."""
    padded = np.pad(occ, 1)
    cells, axes, signs = [], [], []
    for axis in range(3):
        for sign in (1, -1):
            nb = np.roll(padded, -sign, axis=axis)[1:-1, 1:-1, 1:-1]
            idx = np.argwhere(occ & ~nb)
            cells.append(idx)
            axes.append(np.full(len(idx), axis))
            signs.append(np.full(len(idx), sign))
    return np.concatenate(cells), np.concatenate(axes), np.concatenate(signs)


_UV = np.array([[0, 0], [1, 0], [1, 1], [0, 1]])


def _face_corners(cells: np.ndarray, axes: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """(F, 4, 3) lattice corners, counter-clockwise seen from outside."""
    corners = np.repeat(cells[:, None, :], 4, axis=1)
    rows = np.arange(len(cells))
    for k in range(4):
        uv = _UV[k]
        corners[rows, k, axes] += signs > 0
        corners[rows, k, (axes + 1) % 3] += uv[0]
        corners[rows, k, (axes + 2) % 3] += uv[1]
    neg = signs < 0
    corners[neg] = corners[neg][:, ::-1]
    return corners


def voxels_to_mesh(grid: VoxelGrid, name: str | None = None) -> Mesh:
    """Face-culled cube mesh in the grid's own coordinates (meters)."""
    occ = grid.occupancy
    if not occ.any():
        raise EmptyMeshError("cannot mesh an empty grid")
    cells, axes, signs = exposed_faces(occ)
    corners = _face_corners(cells, axes, signs)
    nf = len(cells)
    side = grid.resolution + 1
    point = (corners[..., 0] * side + corners[..., 1]) * side + corners[..., 2]  # (F, 4)
    cell_id = (cells[:, 0] * side + cells[:, 1]) * side + cells[:, 2]

    # every face edge k joins corners k and k+1
    a = point
    b = np.roll(point, -1, axis=1)
    key_lo, key_hi = np.minimum(a, b).ravel(), np.maximum(a, b).ravel()
    face = np.repeat(np.arange(nf), 4)
    corner = np.tile(np.arange(4), nf)
    order = np.lexsort((cell_id[face], key_hi, key_lo))
    lo, hi = key_lo[order], key_hi[order]
    starts = np.flatnonzero(np.r_[True, (lo[1:] != lo[:-1]) | (hi[1:] != hi[:-1])])
    sizes = np.diff(np.r_[starts, len(order)])
    if not np.all((sizes == 2) | (sizes == 4)):
        raise AssertionError("lattice edge with an odd number of faces")
    # sorted by cell within each edge, so consecutive entries pair up
    first = order[np.concatenate([np.arange(s, s + z, 2) for s, z in zip(starts, sizes)])]
    second = order[np.concatenate([np.arange(s + 1, s + z, 2) for s, z in zip(starts, sizes)])]

    def slot(entry, shift):
        return face[entry] * 4 + (corner[entry] + shift) % 4

    def slot_at(entry, pt):
        f = face[entry]
        k = np.argmax(point[f] == pt[:, None], axis=1)
        return f * 4 + k

    # join the corner slots of paired faces that sit on the same lattice point
    pa = point[face[first], corner[first]]
    pb = point[face[first], (corner[first] + 1) % 4]
    rows = np.concatenate([slot(first, 0), slot(first, 1)])
    cols = np.concatenate([slot_at(second, pa), slot_at(second, pb)])
    n_slots = 4 * nf
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_slots, n_slots))
    _, comp = connected_components(graph, directed=False)
    # renumber vertices in order of first use for stable output
    _, first_use, vid = np.unique(comp, return_index=True, return_inverse=True)
    rank = np.empty(len(first_use), dtype=np.int64)
    rank[np.argsort(first_use)] = np.arange(len(first_use))
    vid = rank[vid].reshape(nf, 4)
    lattice = np.zeros((len(first_use), 3), dtype=np.int64)
    lattice[vid.ravel()] = corners.reshape(-1, 3)
    vertices = np.asarray(grid.origin) + lattice * grid.cell_size
    tris = np.concatenate([vid[:, [0, 1, 2]], vid[:, [0, 2, 3]]], axis=1).reshape(nf, 2, 3)

    # Two sheets meeting at a pinched edge can end up sharing both end
    # vertices; give the later sheet its own midpoint so no index edge is
    # used by more than two triangles.
    ends = np.sort(np.column_stack([vid.ravel()[slot(first, 0)], vid.ravel()[slot(first, 1)]]), axis=1)
    _, first_pair = np.unique(ends, axis=0, return_index=True)
    clash = np.setdiff1d(np.arange(len(first)), first_pair)
    if not len(clash):
        return Mesh(vertices, tris.reshape(-1, 3), ((name, 0, 2 * nf),) if name is not None else ())
    extra = []
    split: dict[tuple[int, int], int] = {}
    for p in clash:
        mid = len(vertices) + len(extra)
        f, k = int(face[first[p]]), int(corner[first[p]])
        extra.append(0.5 * (vertices[vid[f, k]] + vertices[vid[f, (k + 1) % 4]]))
        split[f, k] = mid
        split[int(face[second[p]]), int(corner[second[p]])] = mid
    blocks = []
    for f in range(nf):
        if not any((f, k) in split for k in range(4)):
            blocks.append(tris[f])
            continue
        loop = []
        for k in range(4):
            loop.append(vid[f, k])
            if (f, k) in split:
                loop.append(split[f, k])
        centre = len(vertices) + len(extra)
        extra.append(vertices[vid[f]].mean(axis=0))
        blocks.append(np.array([[centre, loop[i], loop[(i + 1) % len(loop)]] for i in range(len(loop))]))
    vertices = np.concatenate([vertices, np.array(extra)])
    tris = np.concatenate(blocks)
    groups = ((name, 0, len(tris)),) if name is not None else ()
    return Mesh(vertices, tris, groups)


@dataclass(frozen=True)
class PlacedAsset:
    """v_region = scale * (v_asset - anchor) + translation."""

    building_id: str
    scale: tuple[float, float, float]
    translation: tuple[float, float, float]
    anchor: tuple[float, float, float]
    source_resolution: int
    rotation: tuple[tuple[float, ...], ...] = field(default=((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)))

    def __post_init__(self):
        if not all(s > 0 for s in self.scale):
            raise PlacementError("placement scales must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - np.asarray(self.anchor)) * np.asarray(self.scale) + np.asarray(self.translation)

    def to_dict(self) -> dict:
        return {
            "building_id": self.building_id,
            "scale": list(self.scale),
            "translation": list(self.translation),
            "anchor": list(self.anchor),
            "rotation": [list(r) for r in self.rotation],
            "source_resolution": self.source_resolution,
        }


def footprint_anchor(grid: VoxelGrid) -> tuple[float, float, float]:
    """Centroid of occupied top-down columns, at ground level."""
    cols = np.argwhere(grid.occupancy.any(axis=2))
    if not len(cols):
        raise PlacementError("asset grid has no occupied columns")
    cx = grid.spec.centers(0)[cols[:, 0]].mean()
    cy = grid.spec.centers(1)[cols[:, 1]].mean()
    return float(cx), float(cy), float(grid.origin[2])


def place_building(
    asset: VoxelGrid,
    record: BuildingRecord,
    bounds: tuple[float, float, float, float] | None = None,
    target: GridSpec | None = None,
) -> tuple[PlacedAsset, Mesh]:
    """Scale the asset frame onto the building's frame and drop its footprint
    centroid on the record centroid, ground at z = 0."""
    cx, cy = record.centroid
    if bounds is not None:
        x0, y0, x1, y1 = bounds
        if not (x0 <= cx <= x1 and y0 <= cy <= y1):
            raise PlacementError(f"building {record.id!r} centroid ({cx:.3f}, {cy:.3f}) lies outside the region")
    if target is None:
        target = building_frame(record, asset.resolution)
    s = target.extent / asset.spec.extent
    placed = PlacedAsset(record.id, (s, s, s), (cx, cy, 0.0), footprint_anchor(asset), asset.resolution)
    mesh = voxels_to_mesh(asset, record.id)
    return placed, Mesh(placed.apply(mesh.vertices), mesh.triangles, mesh.groups)


def placed_footprint_mask(asset: VoxelGrid, placed: PlacedAsset, frame: GridSpec, out_resolution: int):
    """Top-down occupancy of a placed asset sampled at ``frame``'s pixel centres."""
    pixel = frame.extent / out_resolution
    mask = BinaryMask(np.zeros((out_resolution, out_resolution), dtype=bool), pixel, frame.origin[:2])
    X, Y = mask.pixel_centers()
    s, t, a = np.asarray(placed.scale), np.asarray(placed.translation), np.asarray(placed.anchor)
    ax = (X - t[0]) / s[0] + a[0]
    ay = (Y - t[1]) / s[1] + a[1]
    i = np.floor((ax - asset.origin[0]) / asset.cell_size).astype(np.int64)
    j = np.floor((ay - asset.origin[1]) / asset.cell_size).astype(np.int64)
    n = asset.resolution
    inside = (i >= 0) & (i < n) & (j >= 0) & (j < n)
    columns = asset.occupancy.any(axis=2)
    mask.bits = np.zeros_like(inside)
    mask.bits[inside] = columns[i[inside], j[inside]]
    return mask


def footprint_centroid(mesh: Mesh) -> tuple[float, float]:
    """Area-weighted x/y centroid of the upward-facing triangles."""
    v = mesh.vertices[mesh.triangles]
    normal = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    up = normal[:, 2] > 0
    if not up.any():
        raise ValueError("mesh has no upward-facing triangles")
    w = 0.5 * normal[up, 2]  # projected area
    c = v[up, :, :2].mean(axis=1)
    return float(c[:, 0] @ w / w.sum()), float(c[:, 1] @ w / w.sum())


def merge_scene(parts) -> Mesh:
    """Concatenate (PlacedAsset, Mesh) pairs, one group per building, sorted by id."""
    parts = sorted(parts, key=lambda p: p[0].building_id)
    verts, tris, groups = [], [], []
    offset = start = 0
    for placed, mesh in parts:
        verts.append(mesh.vertices)
        tris.append(mesh.triangles + offset)
        groups.append((placed.building_id, start, mesh.n_triangles))
        offset += mesh.n_vertices
        start += mesh.n_triangles
    if not parts:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return Mesh(np.concatenate(verts), np.concatenate(tris), tuple(groups))


def scene_manifest(parts) -> str:
    entries = {p.building_id: p.to_dict() for p, _ in sorted(parts, key=lambda p: p[0].building_id)}
    return json.dumps({"axes": "x-east,y-north,z-up", "units": "m", "buildings": entries}, indent=2, sort_keys=True)


def _obj(mesh: Mesh) -> bytes:
    lines = ["# x east, y north, z up; meters"]
    lines += [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    groups = mesh.groups or (("", 0, mesh.n_triangles),)
    for name, start, count in groups:
        if name:
            lines.append(f"g {name}")
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles[start : start + count]]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _ply(mesh: Mesh) -> bytes:
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment group {name} {start} {count}" for name, start, count in mesh.groups]
    header += [
        f"element vertex {mesh.n_vertices}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {mesh.n_triangles}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    face = np.zeros(mesh.n_triangles, dtype=[("n", "u1"), ("idx", "<i4", 3)])
    face["n"] = 3
    face["idx"] = mesh.triangles
    body = mesh.vertices.astype("<f8").tobytes() + face.tobytes()
    return ("\n".join(header) + "\n").encode("ascii") + body


def export_mesh(mesh: Mesh, fmt: str = "obj") -> bytes:
    if fmt == "obj":
        return _obj(mesh)
    if fmt == "ply":
        return _ply(mesh)
    raise ValueError(f"unknown mesh format {fmt!r}; expected 'obj' or 'ply'")


def parse_obj(data: bytes) -> Mesh:
    verts, tris, groups = [], [], []
    for raw in data.decode("utf-8").splitlines():
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):
                tris.append([idx[0], idx[k], idx[k + 1]])
        elif parts[0] == "g":
            groups.append([" ".join(parts[1:]), len(tris), 0])
    for i, g in enumerate(groups):
        end = groups[i + 1][1] if i + 1 < len(groups) else len(tris)
        g[2] = end - g[1]
    if groups and groups[0][1] != 0:
        raise FormatError("faces before the first group")
    return Mesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3), tuple(map(tuple, groups)))


def parse_ply(data: bytes) -> Mesh:
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY file")
    header = data[:end].decode("ascii")
    if "binary_little_endian" not in header:
        raise FormatError("only binary little-endian PLY is supported")
    nv = int(re.search(r"element vertex (\d+)", header).group(1))
    nt = int(re.search(r"element face (\d+)", header).group(1))
    groups = tuple((m[0], int(m[1]), int(m[2])) for m in re.findall(r"comment group (\S+) (\d+) (\d+)", header))
    pos = end + len(b"end_header\n")
    try:
        verts = np.frombuffer(data, dtype="<f8", count=3 * nv, offset=pos).reshape(nv, 3)
        face = np.frombuffer(data, dtype=[("n", "u1"), ("idx", "<i4", 3)], count=nt, offset=pos + 24 * nv)
    except ValueError as exc:
        raise FormatError(f"truncated PLY body: {exc}") from None
    if nt and not np.all(face["n"] == 3):
        raise FormatError("only triangle faces are supported")
    return Mesh(verts.copy(), face["idx"].astype(np.int64), groups)


def parse_mesh(data: bytes) -> Mesh:
    return parse_ply(data) if data.startswith(b"ply\n") else parse_obj(data)
