"""Geometry and consistency metrics for generated regions.

Chamfer distance is the symmetric mean of non-squared nearest-neighbour
distances with a 1/2 factor. F-score counts points strictly closer than tau.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .embeddings import EmbeddingSet
from .errors import AlignmentError
from .scene import Mesh
from .voxels import BinaryMask

TAU_FRACTION = 0.05


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (n, 3)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))


def _cloud(c) -> np.ndarray:
    pts = c.points if isinstance(c, PointCloud) else PointCloud(c).points
    if not len(pts):
        raise ValueError("point cloud is empty")
    return pts


def sample_points(mesh: Mesh, n: int, seed: int = 0) -> PointCloud:
    """Area-uniform samples: triangle picked by area, then uniform barycentrics."""
    if n < 1:
        raise ValueError("need at least one sample")
    if not mesh.n_triangles:
        raise ValueError("mesh has no triangles")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.Generator(np.random.Philox(seed))
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return PointCloud(pts)


def nearest_distances(src, dst) -> np.ndarray:
    """For each point of src, Euclidean distance to the closest point of dst."""
    d, _ = cKDTree(_cloud(dst)).query(_cloud(src), k=1)
    return d


def chamfer(a, b) -> float:
    pa, pb = _cloud(a), _cloud(b)
    return 0.5 * (float(nearest_distances(pa, pb).mean()) + float(nearest_distances(pb, pa).mean()))


def default_tau(reference) -> float:
    return TAU_FRACTION * PointCloud(_cloud(reference)).bbox_diagonal()


def fscore(a, b, tau: float | None = None) -> float:
    """F1 of precision (a near b) and recall (b near a); b is the reference."""
    pa, pb = _cloud(a), _cloud(b)
    if tau is None:
        tau = default_tau(pb)
    if not tau > 0:
        raise ValueError("tau must be positive")
    p = float(np.mean(nearest_distances(pa, pb) < tau))
    r = float(np.mean(nearest_distances(pb, pa) < tau))
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _bits(mask) -> np.ndarray:
    return np.asarray(mask.bits if isinstance(mask, BinaryMask) else mask, dtype=bool)


def iou_top(mask_gen, mask_gt) -> float:
    g, t = _bits(mask_gen), _bits(mask_gt)
    if g.shape != t.shape:
        raise ValueError(f"mask shapes differ: {g.shape} vs {t.shape}")
    union = np.count_nonzero(g | t)
    if union == 0:
        return 1.0  # both empty
    return np.count_nonzero(g & t) / union


def _squared_norms(vectors: np.ndarray) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    sq = np.sum(v * v, axis=1)
    if np.any(sq == 0):
        raise ValueError("zero-length embedding vector")
    return sq


def _row_cosines(a: np.ndarray, b: np.ndarray, sq_a: np.ndarray, sq_b: np.ndarray) -> np.ndarray:
    # dot / sqrt(|a|^2 |b|^2) is exactly 1 for identical rows since sqrt(fl(x*x)) == x
    return np.sum(a * b, axis=1) / np.sqrt(sq_a * sq_b)


def pairwise_cos(embeddings) -> float:
    """Mean cosine similarity over all unordered pairs."""
    v = embeddings.vectors if isinstance(embeddings, EmbeddingSet) else np.asarray(embeddings, dtype=np.float64)
    if v.ndim != 2 or len(v) < 2:
        raise ValueError("need at least two embeddings")
    v = np.asarray(v, dtype=np.float64)
    sq = _squared_norms(v)
    total, count = 0.0, 0
    for i in range(len(v) - 1):
        rest = v[i + 1 :]
        total += float(np.sum(_row_cosines(np.broadcast_to(v[i], rest.shape), rest, sq[i], sq[i + 1 :])))
        count += len(rest)
    return total / count


def regional_score(iou_mean: float, clip_pairwise: float) -> float:
    if not 0.0 <= iou_mean <= 1.0:
        raise ValueError(f"iou must lie in [0, 1], got {iou_mean}")
    if not -1.0 <= clip_pairwise <= 1.0:
        raise ValueError(f"cosine similarity must lie in [-1, 1], got {clip_pairwise}")
    return iou_mean * clip_pairwise


def clip_score(gen: EmbeddingSet, ref: EmbeddingSet) -> float:
    """Mean cosine similarity between generated and reference vectors paired by id."""
    if set(gen.ids) != set(ref.ids):
        raise AlignmentError("generated and reference embeddings cover different ids")
    if gen.dim != ref.dim:
        raise AlignmentError(f"embedding dims differ: {gen.dim} vs {ref.dim}")
    a = np.asarray(gen.vectors, dtype=np.float64)
    b = np.asarray(ref.aligned(gen.ids), dtype=np.float64)
    return float(np.mean(_row_cosines(a, b, _squared_norms(a), _squared_norms(b))))


@dataclass
class MetricReport:
    region: str
    cd: float | None = None
    fscore: float | None = None
    tau: float | None = None
    iou_top: float | None = None
    clip_pairwise: float | None = None
    s_regional: float | None = None
    clip_score: float | None = None
    seeds: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


SUMMARY_FIELDS = ("region", "cd", "fscore", "tau", "iou_top", "clip_pairwise", "s_regional", "clip_score")


def summary_csv(reports) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in reports:
        row = asdict(r)
        w.writerow(["" if row[k] is None else (f"{row[k]:.9g}" if k != "region" else row[k]) for k in SUMMARY_FIELDS])
    return out.getvalue()
