"""Independent reference computations used only by the tests.

Nothing here imports the package's implementation of the quantity being
checked; each oracle is the slow, obvious version.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def brute_nn(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Nearest-neighbour distance from every src point, by full pairwise search."""
    out = np.empty(len(src))
    for i, p in enumerate(src):
        out[i] = min(math.sqrt(sum((p[k] - q[k]) ** 2 for k in range(3))) for q in dst)
    return out


def brute_nn_numpy(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    d = np.sqrt(((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2))
    return d.min(axis=1)


def brute_chamfer(a, b) -> float:
    return 0.5 * (brute_nn_numpy(a, b).mean() + brute_nn_numpy(b, a).mean())


def brute_fscore(a, b, tau) -> float:
    p = np.mean(brute_nn_numpy(a, b) < tau)
    r = np.mean(brute_nn_numpy(b, a) < tau)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def exposed_face_count(occ: np.ndarray) -> int:
    n = occ.shape
    count = 0
    for x, y, z in zip(*np.nonzero(occ)):
        for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            q = (x + d[0], y + d[1], z + d[2])
            if not all(0 <= q[k] < n[k] for k in range(3)) or not occ[q]:
                count += 1
    return count


def shapely_raster(rings, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """(len(xs), len(ys)) mask of sample points strictly inside the polygon."""
    import shapely

    poly = shapely.Polygon(rings[0], holes=list(rings[1:]))
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return shapely.contains_xy(poly, X, Y)


def cartesian_prompts(categories, rules):
    """All full assignments minus those containing a forbidden pair."""
    names = [c[0] for c in categories]
    out = []
    for combo in itertools.product(*[c[1] for c in categories]):
        a = dict(zip(names, combo))
        if any(a.get(r[0][0]) == r[0][1] and a.get(r[1][0]) == r[1][1] for r in rules):
            continue
        out.append(combo)
    return out


def adjusted_rand(a, b) -> float:
    from sklearn.metrics import adjusted_rand_score

    return adjusted_rand_score(a, b)


def reference_hdbscan(x, min_cluster_size, min_samples, method="eom", allow_single_cluster=False):
    from sklearn.cluster import HDBSCAN

    fit = HDBSCAN(
        min_cluster_size=min_cluster_size,
        min_samples=min_samples,
        cluster_selection_method=method,
        allow_single_cluster=allow_single_cluster,
        algorithm="brute",
    ).fit(x)
    return fit.labels_, fit.probabilities_


def reference_probabilities(x, min_cluster_size, min_samples, **kw) -> np.ndarray:
    """Membership strengths from the reference condensed tree.

    Each cluster's death lambda is the max over all of its rows; the
    reference's own output takes the max over the last contiguous run of
    rows per parent only, which differs when rows interleave.
    """
    from sklearn.cluster import HDBSCAN
    from sklearn.cluster._hdbscan._tree import _condense_tree

    fit = HDBSCAN(min_cluster_size=min_cluster_size, min_samples=min_samples, algorithm="brute", **kw).fit(x)
    ct = _condense_tree(fit._single_linkage_tree_, min_cluster_size)
    parent_of = dict(zip(ct["child"].tolist(), ct["parent"].tolist()))
    lam_of = dict(zip(ct["child"].tolist(), ct["value"].tolist()))
    deaths: dict[int, float] = {}
    for p, v in zip(ct["parent"].tolist(), ct["value"].tolist()):
        deaths[p] = max(deaths.get(p, 0.0), v)

    def chain(i):
        out = []
        while i in parent_of:
            i = parent_of[i]
            out.append(i)
        return out

    probs = np.zeros(len(x))
    for lab in set(fit.labels_.tolist()) - {-1}:
        members = np.flatnonzero(fit.labels_ == lab)
        common = set(chain(int(members[0])))
        for m in members[1:]:
            common &= set(chain(int(m)))
        owner = max(common)  # deepest common ancestor has the largest id
        for m in members:
            top, lam = deaths[owner], lam_of[int(m)]
            probs[m] = 1.0 if top == 0 or math.isinf(lam) else min(lam, top) / top
    return probs


def renumber(labels) -> np.ndarray:
    """Relabel clusters by first appearance; noise (negative) becomes -1."""
    out = np.full(len(labels), -1)
    seen: dict[int, int] = {}
    for i, lab in enumerate(labels):
        if lab < 0:
            continue
        out[i] = seen.setdefault(int(lab), len(seen))
    return out


def three_blobs(seed: int = 7, n: int = 100, sigma: float = 0.1):
    centers = np.array([[0.0, 0.0], [1.5, 0.0], [0.75, 1.3]])
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(c, sigma, (n, 2)) for c in centers])
    return x, np.repeat(np.arange(3), n)


def blob_with_outliers(seed: int = 3):
    rng = np.random.default_rng(seed)
    blob = rng.normal(0.0, 0.1, (100, 2))
    outliers = rng.uniform(-3.0, 3.0, (40, 2))
    outliers = outliers[np.linalg.norm(outliers, axis=1) > 1.5][:10]
    return np.vstack([blob, outliers]), np.r_[np.zeros(100, int), np.ones(len(outliers), int)]


def ring_target(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 2 * np.pi, n)
    r = 1.0 + 0.1 * rng.standard_normal(n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def chamfer_2d(a, b) -> float:
    from scipy.spatial import cKDTree

    return 0.5 * (cKDTree(b).query(a)[0].mean() + cKDTree(a).query(b)[0].mean())


def random_rectilinear(rng, max_rects: int = 4):
    """Simple rectilinear polygon: a union of axis-aligned rectangles.

    Returns the outer ring as an (n, 2) array in meters, or None when the
    union is not a single hole-free polygon.
    """
    import shapely

    boxes = []
    for _ in range(int(rng.integers(1, max_rects + 1))):
        x0, y0 = rng.uniform(0.0, 30.0, 2)
        w, h = rng.uniform(6.0, 25.0, 2)
        boxes.append(shapely.box(x0, y0, x0 + w, y0 + h))
    shape = shapely.unary_union(boxes)
    if shape.geom_type != "Polygon" or len(shape.interiors):
        return None
    return np.asarray(shape.exterior.coords)
