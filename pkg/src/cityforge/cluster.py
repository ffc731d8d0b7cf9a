"""Appearance/height features and a from-scratch HDBSCAN.

Pipeline: core distances -> mutual reachability -> exact Prim MST ->
single-linkage dendrogram -> condensed tree -> excess-of-mass (or leaf)
selection. Core distances count the point itself as its first neighbour,
so ``min_samples=1`` gives zero core distances.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .embeddings import EmbeddingSet
from .errors import AlignmentError


@dataclass(frozen=True, eq=False)
class FeatureVector:
    building_id: str
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class ClusterLabels:
    labels: np.ndarray
    probabilities: np.ndarray
    ids: tuple[str, ...] = ()

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["id", "label", "probability"])
        ids = self.ids or tuple(str(i) for i in range(len(self.labels)))
        for k, lab, p in zip(ids, self.labels, self.probabilities):
            w.writerow([k, int(lab), f"{float(p):.6f}"])
        return out.getvalue()


def build_features(
    embeddings: EmbeddingSet,
    heights: Mapping[str, float] | Sequence[float],
    height_scale: float = 1.0,
    standardize: bool = False,
) -> list[FeatureVector]:
    """f_i = [v_i; scale * h_i], optionally z-scored per dimension."""
    if isinstance(heights, Mapping):
        missing = [k for k in embeddings.ids if k not in heights]
        extra = [k for k in heights if k not in set(embeddings.ids)]
        if missing or extra:
            raise AlignmentError(f"ids do not align (missing heights {missing[:3]}, unknown {extra[:3]})")
        h = np.array([heights[k] for k in embeddings.ids], dtype=np.float64)
    else:
        h = np.asarray(heights, dtype=np.float64)
        if h.shape != (len(embeddings),):
            raise AlignmentError(f"{len(h)} heights for {len(embeddings)} embeddings")
    feats = np.column_stack([embeddings.vectors, height_scale * h])
    if standardize:
        std = feats.std(axis=0)
        feats = (feats - feats.mean(axis=0)) / np.where(std > 0, std, 1.0)
    return [FeatureVector(k, row) for k, row in zip(embeddings.ids, feats)]


def core_distances(points: np.ndarray, min_samples: int) -> np.ndarray:
    d = cdist(points, points)
    return np.partition(d, min_samples - 1, axis=1)[:, min_samples - 1]


def mutual_reachability(points: np.ndarray, core: np.ndarray) -> np.ndarray:
    d = cdist(points, points)
    return np.maximum(d, np.maximum(core[:, None], core[None, :]))


class MSTEdge(NamedTuple):
    a: int
    b: int
    weight: float
    distance: float


def _better(w_new, lo_new, hi_new, w_old, lo_old, hi_old):
    """Lexicographic (weight, low index, high index) comparison."""
    return (w_new < w_old) | ((w_new == w_old) & ((lo_new < lo_old) | ((lo_new == lo_old) & (hi_new < hi_old))))


def mst_mutual_reachability(points: np.ndarray, core: np.ndarray) -> list[MSTEdge]:
    """Prim's algorithm over the implicit complete mutual-reachability graph.

    Equal weights are ordered by the (low, high) index pair.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 2:
        return []
    dist = cdist(pts, pts)
    mr = np.maximum(dist, np.maximum(core[:, None], core[None, :]))
    idx = np.arange(n)
    in_tree = np.zeros(n, dtype=bool)
    key_w = np.full(n, np.inf)
    key_d = np.full(n, np.inf)
    key_lo = np.full(n, n)
    key_hi = np.full(n, n)
    parent = np.full(n, -1)
    edges: list[MSTEdge] = []
    v = 0
    for _ in range(n - 1):
        in_tree[v] = True
        lo, hi = np.minimum(idx, v), np.maximum(idx, v)
        upd = ~in_tree & _better(mr[v], lo, hi, key_w, key_lo, key_hi)
        key_w[upd], key_d[upd] = mr[v, upd], dist[v, upd]
        key_lo[upd], key_hi[upd] = lo[upd], hi[upd]
        parent[upd] = v
        cand = np.flatnonzero(~in_tree)
        order = np.lexsort((key_hi[cand], key_lo[cand], key_w[cand]))
        v = int(cand[order[0]])
        a, b = sorted((int(parent[v]), v))
        edges.append(MSTEdge(a, b, float(key_w[v]), float(key_d[v])))
    return edges


def single_linkage(edges: Sequence[MSTEdge], n: int) -> np.ndarray:
    """Dendrogram in scipy layout: rows (left, right, distance, size)."""
    order = sorted(edges, key=lambda e: (e.weight, e.a, e.b))
    parent = list(range(2 * n - 1))
    size = [1] * n + [0] * (n - 1)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    rows = np.zeros((n - 1, 4))
    for k, e in enumerate(order):
        ra, rb = find(e.a), find(e.b)
        new = n + k
        parent[ra] = parent[rb] = new
        size[new] = size[ra] + size[rb]
        rows[k] = (ra, rb, e.weight, size[new])
    return rows


class CondensedTree(NamedTuple):
    parent: np.ndarray
    child: np.ndarray
    lam: np.ndarray
    size: np.ndarray

    @property
    def root(self) -> int:
        return int(self.parent.min())


def _descendants(hier: np.ndarray, node: int, n: int) -> list[int]:
    out, queue = [], [node]
    while queue:
        out.extend(queue)
        nxt = []
        for x in queue:
            if x >= n:
                nxt.extend((int(hier[x - n, 0]), int(hier[x - n, 1])))
        queue = nxt
    return out


def condense_tree(hier: np.ndarray, min_cluster_size: int) -> CondensedTree:
    """Walk the dendrogram top-down, keeping only splits with two large sides.

    Points shed from a cluster by undersized splits are recorded with the
    lambda (1 / distance) at which they leave.
    """
    n = len(hier) + 1
    root = 2 * n - 2

    def count(node):
        return int(hier[node - n, 3]) if node >= n else 1

    relabel = {root: n}
    next_label = n + 1
    ignore: set[int] = set()
    rows: list[tuple[int, int, float, int]] = []
    for node in _descendants(hier, root, n):
        if node < n or node in ignore:
            continue
        left, right, dist = int(hier[node - n, 0]), int(hier[node - n, 1]), hier[node - n, 2]
        lam = 1.0 / dist if dist > 0 else math.inf
        lc, rc = count(left), count(right)
        me = relabel[node]
        if lc >= min_cluster_size and rc >= min_cluster_size:
            for child, c in ((left, lc), (right, rc)):
                relabel[child] = next_label
                rows.append((me, next_label, lam, c))
                next_label += 1
            continue
        shed = []
        if lc < min_cluster_size:
            shed.append(left)
        else:
            relabel[left] = me
        if rc < min_cluster_size:
            shed.append(right)
        else:
            relabel[right] = me
        for side in shed:
            for sub in _descendants(hier, side, n):
                if sub < n:
                    rows.append((me, sub, lam, 1))
                ignore.add(sub)
    arr = np.array(rows, dtype=object) if rows else np.zeros((0, 4), dtype=object)
    return CondensedTree(
        arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2].astype(np.float64), arr[:, 3].astype(np.int64)
    )


def cluster_stability(tree: CondensedTree) -> dict[int, float]:
    root = tree.root
    births = {int(c): float(l) for c, l, s in zip(tree.child, tree.lam, tree.size) if s > 1}
    births[root] = 0.0
    stab = {int(c): 0.0 for c in np.unique(tree.parent)}
    for c in births:
        stab.setdefault(c, 0.0)
    for p, lam, s in zip(tree.parent, tree.lam, tree.size):
        gap = lam - births[int(p)]
        if math.isnan(gap):  # inf - inf: born and shed at zero distance
            gap = 0.0
        stab[int(p)] += gap * s
    return stab


def _cluster_children(tree: CondensedTree) -> dict[int, list[int]]:
    kids: dict[int, list[int]] = {}
    for p, c, s in zip(tree.parent, tree.child, tree.size):
        if s > 1:
            kids.setdefault(int(p), []).append(int(c))
    return kids


def _subtree(kids: dict[int, list[int]], node: int) -> list[int]:
    out, stack = [], [node]
    while stack:
        x = stack.pop()
        out.append(x)
        stack.extend(kids.get(x, []))
    return out


def select_clusters(tree: CondensedTree, method: str = "eom", allow_single_cluster: bool = False) -> set[int]:
    stab = cluster_stability(tree)
    kids = _cluster_children(tree)
    root = tree.root
    nodes = sorted(stab, reverse=True)
    if not allow_single_cluster:
        nodes = [c for c in nodes if c != root]
    if method == "eom":
        chosen = {c: True for c in nodes}
        for node in nodes:
            sub = sum(stab[c] for c in kids.get(node, []))
            if sub > stab[node]:
                chosen[node] = False
                stab[node] = sub
            else:
                for d in _subtree(kids, node):
                    if d != node:
                        chosen[d] = False
        return {c for c, ok in chosen.items() if ok}
    if method == "leaf":
        leaves = {c for c in _subtree(kids, root) if c != root and c not in kids}
        return leaves
    raise ValueError(f"unknown cluster selection method {method!r}")


def label_points(tree: CondensedTree, clusters: set[int], n: int, allow_single_cluster: bool = False):
    """Assign each point to its selected ancestor cluster, else noise (-1)."""
    root = tree.root
    parent_of = {}
    lam_of = np.zeros(n)
    for p, c, lam in zip(tree.parent, tree.child, tree.lam):
        parent_of[int(c)] = int(p)
        if c < n:
            lam_of[c] = lam
    owner = np.full(n, -1)
    for i in range(n):
        node = parent_of[i]
        while node not in clusters and node != root:
            node = parent_of[node]
        if node in clusters and node != root:
            owner[i] = node
        elif node == root and clusters == {root} and allow_single_cluster:
            threshold = tree.lam[tree.parent == root].max()
            if lam_of[i] >= threshold:
                owner[i] = root
    # membership strength: departure lambda relative to the cluster's max
    deaths: dict[int, float] = {}
    for p, lam in zip(tree.parent, tree.lam):
        deaths[int(p)] = max(deaths.get(int(p), 0.0), float(lam))
    probs = np.zeros(n)
    for i in range(n):
        c = owner[i]
        if c < 0:
            continue
        top = deaths.get(int(c), 0.0)
        if top == 0.0 or math.isinf(lam_of[i]):
            probs[i] = 1.0
        else:
            probs[i] = min(lam_of[i], top) / top
    return owner, probs


def canonical_labels(owner: np.ndarray) -> np.ndarray:
    """Renumber clusters 0..K-1 by their smallest member index; noise stays -1."""
    labels = np.full(len(owner), -1)
    mapping: dict[int, int] = {}
    for i, c in enumerate(owner):
        if c < 0:
            continue
        if c not in mapping:
            mapping[c] = len(mapping)
        labels[i] = mapping[c]
    return labels


def hdbscan(
    points,
    min_cluster_size: int = 2,
    min_samples: int = 2,
    method: str = "eom",
    allow_single_cluster: bool = False,
) -> ClusterLabels:
    """Density-based clustering of feature vectors (or an (n, d) array)."""
    ids: tuple[str, ...] = ()
    if len(points) and isinstance(points[0], FeatureVector):
        ids = tuple(p.building_id for p in points)
        X = np.stack([p.values for p in points])
    else:
        X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if n < 2:
        raise ValueError("hdbscan needs at least 2 points")
    if min_cluster_size < 2 or min_samples < 1:
        raise ValueError("need min_cluster_size >= 2 and min_samples >= 1")
    if n < min_samples:
        raise ValueError(f"{n} points is fewer than min_samples={min_samples}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    core = core_distances(X, min_samples)
    edges = mst_mutual_reachability(X, core)
    tree = condense_tree(single_linkage(edges, n), min_cluster_size)
    clusters = select_clusters(tree, method, allow_single_cluster)
    owner, probs = label_points(tree, clusters, n, allow_single_cluster)
    return ClusterLabels(canonical_labels(owner), probs, ids)
