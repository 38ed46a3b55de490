"""Cell graph construction and the spatial feature families built on it.

The graph is a symmetrized k-nearest-neighbor graph (k = 6): an undirected
edge exists when either endpoint selects the other.  Neighbor candidates are
ordered by (distance, instance id) so equal distances resolve toward the
smaller id; with n <= k+1 nodes the graph is complete.

Feature families:
  * sna_features       - degree, degree centrality, clustering, closeness,
                         each aggregated by mean/std/skewness/kurtosis/max
  * global_heterogeneity - Shannon, Simpson, max-entropy, richness over type
                         proportions; Newman modularity with types as
                         communities; Ripley K at four radii for the anchor
                         type, no edge correction
  * local_heterogeneity  - per-node neighborhood entropy statistics
                         (skewness over nodes) and pairwise infiltration
                         (cross-type vs within-type edge counts)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.spatial.distance import cdist

from .featio import BASE_PATCH_SIDE, KFN_RADII, NucleusTypeSet
from .morphometrics import instances_by_id, moment_stats

KNN_K = 6


@dataclass
class CellGraph:
    """Nodes ordered by ascending instance id."""

    xy: np.ndarray                     # (n, 2) float64 centroids, (x, y)
    types: np.ndarray                  # (n,) int
    ids: np.ndarray                    # (n,) int instance ids
    edges: np.ndarray                  # (m, 2) int node indices, i < j, lexsorted
    adjacency: list = field(default_factory=list)   # per-node sorted neighbor arrays

    @property
    def n(self):
        return int(self.xy.shape[0])

    @property
    def m(self):
        return int(self.edges.shape[0])

    @classmethod
    def empty(cls):
        return cls(xy=np.zeros((0, 2)), types=np.zeros(0, dtype=int),
                   ids=np.zeros(0, dtype=int),
                   edges=np.zeros((0, 2), dtype=int), adjacency=[])


def build_graph_from_points(xy, types, ids=None, k=KNN_K):
    """Symmetrized kNN graph over point centroids."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    types = np.asarray(types, dtype=int)
    n = xy.shape[0]
    if types.shape != (n,):
        raise ValueError("types length must match point count")
    ids = np.arange(n) if ids is None else np.asarray(ids, dtype=int)
    order = np.argsort(ids, kind="stable")
    xy, types, ids = xy[order], types[order], ids[order]
    if n == 0:
        return CellGraph.empty()
    if n == 1:
        return CellGraph(xy=xy, types=types, ids=ids,
                         edges=np.zeros((0, 2), dtype=int), adjacency=[np.zeros(0, int)])
    dist = cdist(xy, xy)
    np.fill_diagonal(dist, np.inf)
    kk = min(k, n - 1)
    pairs = set()
    for i in range(n):
        # ties toward the smaller instance id; ids are ascending in node order
        cand = np.lexsort((ids, dist[i]))[:kk]
        for j in cand:
            pairs.add((min(i, int(j)), max(i, int(j))))
    if pairs:
        edges = np.array(sorted(pairs), dtype=int)
    else:
        edges = np.zeros((0, 2), dtype=int)
    adjacency = [[] for _ in range(n)]
    for i, j in edges:
        adjacency[i].append(j)
        adjacency[j].append(i)
    adjacency = [np.array(sorted(a), dtype=int) for a in adjacency]
    return CellGraph(xy=xy, types=types, ids=ids, edges=edges, adjacency=adjacency)


def graph_from_edges(xy, types, edges, ids=None):
    """Build a CellGraph with an explicit edge list (fixtures, debugging)."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    types = np.asarray(types, dtype=int)
    n = xy.shape[0]
    ids = np.arange(n) if ids is None else np.asarray(ids, dtype=int)
    pairs = sorted({(min(i, j), max(i, j)) for i, j in edges})
    for i, j in pairs:
        if i == j or not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"bad edge ({i}, {j})")
    earr = np.array(pairs, dtype=int) if pairs else np.zeros((0, 2), dtype=int)
    adjacency = [[] for _ in range(n)]
    for i, j in pairs:
        adjacency[i].append(j)
        adjacency[j].append(i)
    adjacency = [np.array(sorted(a), dtype=int) for a in adjacency]
    return CellGraph(xy=xy, types=types, ids=ids, edges=earr, adjacency=adjacency)


def build_cell_graph(bundle, k=KNN_K):
    """Graph over mask centroids of a patch bundle; zero nuclei -> empty graph."""
    pixels = instances_by_id(bundle.instances)
    if not pixels:
        return CellGraph.empty()
    ids = sorted(pixels)
    xy = np.array([[pixels[i][1].mean(), pixels[i][0].mean()] for i in ids])
    types = np.array([bundle.types[i] for i in ids], dtype=int)
    return build_graph_from_points(xy, types, ids=np.array(ids), k=k)


def _csr(graph):
    n = graph.n
    if graph.m == 0:
        return csr_matrix((n, n))
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    data = np.ones(2 * graph.m)
    return csr_matrix((data, (np.concatenate([i, j]), np.concatenate([j, i]))),
                      shape=(n, n))


def node_metrics(graph):
    """Per-node (degree, degree_centrality, clustering, closeness) columns."""
    n = graph.n
    if n == 0:
        return np.zeros((0, 4))
    degree = np.array([len(a) for a in graph.adjacency], dtype=np.float64)
    centrality = degree / (n - 1) if n > 1 else np.zeros(n)
    clustering = np.zeros(n)
    adj_sets = [set(a.tolist()) for a in graph.adjacency]
    for v in range(n):
        d = len(graph.adjacency[v])
        if d < 2:
            continue
        links = 0
        neigh = graph.adjacency[v]
        for ui in range(d):
            su = adj_sets[neigh[ui]]
            for wi in range(ui + 1, d):
                if neigh[wi] in su:
                    links += 1
        clustering[v] = 2.0 * links / (d * (d - 1))
    closeness = np.zeros(n)
    if n > 1:
        sp = shortest_path(_csr(graph), method="D", unweighted=True)
        _, labels = connected_components(_csr(graph), directed=False)
        comp_sizes = np.bincount(labels)
        for v in range(n):
            row = sp[v]
            total = row[np.isfinite(row)].sum()
            if total > 0:
                comp = comp_sizes[labels[v]]
                closeness[v] = ((n - 1) / total) * ((comp - 1) / (n - 1))
    return np.stack([degree, centrality, clustering, closeness], axis=1)


def sna_features(graph):
    """20 numbers: each node metric aggregated by mean/std/skew/kurt/max."""
    if graph.n == 0:
        return np.zeros(20)
    cols = node_metrics(graph)
    return np.concatenate([moment_stats(cols[:, j], with_max=True)
                           for j in range(4)])


def _entropy_stats(proportions):
    p = proportions[proportions > 0]
    shannon = float(-(p * np.log(p)).sum()) if p.size else 0.0
    simpson = float(1.0 - (p * p).sum()) if p.size else 0.0
    richness = float(p.size)
    max_entropy = float(np.log(richness)) if richness >= 1 else 0.0
    return shannon, simpson, max_entropy, richness


def ripley_k(xy, mask, area, radii):
    """K(r) = area * #ordered pairs within r / (m (m-1)); no edge correction."""
    pts = xy[mask]
    m = pts.shape[0]
    if m < 2:
        return np.zeros(len(radii))
    d = cdist(pts, pts)
    np.fill_diagonal(d, np.inf)
    return np.array([area * float((d <= r).sum()) / (m * (m - 1)) for r in radii])


def global_heterogeneity(graph, patch_area, type_set):
    """9 numbers: shannon, simpson, max_entropy, richness, modularity, then
    K at the four radii (scaled by sqrt(patch_area)/1792 off the base patch)."""
    c = type_set.c
    out = np.zeros(9)
    if graph.n == 0:
        return out
    counts = np.bincount(graph.types, minlength=c).astype(np.float64)
    out[0], out[1], out[2], out[3] = _entropy_stats(counts / graph.n)
    m = graph.m
    if m > 0:
        t = graph.types
        within = np.zeros(c)
        for i, j in graph.edges:
            if t[i] == t[j]:
                within[t[i]] += 1.0
        deg_by_type = np.zeros(c)
        degree = np.array([len(a) for a in graph.adjacency], dtype=np.float64)
        np.add.at(deg_by_type, t, degree)
        out[4] = float((within / m - (deg_by_type / (2.0 * m)) ** 2).sum())
    scale = np.sqrt(patch_area) / BASE_PATCH_SIDE
    radii = [r * scale for r in KFN_RADII]
    out[5:9] = ripley_k(graph.xy, graph.types == 0, patch_area, radii)
    return out


def local_heterogeneity(graph, type_set):
    """4 + 2(c-1) numbers: skewness over nodes of the four neighborhood
    diversity measures, then anchor-type infiltration both ways."""
    c = type_set.c
    out = np.zeros(4 + 2 * (c - 1))
    if graph.n == 0:
        return out
    local = np.zeros((graph.n, 4))
    for v in range(graph.n):
        neigh = graph.adjacency[v]
        if len(neigh) == 0:
            continue
        counts = np.bincount(graph.types[neigh], minlength=c).astype(np.float64)
        local[v] = _entropy_stats(counts / counts.sum())
    for j in range(4):
        out[j] = moment_stats(local[:, j])[2]
    cross = np.zeros((c, c))
    for i, j in graph.edges:
        a, b = graph.types[i], graph.types[j]
        cross[a, b] += 1.0
        if a != b:
            cross[b, a] += 1.0
    present = np.bincount(graph.types, minlength=c) > 0
    pos = 4
    for other in range(1, c):
        out[pos] = cross[0, other] / max(1.0, cross[other, other]) if present[other] else 0.0
        pos += 1
    for other in range(1, c):
        out[pos] = cross[other, 0] / max(1.0, cross[0, 0]) if present[0] else 0.0
        pos += 1
    return out
