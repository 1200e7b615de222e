"""PCA normals with minimum-spanning-tree sign propagation (Hoppe-style)."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree

from .errors import DataError
from .geom import PointCloud, SpatialIndex, build_spatial_index, pca_normals


class NormalSource(str, enum.Enum):
    MST_INIT = "MST_INIT"
    NETWORK = "NETWORK"
    EXTERNAL = "EXTERNAL"


@dataclass
class RiemannianGraph:
    n_vertices: int
    i: np.ndarray
    j: np.ndarray
    weight: np.ndarray
    k: int
    points: np.ndarray

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.i))
        a = sp.coo_matrix((data, (self.i, self.j)), shape=(self.n_vertices,) * 2)
        return (a + a.T).tocsr()

    def component_count(self) -> int:
        return connected_components(self.adjacency(), directed=False)[0]


@dataclass
class OrientedNormalField:
    normals: np.ndarray
    signs: np.ndarray
    source: NormalSource

    def __len__(self) -> int:
        return len(self.normals)


def _edge_weights(normals, i, j):
    dots = np.abs((normals[i] * normals[j]).sum(axis=1))
    return np.clip(1.0 - dots, 0.0, 1.0)


def riemannian_graph(cloud: PointCloud, unoriented, k: int, index: SpatialIndex | None = None) -> RiemannianGraph:
    """Symmetric k-NN graph weighted by ``1 - |n_i . n_j|``, bridged to be connected."""
    pts = cloud.points
    n = len(pts)
    unoriented = np.asarray(unoriented, dtype=np.float64)
    if unoriented.shape != pts.shape:
        raise DataError(f"normals shape {unoriented.shape} does not match cloud {pts.shape}")
    if k < 2:
        raise DataError(f"graph degree k must be >= 2, got {k}")
    if k > n:
        raise DataError(f"graph degree k={k} exceeds cloud size {n}")
    k_eff = min(k, n - 1)
    index = index or build_spatial_index(pts)
    nbr, _ = index.query(pts, k_eff + 1)
    rows = np.arange(n)[:, None]
    is_self = nbr == rows
    # Drop the query itself; if a duplicate outranked it, drop the farthest instead.
    drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), k_eff)
    keep = np.ones_like(nbr, dtype=bool)
    keep[np.arange(n), drop] = False
    nbr = nbr[keep].reshape(n, k_eff)
    a = np.repeat(np.arange(n), k_eff)
    b = nbr.ravel()
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    pairs = np.unique(lo * n + hi)
    i, j = pairs // n, pairs % n

    graph = RiemannianGraph(n, i, j, _edge_weights(unoriented, i, j), k, pts)
    return _bridge_components(graph, pts, unoriented)


def _bridge_components(graph: RiemannianGraph, pts, normals) -> RiemannianGraph:
    while True:
        ncomp, labels = connected_components(graph.adjacency(), directed=False)
        if ncomp == 1:
            return graph
        sizes = np.bincount(labels)
        largest = int(np.argmax(sizes))
        new_i, new_j = [], []
        for c in range(ncomp):
            if c == largest:
                continue
            inside = np.flatnonzero(labels == c)
            outside = np.flatnonzero(labels != c)
            idx, dist = SpatialIndex(pts[outside]).query(pts[inside], 1)
            best = np.lexsort((inside, dist[:, 0]))[0]
            a, b = int(inside[best]), int(outside[idx[best, 0]])
            new_i.append(min(a, b))
            new_j.append(max(a, b))
        i = np.concatenate([graph.i, new_i]).astype(np.int64)
        j = np.concatenate([graph.j, new_j]).astype(np.int64)
        pairs = np.unique(i * graph.n_vertices + j)
        i, j = pairs // graph.n_vertices, pairs % graph.n_vertices
        graph = RiemannianGraph(graph.n_vertices, i, j, _edge_weights(normals, i, j), graph.k, pts)


def spanning_tree(graph: RiemannianGraph) -> tuple[sp.csr_matrix, float]:
    """Minimum spanning tree as a symmetric CSR adjacency plus its total weight."""
    n = graph.n_vertices
    # scipy treats explicit zeros as missing edges; a constant offset keeps
    # every edge present without changing which tree is minimal.
    w = sp.coo_matrix((graph.weight + 1.0, (graph.i, graph.j)), shape=(n, n)).tocsr()
    tree = minimum_spanning_tree(w).tocoo()
    total = float((tree.data - 1.0).sum())
    data = np.ones(len(tree.data))
    adj = sp.coo_matrix((data, (tree.row, tree.col)), shape=(n, n))
    adj = (adj + adj.T).tocsr()
    adj.sort_indices()
    return adj, total


def mst_orient(graph: RiemannianGraph, unoriented, seed_sign: int | None = None) -> OrientedNormalField:
    """Propagate signs depth-first over the MST from the highest point.

    The seed is the point with maximal z (lowest index on ties); its normal is
    flipped to have z >= 0 unless ``seed_sign`` overrides it.
    """
    unoriented = np.asarray(unoriented, dtype=np.float64)
    points = graph.points
    n = graph.n_vertices
    if graph.component_count() != 1:
        raise DataError("graph is disconnected; bridge components before orienting")
    adj, _ = spanning_tree(graph)
    indptr, indices = adj.indptr, adj.indices

    seed = int(np.argmax(points[:, 2]))
    if seed_sign is None:
        seed_sign = 1 if unoriented[seed, 2] >= 0 else -1
    signs = np.zeros(n, dtype=np.int8)
    signs[seed] = seed_sign
    stack = [seed]
    while stack:
        u = stack.pop()
        nu = unoriented[u]
        su = signs[u]
        children = [v for v in indices[indptr[u]:indptr[u + 1]] if signs[v] == 0]
        for v in reversed(children):
            signs[v] = su if float(nu @ unoriented[v]) >= 0.0 else -su
            stack.append(v)
    normals = unoriented * signs[:, None].astype(np.float64)
    return OrientedNormalField(normals, signs.astype(np.int64), NormalSource.MST_INIT)


def init_oriented_normals(cloud: PointCloud, k_pca: int = 16, k_graph: int = 8) -> OrientedNormalField:
    n = len(cloud)
    if n <= max(k_pca, k_graph):
        raise DataError(f"cloud of {n} points is too small for k_pca={k_pca}, k_graph={k_graph}")
    index = build_spatial_index(cloud.points)
    nbr, _ = index.query(cloud.points, k_pca)
    unoriented = pca_normals(cloud.points, nbr)
    graph = riemannian_graph(cloud, unoriented, k_graph, index=index)
    return mst_orient(graph, unoriented)
