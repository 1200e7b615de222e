"""Spatial indexing, k-nearest neighbours, patch normalisation and PCA normals."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError

# Relative eigenvalue threshold below which a covariance is treated as rank deficient.
_RANK_TOL = 1e-12
# Chunk size for batched covariance work; keeps peak memory bounded on 100K clouds.
_CHUNK = 16384


@dataclass
class PointCloud:
    points: np.ndarray
    gt_normals: np.ndarray | None = None
    clean_ref: str | None = None
    name: str = "cloud"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DataError(f"points must have shape (N, 3), got {self.points.shape}")
        if len(self.points) == 0:
            raise DataError("point cloud is empty")
        if self.gt_normals is not None:
            self.gt_normals = np.asarray(self.gt_normals, dtype=np.float64)
            if self.gt_normals.shape != self.points.shape:
                raise DataError(
                    f"gt_normals shape {self.gt_normals.shape} does not match points {self.points.shape}"
                )
            lengths = np.linalg.norm(self.gt_normals, axis=1)
            bad = np.flatnonzero(np.abs(lengths - 1.0) > 1e-6)
            if len(bad):
                raise DataError(f"gt normal {bad[0]} is not unit length (|n| = {lengths[bad[0]]:.9g})")

    def __len__(self) -> int:
        return len(self.points)


class SpatialIndex:
    """Exact k-NN over a fixed point set.

    Backed by a kd-tree; results are re-ranked on exact squared distances with
    ties broken by ascending point index, so they match a linear scan.
    """

    def __init__(self, points, leaf_size: int = 16):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
            raise DataError(f"cannot index point array of shape {points.shape}")
        self.points = points
        self.leaf_size = leaf_size
        self._tree = cKDTree(points, leafsize=leaf_size, balanced_tree=True)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(indices, distances)`` of shape (Q, k), sorted ascending."""
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self.points)
        if k < 1:
            raise DataError(f"k must be positive, got {k}")
        if k > n:
            raise DataError(f"k={k} exceeds point count {n}")
        m = min(n, k + 8)
        tree_d, cand = self._tree.query(queries, k=m)
        cand = cand.reshape(len(queries), m)
        tree_d = tree_d.reshape(len(queries), m)
        d2 = _sq_dist(self.points[cand], queries[:, None, :])
        order = np.lexsort((cand, d2), axis=-1)
        cand = np.take_along_axis(cand, order, axis=-1)
        d2 = np.take_along_axis(d2, order, axis=-1)
        idx = cand[:, :k].copy()
        dist2 = d2[:, :k].copy()
        if m < n:
            # The candidate set is provably complete unless the k-th distance
            # touches the tree's search horizon (exact ties, rounding).
            horizon = tree_d[:, -1] ** 2
            unsafe = np.flatnonzero(~(dist2[:, -1] < horizon * (1.0 - 1e-9)))
            for row in unsafe:
                idx[row], dist2[row] = self._exact_row(queries[row], k, dist2[row, -1])
        return idx, np.sqrt(dist2)

    def _exact_row(self, q, k, kth_d2):
        radius = np.sqrt(kth_d2) * (1.0 + 1e-9) + 1e-12
        cand = np.asarray(self._tree.query_ball_point(q, radius), dtype=np.int64)
        d2 = _sq_dist(self.points[cand], q[None, :])
        order = np.lexsort((cand, d2))[:k]
        return cand[order], d2[order]


def _sq_dist(a, b):
    diff = a - b
    return (diff * diff).sum(axis=-1)


def build_spatial_index(points, leaf_size: int = 16) -> SpatialIndex:
    return SpatialIndex(points, leaf_size=leaf_size)


def knn(index: SpatialIndex, query, k: int) -> list[tuple[int, float]]:
    idx, dist = index.query(np.asarray(query, dtype=np.float64)[None, :], k)
    return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]


def brute_knn(points, k: int, n_queries: int | None = None, sources=None) -> np.ndarray:
    """Batched linear-scan k-NN for small point sets.

    ``points`` is (..., N, 3); the first ``n_queries`` points act as queries.
    Neighbours are drawn from ``sources`` (default: ``points``). Returns (..., Q, k)
    indices sorted by distance; ties resolve to the lower index.
    """
    sources = points if sources is None else sources
    q = points if n_queries is None else points[..., :n_queries, :]
    n = sources.shape[-2]
    if k > n:
        raise DataError(f"k={k} exceeds point count {n}")
    d2 = np.zeros(q.shape[:-1] + (n,))
    for axis in range(3):
        diff = q[..., :, None, axis] - sources[..., None, :, axis]
        d2 += diff * diff
    if k == n:
        return np.argsort(d2, axis=-1, kind="stable")
    part = np.argpartition(d2, k - 1, axis=-1)[..., :k]
    pd2 = np.take_along_axis(d2, part, axis=-1)
    order = np.lexsort((part, pd2), axis=-1)
    idx = np.take_along_axis(part, order, axis=-1)
    # argpartition picks arbitrarily among points tied with the k-th distance;
    # redo those rows with a stable full sort.
    kth = np.take_along_axis(d2, idx[..., -1:], axis=-1)
    ambiguous = (d2 <= kth).sum(axis=-1) > k
    if ambiguous.any():
        idx[ambiguous] = np.argsort(d2[ambiguous], axis=-1, kind="stable")[:, :k]
    return idx


def bbox_diagonal(points) -> float:
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise DataError("bbox of empty point set")
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def pca_frames(neighborhoods) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centroids, ascending eigenvalues and eigenvectors for (..., k, 3) neighbourhoods.

    The reduction order per neighbourhood does not depend on the batch layout,
    so a neighbourhood yields bit-identical results alone or inside a batch.
    """
    nb = np.asarray(neighborhoods, dtype=np.float64)
    lead = nb.shape[:-2]
    k = nb.shape[-2]
    flat = nb.reshape(-1, k, 3)
    cents = np.empty((len(flat), 3))
    vals = np.empty((len(flat), 3))
    vecs = np.empty((len(flat), 3, 3))
    for s in range(0, len(flat), _CHUNK):
        t = np.ascontiguousarray(np.swapaxes(flat[s:s + _CHUNK], -1, -2))
        c = t.sum(axis=-1) / k
        d = t - c[..., None]
        cov = (d[:, :, None, :] * d[:, None, :, :]).sum(axis=-1)
        w, v = np.linalg.eigh(cov)
        cents[s:s + _CHUNK], vals[s:s + _CHUNK], vecs[s:s + _CHUNK] = c, w, v
    return cents.reshape(*lead, 3), vals.reshape(*lead, 3), vecs.reshape(*lead, 3, 3)


def _check_rank(vals):
    top = vals[..., 2]
    bad = ~(vals[..., 1] > _RANK_TOL * np.maximum(top, np.finfo(float).tiny))
    return np.flatnonzero(np.ravel(bad))


def pca_normal(patch_points) -> np.ndarray:
    """Unit normal of the least-squares plane (sign unspecified)."""
    pts = np.asarray(patch_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise DataError(f"pca_normal needs at least 3 points, got shape {pts.shape}")
    _, vals, vecs = pca_frames(pts[None])
    if len(_check_rank(vals)):
        raise DataError("degenerate neighbourhood: covariance has rank < 2")
    return vecs[0, :, 0].copy()


def pca_normals(points, neighbor_idx) -> np.ndarray:
    """Vectorised ``pca_normal`` for every row of ``neighbor_idx``."""
    _, vals, vecs = pca_frames(points[neighbor_idx])
    bad = _check_rank(vals)
    if len(bad):
        raise DataError(f"degenerate neighbourhood at point {bad[0]}: covariance has rank < 2")
    return vecs[..., :, 0].copy()


def rotation_from_eigvecs(vecs) -> np.ndarray:
    """Columns ordered by descending eigenvalue, last column flipped for det +1."""
    rot = vecs[..., :, ::-1].copy()
    det = np.linalg.det(rot)
    rot[..., :, 2] *= np.where(det < 0, -1.0, 1.0)[..., None]
    return rot


@dataclass
class Patch:
    query_index: int
    neighbor_indices: np.ndarray
    centroid: np.ndarray
    scale: float
    pca_rotation: np.ndarray
    coords: np.ndarray = field(repr=False)

    def normalize(self, points) -> np.ndarray:
        return ((np.asarray(points) - self.centroid) / self.scale) @ self.pca_rotation

    def denormalize(self, coords) -> np.ndarray:
        return (np.asarray(coords) @ self.pca_rotation.T) * self.scale + self.centroid


def extract_patches(points, index: SpatialIndex, query_indices, n_p: int):
    """Batched patch extraction.

    Returns ``(neighbor_idx, centroids, scales, rotations, coords)`` where
    ``coords`` are centred, unit-ball scaled and PCA-rotated neighbours in
    ascending distance order (the query comes first).
    """
    points = np.asarray(points, dtype=np.float64)
    query_indices = np.atleast_1d(np.asarray(query_indices, dtype=np.int64))
    if n_p > len(points):
        raise DataError(f"patch size {n_p} exceeds cloud size {len(points)}")
    nbr, _ = index.query(points[query_indices], n_p)
    nb_pts = points[nbr]
    cents, vals, vecs = pca_frames(nb_pts)
    bad = _check_rank(vals)
    if len(bad):
        raise DataError(f"degenerate patch around point {query_indices[bad[0]]}")
    rots = rotation_from_eigvecs(vecs)
    centered = nb_pts - cents[:, None, :]
    scales = np.sqrt(_sq_dist(centered, 0.0).max(axis=1))
    if np.any(scales <= 0):
        raise DataError("patch collapses to a single location")
    coords = np.matmul(centered / scales[:, None, None], rots)
    return nbr, cents, scales, rots, coords


def extract_patch(cloud: PointCloud, index: SpatialIndex, query_index: int, n_p: int) -> Patch:
    nbr, cents, scales, rots, coords = extract_patches(cloud.points, index, [query_index], n_p)
    return Patch(
        query_index=int(query_index),
        neighbor_indices=nbr[0],
        centroid=cents[0],
        scale=float(scales[0]),
        pca_rotation=rots[0],
        coords=coords[0],
    )
