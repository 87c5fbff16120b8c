"""Point-cloud container, spatial index, density/normal estimation and local frames.

Everything downstream measures lengths in units of the sampling density ``rho``
(mean nearest-neighbour spacing), so this module is the scale reference of the
whole pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from .errors import InputError, NumericalError

# Relative slack on inclusive radius queries, so that lattice points lying
# exactly on the query sphere are kept regardless of the cloud's scale.
RADIUS_SLACK = 1e-9


class SpatialIndex:
    """Immutable k-d tree wrapper with deterministic result ordering."""

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or len(points) == 0:
            raise InputError("empty input")
        self.points = points
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return len(self.points)

    def radius(self, query, r: float) -> np.ndarray:
        """Indices of points with ``|p - query| <= r``, ascending by index."""
        idx = self._tree.query_ball_point(np.asarray(query, dtype=float), r * (1.0 + RADIUS_SLACK))
        return np.array(sorted(idx), dtype=np.intp)

    def radius_many(self, queries, r: float) -> list[np.ndarray]:
        lists = self._tree.query_ball_point(np.asarray(queries, dtype=float), r * (1.0 + RADIUS_SLACK))
        return [np.array(sorted(x), dtype=np.intp) for x in lists]

    def knn(self, query, k: int) -> tuple[np.ndarray, np.ndarray]:
        """k nearest points, sorted by distance then index.

        Returns:
            (indices, distances); fewer than ``k`` entries when the cloud is smaller.
        """
        k = min(int(k), len(self.points))
        query = np.asarray(query, dtype=float)
        # Over-fetch one so a tie at the k-th slot can be resolved by index.
        kk = min(k + 1, len(self.points))
        d, i = self._tree.query(query, k=kk)
        d = np.atleast_1d(d)
        i = np.atleast_1d(i)
        # recompute exactly so equal distances compare equal
        d = np.linalg.norm(self.points[i] - query, axis=1)
        order = np.lexsort((i, d))
        return i[order][:k], d[order][:k]

    def knn_many(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        queries = np.asarray(queries, dtype=float)
        k = min(int(k), len(self.points))
        kk = min(k + 1, len(self.points))
        _, idx = self._tree.query(queries, k=kk)
        idx = idx.reshape(len(queries), kk)
        d = np.linalg.norm(self.points[idx] - queries[:, None, :], axis=2)
        order = np.lexsort((idx, d), axis=1)
        idx = np.take_along_axis(idx, order, axis=1)[:, :k]
        d = np.take_along_axis(d, order, axis=1)[:, :k]
        return idx, d

    def knn_with_ties(self, queries, k: int) -> list[np.ndarray]:
        """k nearest neighbours plus every point tied with the k-th distance.

        The result does not depend on point order, unlike a strict top-k cut.
        """
        queries = np.asarray(queries, dtype=float)
        _, d = self.knn_many(queries, k)
        r = d[:, -1] * (1.0 + RADIUS_SLACK) + 1e-300
        lists = self._tree.query_ball_point(queries, r)
        return [np.array(sorted(x), dtype=np.intp) for x in lists]


def tie_order(indices: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """Argsort by distance, treating distances equal up to ``RADIUS_SLACK`` as ties broken by index.

    Unlike a plain lexsort this order survives rounding (rigid motions of a
    lattice), because near-equal distances never compare by their last bits.
    """
    indices = np.asarray(indices)
    dist = np.asarray(dist, dtype=float)
    if len(dist) == 0:
        return np.zeros(0, dtype=np.intp)
    by_d = np.argsort(dist, kind="stable")
    sd = dist[by_d]
    group = np.concatenate([[0], np.cumsum(sd[1:] > sd[:-1] * (1.0 + RADIUS_SLACK) + 1e-300)])
    return by_d[np.lexsort((indices[by_d], group))]


@dataclass
class PointCloud:
    """Positions with optional unit normals and a provenance mask.

    ``is_feature`` flags points appended from detected feature positions
    (the augmented cloud); it is ``None`` for raw input.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    is_feature: Optional[np.ndarray] = None
    _rho: Optional[float] = field(default=None, repr=False, compare=False)
    _index: Optional[SpatialIndex] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=float).reshape(-1, 3)
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(n) != len(self.points):
                raise InputError("normals length does not match points")
            norm = np.linalg.norm(n, axis=1)
            if np.any(norm == 0):
                raise InputError("zero-length normal at index %d" % int(np.argmin(norm)))
            off = np.abs(norm - 1.0) > 1e-15
            n = n.copy()
            n[off] /= norm[off, None]  # unit rows stay bit-identical
            self.normals = n
        if self.is_feature is not None:
            self.is_feature = np.asarray(self.is_feature, dtype=bool).reshape(-1)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def rho(self) -> float:
        if self._rho is None:
            self._rho = estimate_density(self)
        return self._rho

    @property
    def index(self) -> SpatialIndex:
        if self._index is None:
            self._index = build_index(self)
        return self._index

    @property
    def feature_mask(self) -> np.ndarray:
        if self.is_feature is None:
            return np.zeros(len(self), dtype=bool)
        return self.is_feature

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, normals, self.is_feature, _rho=self._rho, _index=self._index)

    def transformed(self, R, t=(0.0, 0.0, 0.0), scale: float = 1.0) -> "PointCloud":
        """Copy under ``p -> scale * R p + t``."""
        R = np.asarray(R, dtype=float)
        pts = scale * self.points @ R.T + np.asarray(t, dtype=float)
        nrm = None if self.normals is None else self.normals @ R.T
        return PointCloud(pts, nrm, None if self.is_feature is None else self.is_feature.copy())


def build_index(cloud: PointCloud) -> SpatialIndex:
    if cloud is None or len(cloud.points) == 0:
        raise InputError("empty input")
    return SpatialIndex(cloud.points)


def estimate_density(cloud: PointCloud) -> float:
    """Mean distance from every point to its nearest distinct neighbour."""
    pts = cloud.points
    if len(pts) < 2:
        raise InputError("density needs at least 2 points")
    tree = cKDTree(pts)
    k = 2
    while True:
        kk = min(k, len(pts))
        d, _ = tree.query(pts, k=kk)
        d = d.reshape(len(pts), kk)
        pos = np.where(d > 0, d, np.inf).min(axis=1)
        if np.all(np.isfinite(pos)) or kk == len(pts):
            break
        k *= 2
    if not np.any(np.isfinite(pos)):
        raise InputError("all points coincide")
    return float(np.mean(pos[np.isfinite(pos)]))


def _pca_normal(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centered = pts - pts.mean(axis=0)
    w, v = np.linalg.eigh(centered.T @ centered)
    return v[:, 0], w


def estimate_normals(cloud: PointCloud, radius: float) -> np.ndarray:
    """PCA normals within ``radius``, oriented along a Euclidean MST walk.

    Each connected component is oriented independently; its global sign is
    chosen so that the majority of its normals has a non-negative z component.
    """
    if radius <= 0:
        raise InputError("radius must be positive")
    pts = cloud.points
    n = len(pts)
    index = cloud.index
    normals = np.empty((n, 3))
    for i, nb in enumerate(index.radius_many(pts, radius)):
        if len(nb) < 3:
            raise NumericalError("point %d has fewer than 3 neighbours within radius" % i, stage="normals")
        nrm, w = _pca_normal(pts[nb])
        # collinear: two vanishing eigenvalues
        if w[1] <= 1e-12 * max(w[2], 1e-300):
            raise NumericalError("degenerate (collinear) neighbourhood at point %d" % i, stage="normals")
        normals[i] = nrm
    _orient_normals(pts, normals, index)
    return normals


def _orient_normals(pts: np.ndarray, normals: np.ndarray, index: SpatialIndex, k: int = 10) -> None:
    n = len(pts)
    if n == 1:
        if normals[0, 2] < 0:
            normals[0] *= -1
        return
    idx, d = index.knn_many(pts, min(k + 1, n))
    rows = np.repeat(np.arange(n), idx.shape[1])
    cols = idx.ravel()
    # keep zero-length edges between duplicates alive
    w = d.ravel() + 1e-12
    mask = rows != cols
    g = coo_matrix((w[mask], (rows[mask], cols[mask])), shape=(n, n)).tocsr()
    g = g.maximum(g.T)
    mst = minimum_spanning_tree(g)
    mst = mst + mst.T
    ncomp, labels = connected_components(mst, directed=False)
    for c in range(ncomp):
        members = np.flatnonzero(labels == c)
        root = int(members[0])
        order, pred = breadth_first_order(mst, root, directed=False, return_predecessors=True)
        for node in order[1:]:
            if normals[node] @ normals[pred[node]] < 0:
                normals[node] *= -1
        if np.count_nonzero(normals[members, 2] < 0) > len(members) / 2:
            normals[members] *= -1


@dataclass
class LocalFrame:
    """Orthonormal right-handed frame; rows of ``matrix`` are the axes."""

    origin: np.ndarray
    axis_x: np.ndarray
    axis_y: np.ndarray
    axis_z: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return np.vstack([self.axis_x, self.axis_y, self.axis_z])

    def to_local(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=float) - self.origin) @ self.matrix.T

    def to_world(self, q) -> np.ndarray:
        return np.asarray(q, dtype=float) @ self.matrix + self.origin


def local_frame(origin, normal, dir_x) -> LocalFrame:
    """Frame with z = ``normal`` and x = ``dir_x`` made orthogonal to it."""
    normal = np.asarray(normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    dir_x = np.asarray(dir_x, dtype=float)
    dir_x = dir_x / np.linalg.norm(dir_x)
    if abs(normal @ dir_x) >= 0.99:
        raise InputError("x direction is (nearly) parallel to the normal")
    ax = dir_x - (dir_x @ normal) * normal
    ax /= np.linalg.norm(ax)
    ay = np.cross(normal, ax)
    return LocalFrame(np.asarray(origin, dtype=float).copy(), ax, ay, normal.copy())


def tangent_frame(origin, normal) -> LocalFrame:
    """Deterministic frame around ``normal``: x is the world axis least aligned with it."""
    normal = np.asarray(normal, dtype=float)
    axis = np.eye(3)[int(np.argmin(np.abs(normal)))]
    return local_frame(origin, normal, axis)


@dataclass
class PrincipalInfo:
    """Principal curvatures ordered by magnitude: ``|k1| >= |k2|``."""

    k1: float
    k2: float
    e1: np.ndarray
    e2: np.ndarray


def fit_local_quadric(local: np.ndarray, weights: Optional[np.ndarray], scale: float) -> tuple[np.ndarray, float]:
    """Weighted LS fit of ``z = a x^2 + b xy + c y^2 + d x + e y + f``.

    ``local`` holds frame coordinates; ``scale`` normalises them for conditioning.

    Returns:
        coefficients (a, b, c, d, e, f) and the weighted residual sum of squares.
    """
    w = np.ones(len(local)) if weights is None else np.asarray(weights, dtype=float)
    coef, resid, ok = batch_fit_quadrics(local[None], w[None], scale)
    if not ok[0]:
        raise NumericalError("underdetermined quadric", stage="quadric")
    return coef[0], float(resid[0])


def batch_fit_quadrics(local: np.ndarray, weights: np.ndarray, scale) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched weighted height-quadric fits.

    Args:
        local: (B, K, 3) frame coordinates; padded rows carry zero weight.
        weights: (B, K).
        scale: scalar or (B,) normalisation length.

    Returns:
        (B, 6) coefficients, (B,) weighted residuals, (B,) bool well-posed flags.
    """
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (local.shape[0],))[:, None]
    u = local[..., 0] / scale
    v = local[..., 1] / scale
    z = local[..., 2] / scale
    A = np.stack([u * u, u * v, v * v, u, v, np.ones_like(u)], axis=-1)
    Aw = A * weights[..., None]
    M = np.einsum("bki,bkj->bij", Aw, A)
    rhs = np.einsum("bki,bk->bi", Aw, z)
    ev = np.linalg.eigvalsh(M)
    count = np.count_nonzero(weights > 0, axis=1)
    ok = (count >= 6) & (ev[:, 0] > 1e-12 * np.maximum(ev[:, -1], 1e-300))
    M[~ok] = np.eye(6)
    coef = np.linalg.solve(M, rhs[..., None])[..., 0]
    coef[~ok] = 0.0
    r = np.einsum("bki,bi->bk", A, coef) - z
    resid = np.sum(weights * r * r, axis=1) * scale[:, 0] ** 2
    coef = coef * np.column_stack([1 / scale, 1 / scale, 1 / scale, np.ones_like(scale), np.ones_like(scale), scale])
    return coef, resid, ok


def shape_operator(coef: np.ndarray) -> np.ndarray:
    """Weingarten map of the height quadric at the frame origin (tangent coords)."""
    a, b, c, d, e, _ = coef
    first = np.array([[1 + d * d, d * e], [d * e, 1 + e * e]])
    second = np.array([[2 * a, b], [b, 2 * c]]) / np.sqrt(1 + d * d + e * e)
    return np.linalg.solve(first, second)


def principal_from_quadric(coef: np.ndarray, frame: LocalFrame) -> PrincipalInfo:
    """Principal curvatures/directions of a height quadric, lifted to world space.

    Directions are projected into the plane orthogonal to ``frame.axis_z``.
    """
    S = shape_operator(coef)
    w, V = np.linalg.eig(S)
    w = np.real(w)
    V = np.real(V)
    order = np.argsort(-np.abs(w), kind="stable")
    k1, k2 = float(w[order[0]]), float(w[order[1]])
    u, v = V[:, order[0]]
    d, e = coef[3], coef[4]
    t = u * frame.axis_x + v * frame.axis_y + (u * d + v * e) * frame.axis_z
    t -= (t @ frame.axis_z) * frame.axis_z
    nt = np.linalg.norm(t)
    e1 = frame.axis_x.copy() if nt == 0 else t / nt
    e2 = np.cross(frame.axis_z, e1)
    return PrincipalInfo(k1, k2, e1, e2)


def gaussian_weights(dist2: np.ndarray, radius: float) -> np.ndarray:
    return np.exp(-dist2 / (radius / 2.0) ** 2)


def principal_directions(cloud: PointCloud, idx: int, radius: float) -> PrincipalInfo:
    """Principal curvature info at ``cloud.points[idx]`` from a weighted height quadric."""
    if cloud.normals is None:
        raise InputError("normals required")
    p = cloud.points[idx]
    nb = cloud.index.radius(p, radius)
    if len(nb) < 6:
        raise NumericalError("underdetermined quadric", stage="principal")
    frame = tangent_frame(p, cloud.normals[idx])
    local = frame.to_local(cloud.points[nb])
    w = gaussian_weights(np.sum((cloud.points[nb] - p) ** 2, axis=1), radius)
    coef, _ = fit_local_quadric(local, w, radius)
    return principal_from_quadric(coef, frame)


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product (much cheaper than np.cross for small inputs)."""
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


def tangent_frames(normals: np.ndarray) -> np.ndarray:
    """Batched :func:`tangent_frame` axes, shape (N, 3, 3) with rows x, y, z."""
    normals = normals / np.linalg.norm(normals, axis=1)[:, None]
    axis = np.eye(3)[np.argmin(np.abs(normals), axis=1)]
    ax = axis - np.sum(axis * normals, axis=1)[:, None] * normals
    ax /= np.linalg.norm(ax, axis=1)[:, None]
    ay = cross(normals, ax)
    return np.stack([ax, ay, normals], axis=1)


def principal_batch(coefs: np.ndarray, frames: np.ndarray):
    """Vectorised :func:`principal_from_quadric`.

    Returns:
        k1, k2 (|k1| >= |k2|), e1 (N, 3), mean curvature (N,).
    """
    a, b, c, d, e = (coefs[:, i] for i in range(5))
    g = np.sqrt(1 + d * d + e * e)
    E, F, G = 1 + d * d, d * e, 1 + e * e
    L, M, N = 2 * a / g, b / g, 2 * c / g
    det = E * G - F * F
    # S = I^-1 II
    s11 = (G * L - F * M) / det
    s12 = (G * M - F * N) / det
    s21 = (E * M - F * L) / det
    s22 = (E * N - F * M) / det
    tr = s11 + s22
    disc = np.sqrt(np.maximum(((s11 - s22) / 2) ** 2 + s12 * s21, 0.0))
    la = tr / 2 + disc
    lb = tr / 2 - disc
    swap = np.abs(lb) > np.abs(la)
    k1 = np.where(swap, lb, la)
    k2 = np.where(swap, la, lb)
    # eigenvector of S for k1: rows (s11-k, s12) and (s21, s22-k); pick the better-conditioned
    v1 = np.stack([s12, k1 - s11], axis=1)
    v2 = np.stack([k1 - s22, s21], axis=1)
    use2 = np.linalg.norm(v2, axis=1) > np.linalg.norm(v1, axis=1)
    uv = np.where(use2[:, None], v2, v1)
    # umbilic / flat: any tangent direction; take frame x
    nrm = np.linalg.norm(uv, axis=1)
    flat = nrm <= 1e-12 * np.maximum(np.abs(k1), 1e-300)
    uv[flat] = (1.0, 0.0)
    u, v = uv[:, 0], uv[:, 1]
    ax, ay, az = frames[:, 0], frames[:, 1], frames[:, 2]
    t = u[:, None] * ax + v[:, None] * ay + (u * d + v * e)[:, None] * az
    t -= np.sum(t * az, axis=1)[:, None] * az
    e1 = t / np.linalg.norm(t, axis=1)[:, None]
    return k1, k2, e1, tr / 2
