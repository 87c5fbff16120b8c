"""Extreme-point-distance (EPD) ridge/valley point detection.

For every point the mean curvature of its (filtered) neighbourhood is fitted
with a quadric ``c(x, y)`` in a frame whose x axis is the max-curvature
direction.  The vertex of the section ``c(x, 0)`` is the nearest curvature
extremum; a point is a feature point when that vertex lies closer than the
sampling density rho.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cloud import PointCloud, batch_fit_quadrics, cross
from .curvature import CurvatureField, curvature_field
from .errors import InputError, NumericalError

logger = logging.getLogger(__name__)

MIN_SAMPLES = 6
# Connectivity edge length for neighbourhood region growing, in rho.
CONNECT_RHO = 2.0
# Points whose |c| is below this (in 1/rho) count as flat: no convexity, never features.
FLAT_TOL = 1e-6
# Feature positions closer than this (in rho) are merged.
MERGE_RHO = 0.5
# A neighbourhood cut below this fraction of its points by the sign/connectivity
# filter sits where the convexity is unreliable (inflections, noise): no feature.
MIN_SURVIVOR_FRACTION = 0.5


@dataclass
class CurvatureQuadric:
    """``c(x, y) = b0 x^2 + b1 y^2 + b2 xy + b3 x + b4 y + b5``."""

    b: np.ndarray

    def __call__(self, x, y):
        b0, b1, b2, b3, b4, b5 = self.b
        return b0 * x * x + b1 * y * y + b2 * x * y + b3 * x + b4 * y + b5

    def section(self, x):
        """The curvature profile along the local x axis, ``f(x) = c(x, 0)``."""
        return self.b[0] * x * x + self.b[3] * x + self.b[5]


@dataclass
class EpdResult:
    x_max: float
    d: float
    is_feature: bool
    feature_position: Optional[np.ndarray] = None
    convexity: int = 0


@dataclass
class FeaturePointSet:
    """Merged feature positions plus the per-point EPD diagnostics."""

    positions: np.ndarray  # (M, 3)
    source_indices: np.ndarray  # (M,) cloud index that seeded each merged position
    convexities: np.ndarray  # (M,) +1 / -1
    epd_heatmap: np.ndarray  # (N,) d per cloud point, inf where undefined
    classified: np.ndarray  # (N,) bool, EPD test passed (before merging)
    raw_positions: np.ndarray  # (N, 3) projected extremum, nan for non-features
    rho: float

    def __len__(self) -> int:
        return len(self.positions)


def _convexity(c: float, tol: float) -> int:
    if abs(c) <= tol:
        return 0
    return 1 if c > 0 else -1


def _connected_from(local: np.ndarray, start: int, edge: float) -> np.ndarray:
    diff = local[:, None, :] - local[None, :, :]
    adj = np.einsum("ijk,ijk->ij", diff, diff) <= edge * edge
    reached = np.zeros(len(local), dtype=bool)
    reached[start] = True
    frontier = reached.copy()
    while frontier.any():
        new = adj[frontier].any(axis=0) & ~reached
        reached |= new
        frontier = new
    return reached


def filter_neighbors(cloud: PointCloud, curvatures, idx: int, radius: float,
                     neighbours: Optional[np.ndarray] = None) -> np.ndarray:
    """Neighbours of ``idx`` sharing its convexity and connected to it.

    Opposite-sign points are dropped (flat points are never dropped on sign),
    then region growing from ``idx`` over edges no longer than 2 rho keeps the
    component that contains the point.

    Returns:
        Surviving cloud indices, ascending; may be shorter than 6, in which case
        the point cannot be classified.
    """
    values = curvatures.values if isinstance(curvatures, CurvatureField) else np.asarray(curvatures)
    rho = cloud.rho
    if neighbours is None:
        neighbours = cloud.index.radius(cloud.points[idx], radius)
    tol = FLAT_TOL / rho
    sign = _convexity(values[idx], tol)
    nb = np.asarray(neighbours)
    if sign != 0:
        c = values[nb]
        keep = (np.abs(c) <= tol) | (np.sign(c) == sign)
        nb = nb[keep]
    start = int(np.searchsorted(nb, idx))
    if start >= len(nb) or nb[start] != idx:
        nb = np.sort(np.append(nb, idx))
        start = int(np.searchsorted(nb, idx))
    reached = _connected_from(cloud.points[nb], start, CONNECT_RHO * rho)
    return nb[reached]


def fit_curvature_quadric(local_xy, c) -> CurvatureQuadric:
    """Unweighted least-squares fit of the six curvature-quadric coefficients."""
    local_xy = np.asarray(local_xy, dtype=float).reshape(-1, 2)
    c = np.asarray(c, dtype=float).reshape(-1)
    if len(c) < MIN_SAMPLES:
        raise NumericalError("need at least 6 samples", stage="epd")
    scale = max(float(np.max(np.abs(local_xy))), 1e-300)
    local = np.column_stack([local_xy, c])[None]
    coef, _, ok = batch_fit_quadrics(local, np.ones((1, len(c))), scale)
    if not ok[0]:
        raise NumericalError("rank-deficient curvature quadric", stage="epd")
    return CurvatureQuadric(_to_b(coef[0]))


def _to_b(coef: np.ndarray) -> np.ndarray:
    # height-quadric order (x^2, xy, y^2, x, y, 1) -> (x^2, y^2, xy, x, y, 1)
    return coef[..., [0, 2, 1, 3, 4, 5]]


def _degenerate(b: np.ndarray, rho: float) -> np.ndarray:
    b = np.atleast_2d(b)
    ref = np.maximum.reduce([np.abs(b[:, 3]) / rho, np.abs(b[:, 5]) / rho ** 2,
                             np.full(len(b), 1e-12 / rho ** 3)])
    return np.abs(b[:, 0]) < 1e-8 * ref


def _wrong_sense(b0, convexity) -> np.ndarray:
    # ridges/valleys maximise |c|: a vertex that minimises |c| is not a feature
    return np.asarray(convexity) * np.asarray(b0) >= 0


def epd(q: CurvatureQuadric, rho: float, convexity: int = 0) -> EpdResult:
    """Vertex of the curvature section and the EPD decision (no position).

    Args:
        convexity: sign of the point's mean curvature; when non-zero, a vertex
            that is a minimum of |c| yields d = inf.
    """
    b = q.b
    if _degenerate(b, rho)[0] or (convexity != 0 and _wrong_sense(b[0], convexity)):
        return EpdResult(np.inf, np.inf, False, convexity=convexity)
    x_max = -b[3] / (2 * b[0])
    d = abs(x_max)
    return EpdResult(float(x_max), float(d), bool(d < rho), convexity=convexity)


def project_feature(cloud: PointCloud, field: CurvatureField, idx: int, x_max: float,
                    direction: Optional[np.ndarray] = None) -> np.ndarray:
    """World position of the height quadric of ``idx`` above local ``(x_max, 0)``.

    Args:
        direction: unit tangent used as the local x axis; defaults to the
            max-curvature direction stored in ``field``.
    """
    e1 = field.e1[idx] if direction is None else np.asarray(direction, dtype=float)
    quadric = field.quadric(cloud, idx)
    u = x_max * (e1 @ quadric.frame.axis_x)
    v = x_max * (e1 @ quadric.frame.axis_y)
    return quadric.point_at(u, v)


def _rotate_about(v: np.ndarray, axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    c = np.cos(angle)[:, None]
    s = np.sin(angle)[:, None]
    dot = np.sum(axis * v, axis=1)[:, None]
    return v * c + cross(axis, v) * s + axis * dot * (1 - c)


def threshold_candidates(field: CurvatureField, threshold: float) -> np.ndarray:
    """Baseline detector: indices whose |mean curvature| reaches ``threshold``."""
    return np.flatnonzero(np.abs(field.values) >= threshold)


def detect_features(cloud: PointCloud, radius: Optional[float] = None,
                    field: Optional[CurvatureField] = None,
                    deflection: Optional[np.ndarray] = None,
                    curvature_radius: Optional[float] = None) -> FeaturePointSet:
    """Run the EPD criterion on every point and merge the projected positions.

    Args:
        radius: EPD neighbourhood radius (default 3 rho).
        field: precomputed curvature field (computed at ``curvature_radius`` otherwise).
        deflection: optional per-point angles (radians) rotating the max-curvature
            direction about the normal before classification.
    """
    if cloud.normals is None:
        raise InputError("normals required for feature detection")
    rho = cloud.rho
    if radius is None:
        radius = 3.0 * rho
    if field is None:
        field = curvature_field(cloud, curvature_radius)
    n = len(cloud)
    pts = cloud.points
    normals = cloud.normals
    axes_x = field.e1
    if deflection is not None:
        axes_x = _rotate_about(axes_x, normals, np.asarray(deflection, dtype=float))
    axes_y = cross(normals, axes_x)
    tol = FLAT_TOL / rho

    heat = np.full(n, np.inf)
    x_max = np.full(n, np.inf)
    neighbour_lists = cloud.index.radius_many(pts, radius)
    survivors = []
    rows = []
    for i in range(n):
        if abs(field.values[i]) <= tol:
            continue
        nb = filter_neighbors(cloud, field, i, radius, neighbour_lists[i])
        if len(nb) < max(MIN_SAMPLES, MIN_SURVIVOR_FRACTION * len(neighbour_lists[i])):
            continue
        survivors.append(nb)
        rows.append(i)
    rows = np.asarray(rows, dtype=np.intp)
    chunk = 4096
    for start in range(0, len(rows), chunk):
        part = rows[start:start + chunk]
        lists = survivors[start:start + chunk]
        K = max(len(s) for s in lists)
        local = np.zeros((len(part), K, 3))
        w = np.zeros((len(part), K))
        for r, (i, nb) in enumerate(zip(part, lists)):
            d = pts[nb] - pts[i]
            local[r, :len(nb), 0] = d @ axes_x[i]
            local[r, :len(nb), 1] = d @ axes_y[i]
            local[r, :len(nb), 2] = field.values[nb]
            w[r, :len(nb)] = 1.0
        coef, _, ok = batch_fit_quadrics(local, w, radius)
        b = _to_b(coef)
        bad = ~ok | _degenerate(b, rho) | _wrong_sense(b[:, 0], np.sign(field.values[part]))
        with np.errstate(divide="ignore", invalid="ignore"):
            xm = np.where(bad, np.inf, -b[:, 3] / (2 * b[:, 0]))
        x_max[part] = xm
        heat[part] = np.abs(xm)

    classified = heat < rho
    raw = np.full((n, 3), np.nan)
    for i in np.flatnonzero(classified):
        raw[i] = project_feature(cloud, field, i, x_max[i], axes_x[i])
    conv = np.where(field.values > 0, 1, -1)
    positions, sources, convex = merge_features(raw, classified, conv, rho)
    logger.debug("EPD: %d classified, %d merged features", int(classified.sum()), len(positions))
    return FeaturePointSet(positions, sources, convex, heat, classified, raw, rho)


def _merge_once(P, conv, weight, rho):
    from scipy.spatial import cKDTree

    tree = cKDTree(P)
    taken = np.zeros(len(P), dtype=bool)
    groups = []
    for a in range(len(P)):
        if taken[a]:
            continue
        group = [g for g in sorted(tree.query_ball_point(P[a], MERGE_RHO * rho)) if not taken[g]]
        taken[group] = True
        groups.append(group)
    out_p = np.array([np.average(P[g], axis=0, weights=weight[g]) for g in groups])
    out_c = []
    for g in groups:
        s = int(np.sum(conv[g] * weight[g]))
        out_c.append(int(np.sign(s)) if s != 0 else int(conv[g[0]]))
    return out_p, np.array(out_c, dtype=int), np.array([weight[g].sum() for g in groups]), [g[0] for g in groups]


def merge_features(raw: np.ndarray, classified: np.ndarray, convexity: np.ndarray, rho: float):
    """Greedy index-order merge of positions closer than rho/2 into centroids.

    Each unassigned point seeds a cluster with the unassigned points within
    rho/2 of it; the cluster's convexity is decided by majority.  Passes are
    repeated on the centroids (weighted by cluster size) until no two merged
    positions are closer than rho/2.
    """
    idx = np.flatnonzero(classified)
    if len(idx) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.intp), np.zeros(0, dtype=int)
    P = raw[idx]
    conv = np.asarray(convexity)[idx]
    weight = np.ones(len(idx))
    sources = idx.copy()
    while True:
        P2, conv, weight, first = _merge_once(P, conv, weight, rho)
        sources = sources[first]
        if len(P2) == len(P):
            break
        P = P2
    return P2, np.asarray(sources, dtype=np.intp), conv
