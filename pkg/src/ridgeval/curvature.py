"""Per-point mean curvature from Gaussian-weighted osculating height quadrics.

Mean curvature is normalised as (k1 + k2) / 2 and signed against the point
normal: a surface opening towards +normal (z = x^2 + y^2 with normal +z)
has positive curvature, a ridge seen from above has negative curvature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cloud import LocalFrame, PointCloud, batch_fit_quadrics, fit_local_quadric, gaussian_weights, principal_batch, shape_operator, tangent_frame, tangent_frames
from .errors import InputError, NumericalError


@dataclass
class HeightQuadric:
    """``z = a x^2 + b xy + c y^2 + d x + e y + f`` in ``frame``."""

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float
    frame: LocalFrame
    residual: float = 0.0

    @property
    def coef(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d, self.e, self.f])

    def height(self, x: float, y: float) -> float:
        return self.a * x * x + self.b * x * y + self.c * y * y + self.d * x + self.e * y + self.f

    def point_at(self, x: float, y: float) -> np.ndarray:
        """World position of the surface point above local ``(x, y)``."""
        return self.frame.to_world(np.array([x, y, self.height(x, y)]))


@dataclass
class CurvatureField:
    """Mean curvature per point, plus the per-point quadric data it came from."""

    values: np.ndarray
    radius_used: float
    coefs: np.ndarray  # (N, 6)
    frames: np.ndarray  # (N, 3, 3), rows are frame axes; origin is the point itself
    e1: np.ndarray  # (N, 3) max-|k| principal direction
    k1: np.ndarray
    k2: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    def quadric(self, cloud: PointCloud, idx: int) -> HeightQuadric:
        m = self.frames[idx]
        frame = LocalFrame(cloud.points[idx].copy(), m[0], m[1], m[2])
        return HeightQuadric(*self.coefs[idx], frame=frame)


def _neighbourhood(cloud: PointCloud, idx: int, radius: float, nb=None):
    p = cloud.points[idx]
    if nb is None:
        nb = cloud.index.radius(p, radius)
    if len(nb) < 6:
        raise NumericalError("point %d has %d neighbours, need 6" % (idx, len(nb)), stage="curvature")
    q = cloud.points[nb]
    w = gaussian_weights(np.sum((q - p) ** 2, axis=1), radius)
    return q, w


def fit_height_quadric(cloud: PointCloud, idx: int, radius: float,
                       frame: Optional[LocalFrame] = None, neighbours=None) -> HeightQuadric:
    """Weighted height-quadric fit around point ``idx``.

    Args:
        frame: fitting frame; defaults to a tangent frame with z = the point normal.
    """
    if cloud.normals is None:
        raise InputError("normals required for curvature")
    if frame is None:
        frame = tangent_frame(cloud.points[idx], cloud.normals[idx])
    q, w = _neighbourhood(cloud, idx, radius, neighbours)
    try:
        coef, resid = fit_local_quadric(frame.to_local(q), w, radius)
    except NumericalError as exc:
        raise NumericalError("underdetermined quadric at point %d" % idx, stage="curvature") from exc
    return HeightQuadric(*coef, frame=frame, residual=resid)


def mean_curvature_at(q: HeightQuadric) -> float:
    """Mean curvature (k1 + k2) / 2 of the quadric at its frame origin."""
    return float(np.trace(shape_operator(q.coef)) / 2.0)


# Boundary/sparse neighbourhoods are retried with the radius grown by this
# factor, at most MAX_GROW times, before the point is reported as a failure.
GROW = 1.5
MAX_GROW = 3


def _batch_quadrics(cloud: PointCloud, idx: np.ndarray, neighbours: list, radius: np.ndarray):
    pts = cloud.points
    B = len(idx)
    K = max(len(neighbours[i]) for i in idx)
    local = np.zeros((B, K, 3))
    w = np.zeros((B, K))
    frames = tangent_frames(cloud.normals[idx])
    for row, i in enumerate(idx):
        nb = neighbours[i]
        d = pts[nb] - pts[i]
        local[row, :len(nb)] = d @ frames[row].T
        w[row, :len(nb)] = gaussian_weights(np.sum(d * d, axis=1), radius[row])
    coef, _, ok = batch_fit_quadrics(local, w, radius)
    return coef, frames, ok


def curvature_field(cloud: PointCloud, radius: Optional[float] = None, chunk: int = 4096) -> CurvatureField:
    """Mean curvature (and principal frame) for every point; default radius 3 rho."""
    if cloud.normals is None:
        raise InputError("normals required for curvature")
    if radius is None:
        radius = 3.0 * cloud.rho
    n = len(cloud)
    coefs = np.zeros((n, 6))
    frames = np.zeros((n, 3, 3))
    used = np.full(n, float(radius))
    todo = np.arange(n)
    r = float(radius)
    for attempt in range(MAX_GROW + 1):
        neighbours = dict(zip(todo, cloud.index.radius_many(cloud.points[todo], r)))
        failed = []
        for start in range(0, len(todo), chunk):
            part = todo[start:start + chunk]
            c, f, ok = _batch_quadrics(cloud, part, neighbours, np.full(len(part), r))
            coefs[part] = c
            frames[part] = f
            used[part] = r
            failed.extend(part[~ok])
        todo = np.array(failed, dtype=np.intp)
        if len(todo) == 0:
            break
        r *= GROW
    if len(todo):
        raise NumericalError("underdetermined quadric at points %s" % todo[:10].tolist(), stage="curvature")
    k1, k2, e1, values = principal_batch(coefs, frames)
    return CurvatureField(values, float(radius), coefs, frames, e1, k1, k2)
