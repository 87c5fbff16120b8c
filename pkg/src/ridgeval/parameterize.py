"""Straightened per-node coordinates around feature lines.

Every node gets a rigid frame with the polyline tangent as x, the node normal
as z and ``n x dir`` as y; the node itself maps to ``(l, 0, 0)`` so that a
whole polyline becomes a segment of the x axis.  Each node additionally
carries a rotation ``theta`` about that axis, tuned so that neighbouring
strips agree (no folds), and applied as ``Rx(theta) (R p + t)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .cloud import PointCloud, SpatialIndex
from .errors import InputError, NumericalError
from .ridge_lines import Affiliation, FeatureNode, FeaturePolyline

logger = logging.getLogger(__name__)

ORTHO_WARN = 0.1
ORTHO_FAIL = 0.5
MAX_ROUNDS = 5
STOP_DTHETA = 1e-4


def rot_x(theta) -> np.ndarray:
    """Rotation matrix (or stack of them) about the x axis."""
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    out = np.zeros(theta.shape + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = c
    out[..., 1, 2] = -s
    out[..., 2, 1] = s
    out[..., 2, 2] = c
    return out


@dataclass
class NodeTransform:
    """``local = Rx(theta) (R p + t)``; rows of R are (dir, n x dir, n)."""

    R: np.ndarray
    t: np.ndarray
    theta: float = 0.0

    def forward(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return (p @ self.R.T + self.t) @ rot_x(self.theta).T

    def inverse(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return (q @ rot_x(self.theta) - self.t) @ self.R


def node_transform(node: FeatureNode) -> NodeTransform:
    """Rigid frame taking ``node.v`` to ``(l, 0, 0)``, ``dir`` to +x and ``n`` to +z."""
    d = np.asarray(node.dir, dtype=float)
    d = d / np.linalg.norm(d)
    n = np.asarray(node.n, dtype=float)
    n = n / np.linalg.norm(n)
    dot = abs(float(d @ n))
    if dot > ORTHO_FAIL:
        raise NumericalError("node normal too close to its tangent (|dir.n| = %.3f)" % dot, stage="param")
    if dot > ORTHO_WARN:
        logger.warning("re-orthogonalising node normal (|dir.n| = %.3f)", dot)
    n = n - (n @ d) * d
    n /= np.linalg.norm(n)
    y = np.cross(n, d)
    R = np.vstack([d, y, n])
    t = np.array([float(node.l), 0.0, 0.0]) - R @ np.asarray(node.v, dtype=float)
    return NodeTransform(R, t, 0.0)


def polyline_transforms(polylines: Sequence[FeaturePolyline]) -> list[NodeTransform]:
    """Transforms of all nodes, concatenated in polyline order."""
    return [node_transform(node) for p in polylines for node in p.nodes]


@dataclass
class ParamCloud:
    """Affiliated points in the straightened frame of their owner node."""

    local_pts: np.ndarray  # (M, 3)
    owner_node: np.ndarray  # (M,) global node index
    world_index: np.ndarray  # (M,) index into the source cloud
    local_normals: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.local_pts)


def _stack(transforms: Sequence[NodeTransform]):
    R = np.array([tr.R for tr in transforms])
    t = np.array([tr.t for tr in transforms])
    theta = np.array([tr.theta for tr in transforms], dtype=float)
    return R, t, theta


def apply_param(cloud: PointCloud, aff: Affiliation, transforms: Sequence[NodeTransform],
                mask: Optional[np.ndarray] = None) -> ParamCloud:
    """Map every affiliated point (optionally only where ``mask``) by its owner's transform."""
    keep = aff.node_of >= 0
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(keep)
    owner = aff.node_of[idx]
    if len(transforms) == 0:
        return ParamCloud(np.zeros((0, 3)), owner, idx, None if cloud.normals is None else np.zeros((0, 3)))
    if owner.size and owner.max() >= len(transforms):
        raise InputError("affiliation refers to node %d without a transform" % int(owner.max()))
    R, t, theta = _stack(transforms)
    M = rot_x(theta[owner]) @ R[owner]
    shift = np.einsum("mij,mj->mi", rot_x(theta[owner]), t[owner])
    local = np.einsum("mij,mj->mi", M, cloud.points[idx]) + shift
    normals = None
    if cloud.normals is not None:
        normals = np.einsum("mij,mj->mi", M, cloud.normals[idx])
    return ParamCloud(local, owner, idx, normals)


def small_angle_rotate(p, dtheta) -> np.ndarray:
    """First-order rotation about x: ``(px, py - pz dtheta, py dtheta + pz)``.

    Only accurate for small angles (about 0.2 rad at most); larger corrections
    must be split into several steps.
    """
    p = np.asarray(p, dtype=float)
    dtheta = np.asarray(dtheta, dtype=float)
    out = np.empty(np.broadcast_shapes(p.shape, dtheta.shape + (3,)))
    out[..., 0] = p[..., 0]
    out[..., 1] = p[..., 1] - p[..., 2] * dtheta
    out[..., 2] = p[..., 1] * dtheta + p[..., 2]
    return out


def node_polyline_index(polylines: Sequence[FeaturePolyline]):
    """(polyline, position) of every global node index."""
    owner = np.concatenate([np.full(len(p), k) for k, p in enumerate(polylines)]) if polylines else np.zeros(0, int)
    local = np.concatenate([np.arange(len(p)) for p in polylines]) if polylines else np.zeros(0, int)
    return owner.astype(np.intp), local.astype(np.intp)


def adjacent_owners(a, b, polylines: Sequence[FeaturePolyline]) -> np.ndarray:
    """True where nodes ``a`` and ``b`` are the same node or neighbours on one polyline."""
    poly, pos = node_polyline_index(polylines)
    a = np.asarray(a)
    b = np.asarray(b)
    same = poly[a] == poly[b]
    gap = np.abs(pos[a] - pos[b])
    sizes = np.array([len(p) for p in polylines])
    closed = np.array([p.closed for p in polylines])
    wrap = closed[poly[a]] & (gap == sizes[poly[a]] - 1)
    return same & ((gap <= 1) | wrap)


def smoothness_pairs(param: ParamCloud, polylines: Sequence[FeaturePolyline], k: int) -> np.ndarray:
    """k-NN pairs (ties kept) in the parameter domain of each polyline, with same or adjacent owners."""
    poly, _ = node_polyline_index(polylines)
    point_poly = poly[param.owner_node] if len(param) else np.zeros(0, int)
    out = []
    for p in range(len(polylines)):
        members = np.flatnonzero(point_poly == p)
        if len(members) < 2:
            continue
        lists = SpatialIndex(param.local_pts[members]).knn_with_ties(param.local_pts[members], k + 1)
        a = np.repeat(members, [len(x) for x in lists])
        b = members[np.concatenate(lists)]
        keep = a != b
        out.append(np.column_stack([a[keep], b[keep]]))
    if not out:
        return np.zeros((0, 2), dtype=np.intp)
    pairs = np.concatenate(out)
    ok = adjacent_owners(param.owner_node[pairs[:, 0]], param.owner_node[pairs[:, 1]], polylines)
    return pairs[ok]


def _j(v: np.ndarray) -> np.ndarray:
    # derivative of a rotation about x at zero angle
    return np.column_stack([np.zeros(len(v)), -v[:, 2], v[:, 1]])


def _rotated(param: ParamCloud, angles: np.ndarray):
    rot = rot_x(angles[param.owner_node])
    p = np.einsum("mij,mj->mi", rot, param.local_pts)
    n = np.einsum("mij,mj->mi", rot, param.local_normals)
    return p, n


def rotation_objective(param: ParamCloud, pairs: np.ndarray, angles: np.ndarray, rho: float) -> float:
    """``sum theta_i^2 + sum (m . (p' - q') / rho)^2`` with exact rotations.

    ``m`` is the mean of the two rotated point normals; unlike a one-sided
    normal it makes the residual vanish to second order on any smooth surface.
    """
    p, n = _rotated(param, angles)
    a, b = pairs[:, 0], pairs[:, 1]
    r = np.einsum("ij,ij->i", n[a] + n[b], p[a] - p[b]) / (2 * rho)
    return float(np.sum(angles ** 2) + np.sum(r * r))


@dataclass
class RotationResult:
    dtheta: np.ndarray  # per node, total correction
    param: ParamCloud
    transforms: list
    objective_before: float
    objective_after: float
    rounds: int


def optimize_rotations(param: ParamCloud, polylines: Sequence[FeaturePolyline],
                       transforms: Sequence[NodeTransform], k: int = 12,
                       rho: Optional[float] = None) -> RotationResult:
    """Per-node rotations about the line that make adjacent strips agree.

    Gauss-Newton on the exact-rotation objective using the linearised
    rotation, at most five rounds; each step is halved until the objective
    does not increase.  Residuals are measured in units of ``rho`` so the
    balance against the angle regulariser is scale free.
    """
    if param.local_normals is None:
        raise InputError("normals required for rotation optimisation")
    if rho is None or rho <= 0:
        raise InputError("rho must be positive")
    m = len(transforms)
    angles = np.zeros(m)
    pairs = smoothness_pairs(param, polylines, k)
    cross_pairs = pairs[param.owner_node[pairs[:, 0]] != param.owner_node[pairs[:, 1]]] if len(pairs) else pairs
    start = rotation_objective(param, pairs, angles, rho) if len(pairs) else 0.0
    current = start
    rounds = 0
    if len(cross_pairs) and m:
        a, b = cross_pairs[:, 0], cross_pairs[:, 1]
        oa, ob = param.owner_node[a], param.owner_node[b]
        eye = sparse.identity(m, format="csr")
        for rounds in range(1, MAX_ROUNDS + 1):
            p, n = _rotated(param, angles)
            mid = 0.5 * (n[a] + n[b])
            diff = p[a] - p[b]
            r0 = np.einsum("ij,ij->i", mid, diff) / rho
            ga = (0.5 * np.einsum("ij,ij->i", _j(n[a]), diff) + np.einsum("ij,ij->i", mid, _j(p[a]))) / rho
            gb = (0.5 * np.einsum("ij,ij->i", _j(n[b]), diff) - np.einsum("ij,ij->i", mid, _j(p[b]))) / rho
            rows = np.arange(len(a))
            J = sparse.csr_matrix((np.concatenate([ga, gb]), (np.concatenate([rows, rows]), np.concatenate([oa, ob]))),
                                  shape=(len(a), m))
            lhs = (J.T @ J + eye).tocsc()
            rhs = -(J.T @ r0) - angles
            step = np.atleast_1d(spsolve(lhs, rhs))
            if not np.all(np.isfinite(step)):
                raise NumericalError("rotation system is singular", stage="param")
            scale = 1.0
            for _ in range(20):
                trial = rotation_objective(param, pairs, angles + scale * step, rho)
                if trial <= current:
                    break
                scale *= 0.5
            else:
                break
            angles = angles + scale * step
            current = trial
            if np.max(np.abs(scale * step)) < STOP_DTHETA:
                break
    new_t = [replace(tr, theta=tr.theta + float(angles[i])) for i, tr in enumerate(transforms)]
    p, n = _rotated(param, angles) if m else (param.local_pts, param.local_normals)
    out = ParamCloud(p, param.owner_node, param.world_index, n)
    return RotationResult(angles, out, new_t, start, current, rounds)


def invert_param(param: ParamCloud, transforms: Sequence[NodeTransform]) -> np.ndarray:
    """World positions of ``param.local_pts`` (exact inverse rotation, then the rigid inverse)."""
    if len(param) == 0:
        return np.zeros((0, 3))
    R, t, theta = _stack(transforms)
    o = param.owner_node
    q = np.einsum("mji,mj->mi", rot_x(theta[o]), param.local_pts) - t[o]
    return np.einsum("mji,mj->mi", R[o], q)


def strip_z_jump(cloud_points: np.ndarray, param: ParamCloud, polylines: Sequence[FeaturePolyline],
                 transforms: Sequence[NodeTransform]) -> float:
    """Largest height disagreement between adjacent node frames.

    Every point is expressed in its owner frame and in the frames of the
    neighbouring nodes on the same polyline; the maximum |z difference| over
    all such pairs is a direct measure of folds between strips.
    """
    poly, pos = node_polyline_index(polylines)
    R, t, theta = _stack(transforms)
    o = param.owner_node
    pts = np.asarray(cloud_points)[param.world_index]
    worst = 0.0
    for offset in (-1, 1):
        other = o + offset
        valid = (other >= 0) & (other < len(transforms))
        other = np.where(valid, other, o)
        valid &= adjacent_owners(o, other, polylines) & (other != o)
        if not valid.any():
            continue
        mine = param.local_pts[valid, 2]
        ov = other[valid]
        q = np.einsum("mij,mj->mi", R[ov], pts[valid]) + t[ov]
        z = np.einsum("mj,mj->m", rot_x(theta[ov])[:, 2, :], q)
        worst = max(worst, float(np.max(np.abs(mine - z))))
    return worst
