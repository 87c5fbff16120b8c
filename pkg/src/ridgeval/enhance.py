"""Feature enhancement by z-only least squares in the straightened frames.

Points near a feature line are split into an enhance band (distance <= 3
delta, solved for) and a maintain band (<= 5 delta, held fixed).  Every free
point gets a position row pulling its height towards a target and normal rows
asking the segments to its same-side neighbours to be perpendicular to an
expected normal.  Targets and normals depend on the mode:

* conformal: seeds (feature points) move by delta along the node normal,
  everything else keeps its shape;
* sharp: seeds move onto the intersection line of the two mean planes and
  normals near the line blend into the mean-plane normals;
* cad: every point is pulled onto the mean plane of its side.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .cloud import PointCloud, SpatialIndex, estimate_normals, tie_order
from .curvature import curvature_field
from .errors import InputError, NumericalError
from .parameterize import (NodeTransform, ParamCloud, adjacent_owners, apply_param, invert_param,
                           optimize_rotations, polyline_transforms, rot_x)
from .ridge_detect import FeaturePointSet, detect_features
from .ridge_lines import ON_LINE, Affiliation, FeaturePolyline, affiliate, augment_cloud, extract_polylines

logger = logging.getLogger(__name__)

MODES = ("conformal", "sharp", "cad")
ENHANCE_MULT = 3.0
MAINTAIN_MULT = 5.0
BAND = (3.0, 5.0)  # mean-plane support band, in rho
PLANE_REACH = 6.0  # mean-plane support gathered this far from the node, in rho
MIN_SUPPORT = 3
PARALLEL_TOL = 1e-6


@dataclass
class TargetSet:
    """World-space targets of the active points (indices into the cloud)."""

    index: np.ndarray
    p_tilde: np.ndarray
    n_tilde: np.ndarray
    weights: float = 0.5
    hard: Optional[np.ndarray] = None  # bool per entry: fixed at its target
    blend: Optional[np.ndarray] = None  # how far n_tilde departs from the original normal, in [0, 1]
    on_plane: Optional[list] = None  # per entry: (centroid, normal) the point should land on, or None
    silent: Optional[np.ndarray] = None  # bool per entry: emits no normal rows of its own (edge points)

    def __len__(self) -> int:
        return len(self.index)


@dataclass
class PlaneFit:
    centroid: np.ndarray
    normal: np.ndarray
    support_count: int


@dataclass
class MeanPlanePair:
    left: PlaneFit
    right: PlaneFit

    def plane(self, side: int) -> PlaneFit:
        return self.left if side < 0 else self.right

    def intersection(self):
        """(point, unit direction) of the line where the two planes meet."""
        a, b = self.left, self.right
        d = np.cross(a.normal, b.normal)
        s = np.linalg.norm(d)
        if s < PARALLEL_TOL:
            raise NumericalError("no intersection line: mean planes are parallel", stage="enhance")
        d = d / s
        # point on both planes closest to the midpoint of the centroids
        mid = 0.5 * (a.centroid + b.centroid)
        A = np.vstack([a.normal, b.normal, d])
        rhs = np.array([a.normal @ a.centroid, b.normal @ b.centroid, d @ mid])
        return np.linalg.solve(A, rhs), d


@dataclass
class RegionPartition:
    enhance_set: np.ndarray
    maintain_set: np.ndarray
    outside: np.ndarray

    def active(self) -> np.ndarray:
        return np.union1d(self.enhance_set, self.maintain_set)


@dataclass
class EnhancementSystem:
    """Rows ``A z = rhs`` over the free heights ``unknowns`` (cloud indices)."""

    matrix: sparse.csr_matrix
    rhs: np.ndarray
    unknowns: np.ndarray
    position_rows: int
    normal_rows: int
    fixed: dict = field(default_factory=dict)  # cloud index -> fixed parameter-domain z

    @property
    def unknown_count(self) -> int:
        return len(self.unknowns)

    @property
    def row_count(self) -> int:
        return self.matrix.shape[0]

    def objective(self, z: np.ndarray) -> float:
        r = self.matrix @ z - self.rhs
        return float(r @ r)


def partition_regions(aff: Affiliation, delta, enhance_radius=None, maintain_radius=None) -> RegionPartition:
    """Split points by distance to their node: <= 3 delta enhance, <= 5 delta maintain.

    Args:
        delta: scalar or per-node array.
        enhance_radius, maintain_radius: optional per-node overrides of 3 delta / 5 delta.
    """
    delta = np.asarray(delta, dtype=float)
    if np.any(delta < 0):
        raise InputError("delta must be non-negative")
    has = aff.node_of >= 0
    node = np.where(has, aff.node_of, 0)

    def per_point(v):
        v = np.asarray(v, dtype=float)
        return v[node] if v.ndim else np.full(len(node), float(v))

    inner = per_point(ENHANCE_MULT * delta if enhance_radius is None else enhance_radius)
    outer = per_point(MAINTAIN_MULT * delta if maintain_radius is None else maintain_radius)
    d = aff.dist
    enh = has & (d <= inner)
    mnt = has & ~enh & (d <= outer)
    return RegionPartition(np.flatnonzero(enh), np.flatnonzero(mnt), np.flatnonzero(~(enh | mnt)))


def adaptive_amplitude(aff: Affiliation, n_nodes: Optional[int] = None):
    """Per-node (delta, enhance radius) from the node's bounding radius r: (r/5, r/3).

    Nodes without affiliated points take the value of the nearest node (by
    index) that has some.
    """
    n_nodes = int(aff.node_of.max()) + 1 if n_nodes is None else n_nodes
    r = np.full(n_nodes, np.nan)
    has = aff.node_of >= 0
    if has.any():
        r_max = np.zeros(n_nodes)
        np.maximum.at(r_max, aff.node_of[has], aff.dist[has])
        count = np.bincount(aff.node_of[has], minlength=n_nodes)
        r[count > 0] = r_max[count > 0]
    known = np.flatnonzero(~np.isnan(r))
    if len(known) == 0:
        raise InputError("no affiliated points")
    missing = np.flatnonzero(np.isnan(r))
    if len(missing):
        nearest = known[np.clip(np.searchsorted(known, missing), 0, len(known) - 1)]
        prev = known[np.clip(np.searchsorted(known, missing) - 1, 0, len(known) - 1)]
        pick = np.where(np.abs(prev - missing) <= np.abs(nearest - missing), prev, nearest)
        r[missing] = r[pick]
    return r / 5.0, r / 3.0


def regions_overlap(polylines: Sequence[FeaturePolyline], reach: float) -> bool:
    """True when nodes of two different polylines are closer than ``2 * reach``."""
    for i in range(len(polylines)):
        tree = cKDTree(polylines[i].positions)
        for j in range(i + 1, len(polylines)):
            d, _ = tree.query(polylines[j].positions)
            if np.min(d) < 2 * reach:
                return True
    return False


def _fit_plane(points: np.ndarray, normals: np.ndarray) -> PlaneFit:
    n = normals.mean(axis=0)
    return PlaneFit(points.mean(axis=0), n / np.linalg.norm(n), len(points))


def mean_planes(node: int, aff: Affiliation, cloud: PointCloud, node_positions: np.ndarray,
                rho: Optional[float] = None) -> MeanPlanePair:
    """Left/right mean planes of the band points (3-5 rho from the line) around a node.

    Args:
        node: global node index.
        node_positions: (nodes, 3) concatenated node positions.
    """
    if cloud.normals is None:
        raise InputError("normals required for mean planes")
    rho = cloud.rho if rho is None else rho
    v = node_positions[node]
    near = cloud.index.radius(v, PLANE_REACH * rho)
    d = aff.dist[near]
    band = near[(d >= BAND[0] * rho) & (d <= BAND[1] * rho) & (aff.node_of[near] >= 0)]
    sides = aff.side[band]
    left = band[sides < 0]
    right = band[sides > 0]
    if len(left) < MIN_SUPPORT or len(right) < MIN_SUPPORT:
        raise NumericalError("one-sided feature at node %d" % node, stage="enhance")
    return MeanPlanePair(_fit_plane(cloud.points[left], cloud.normals[left]),
                         _fit_plane(cloud.points[right], cloud.normals[right]))


def _seed_direction(convexity) -> np.ndarray:
    # ridges (negative mean curvature) rise along the normal, valleys sink
    c = np.asarray(convexity)
    return np.where(c > 0, -1.0, 1.0)


def expected_conformal(cloud: PointCloud, polylines: Sequence[FeaturePolyline], aff: Affiliation,
                       active: np.ndarray, delta, lam: float = 0.5, noise_guard: bool = False,
                       rho: Optional[float] = None) -> TargetSet:
    """Seeds move by delta along their node normal, everything else stays.

    Args:
        delta: scalar or per-node amplitude.
        noise_guard: replace each seed's base position by the projection of
            its neighbourhood mean onto the node-normal line first.
    """
    rho = cloud.rho if rho is None else rho
    active = np.asarray(active, dtype=np.intp)
    normals = np.concatenate([p.normals for p in polylines]) if polylines else np.zeros((0, 3))
    conv = np.concatenate([p.convexity for p in polylines]) if polylines else np.zeros(0)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), (len(normals),))
    p_t = cloud.points[active].copy()
    n_t = cloud.normals[active].copy()
    seeds = cloud.feature_mask[active] & (aff.node_of[active] >= 0)
    raw = ~cloud.feature_mask
    for row in np.flatnonzero(seeds):
        i = active[row]
        node = aff.node_of[i]
        n = normals[node]
        base = cloud.points[i]
        if noise_guard:
            nb = cloud.index.radius(base, ENHANCE_MULT * rho)
            nb = nb[raw[nb]]
            if len(nb):
                base = base + ((cloud.points[nb].mean(axis=0) - base) @ n) * n
        p_t[row] = base + _seed_direction(conv[node]) * delta[node] * n
    return TargetSet(active, p_t, n_t, lam, seeds, np.zeros(len(active)), [None] * len(active))


def _plane_pairs(nodes: np.ndarray, aff, cloud, node_positions, rho):
    out = {}
    for node in np.unique(nodes):
        try:
            out[int(node)] = mean_planes(int(node), aff, cloud, node_positions, rho)
        except NumericalError as exc:
            logger.info("%s; conformal fallback", exc)
            out[int(node)] = None
    return out


def expected_sharp(cloud: PointCloud, polylines: Sequence[FeaturePolyline], aff: Affiliation,
                   active: np.ndarray, delta, amplitude: Union[str, float] = "auto", lam: float = 0.5,
                   planes: Optional[dict] = None, rho: Optional[float] = None) -> TargetSet:
    """Seeds move onto the mean-plane intersection line; normals blend into the mean planes.

    Args:
        delta: region amplitude (scalar or per node) setting the blend width 3 delta.
        amplitude: "auto" projects seeds onto the line; a number moves them
            that far along the direction to the line.
    """
    rho = cloud.rho if rho is None else rho
    active = np.asarray(active, dtype=np.intp)
    node_pos = np.concatenate([p.positions for p in polylines])
    delta = np.broadcast_to(np.asarray(delta, dtype=float), (len(node_pos),))
    if planes is None:
        planes = _plane_pairs(aff.node_of[active], aff, cloud, node_pos, rho)
    base = expected_conformal(cloud, polylines, aff, active, delta, lam, rho=rho)
    p_t, n_t, hard, blend = base.p_tilde, base.n_tilde, base.hard, base.blend
    # an edge point has no single normal
    silent = np.zeros(len(active), dtype=bool)
    for row, i in enumerate(active):
        node = aff.node_of[i]
        pair = planes.get(int(node))
        if pair is None:
            continue
        try:
            q, d = pair.intersection()
        except NumericalError as exc:
            logger.info("%s at node %d; conformal fallback", exc, node)
            planes[int(node)] = None
            continue
        if hard[row] or aff.side[i] == ON_LINE:
            # seeds and points lying on the line itself go onto the intersection line
            hard[row] = True
            silent[row] = True
            p = cloud.points[i]
            foot = q + ((p - q) @ d) * d
            if amplitude == "auto":
                p_t[row] = foot
            else:
                gap = foot - p
                g = np.linalg.norm(gap)
                p_t[row] = p if g == 0 else p + float(amplitude) * gap / g
            n_t[row] = cloud.normals[i]
            continue
        side = aff.side[i]
        w = float(np.clip(1.0 - aff.dist[i] / (ENHANCE_MULT * delta[node]), 0.0, 1.0)) if delta[node] > 0 else 0.0
        m = (1 - w) * cloud.normals[i] + w * pair.plane(side).normal
        n_t[row] = m / np.linalg.norm(m)
        blend[row] = w
    return TargetSet(active, p_t, n_t, lam, hard, blend, base.on_plane, silent)


def expected_cad(cloud: PointCloud, polylines: Sequence[FeaturePolyline], aff: Affiliation,
                 active: np.ndarray, lam: float = 0.5, planes: Optional[dict] = None,
                 rho: Optional[float] = None) -> TargetSet:
    """Every off-line point is pulled onto its side's mean plane; on-line points get sharp targets."""
    rho = cloud.rho if rho is None else rho
    active = np.asarray(active, dtype=np.intp)
    node_pos = np.concatenate([p.positions for p in polylines])
    if planes is None:
        planes = _plane_pairs(aff.node_of[active], aff, cloud, node_pos, rho)
    t = expected_sharp(cloud, polylines, aff, active, rho, "auto", lam, planes, rho)
    for row, i in enumerate(active):
        pair = planes.get(int(aff.node_of[i]))
        side = aff.side[i]
        if pair is None or side == ON_LINE or t.hard[row]:
            continue
        pl = pair.plane(side)
        p = cloud.points[i]
        t.p_tilde[row] = p - ((p - pl.centroid) @ pl.normal) * pl.normal
        t.n_tilde[row] = pl.normal
        t.blend[row] = 1.0
        t.on_plane[row] = (pl.centroid, pl.normal)
    return t


def param_z_targets(targets: TargetSet, param: ParamCloud, transforms: Sequence[NodeTransform]):
    """Parameter-domain height targets and normals of the active points."""
    R = np.array([tr.R for tr in transforms])
    t = np.array([tr.t for tr in transforms])
    theta = np.array([tr.theta for tr in transforms])
    o = param.owner_node
    M = rot_x(theta[o]) @ R[o]
    shift = np.einsum("mij,mj->mi", rot_x(theta[o]), t[o])
    mapped = np.einsum("mij,mj->mi", M, targets.p_tilde) + shift
    z = mapped[:, 2].copy()
    n = np.einsum("mij,mj->mi", M, targets.n_tilde)
    for row, plane in enumerate(targets.on_plane or []):
        if plane is None:
            continue
        c = M[row] @ plane[0] + shift[row]
        m = M[row] @ plane[1]
        if abs(m[2]) < 1e-3:
            continue
        # height of the plane above the frozen (x, y) of the point
        x, y = param.local_pts[row, :2]
        z[row] = c[2] - (m[0] * (x - c[0]) + m[1] * (y - c[1])) / m[2]
    return z, n


def _neighbour_pairs(param: ParamCloud, aff: Affiliation, polylines, k: int, points: np.ndarray):
    """Up to k/2 same-side neighbours per active point among same/adjacent owners.

    Candidates come from a tie-inclusive kNN and are ranked with
    :func:`tie_order`, so the pairs do not depend on rounding (lattice clouds
    have many exact ties).
    """
    m = len(param)
    if m < 2:
        return np.zeros((0, 2), dtype=np.intp)
    nb = SpatialIndex(points).knn_with_ties(points, min(k + 1, m))
    side = aff.side[param.world_index]
    own = param.owner_node
    out = []
    cap = max(1, k // 2)
    for i in range(m):
        cand = nb[i][nb[i] != i]
        ok = ((side[cand] == side[i]) | (side[cand] == ON_LINE) | (side[i] == ON_LINE))
        ok &= adjacent_owners(np.full(len(cand), own[i]), own[cand], polylines)
        cand = cand[ok]
        if not len(cand):
            continue
        d = np.linalg.norm(points[cand] - points[i], axis=1)
        for j in cand[tie_order(cand, d)[:cap]]:
            out.append((i, int(j)))
    return np.array(out, dtype=np.intp).reshape(-1, 2)


def assemble_system(param: ParamCloud, targets: TargetSet, partition: RegionPartition, aff: Affiliation,
                    polylines: Sequence[FeaturePolyline], transforms: Sequence[NodeTransform],
                    lam: float = 0.5, k: int = 12, world_points: Optional[np.ndarray] = None) -> EnhancementSystem:
    """Stack position and normal rows over the free parameter-domain heights.

    ``param`` and ``targets`` cover the same active points in the same order.
    Maintain points and hard seeds are fixed and enter only the right-hand side.
    """
    if not 0.0 <= lam <= 1.0:
        raise InputError("lambda must lie in [0, 1]")
    if not np.array_equal(param.world_index, targets.index):
        raise InputError("targets and parameterisation cover different points")
    enh = np.isin(param.world_index, partition.enhance_set)
    hard = targets.hard if targets.hard is not None else np.zeros(len(param), dtype=bool)
    free = enh & ~hard
    if not enh.any():
        raise InputError("nothing to enhance")
    z_t, n_t = param_z_targets(targets, param, transforms)
    z0 = param.local_pts[:, 2]
    fixed_z = np.where(hard, z_t, z0)
    col = np.full(len(param), -1, dtype=np.intp)
    col[free] = np.arange(int(free.sum()))
    n_unknown = int(free.sum())

    rows, cols, vals, rhs = [], [], [], []
    r = 0
    if lam > 0:
        w = np.sqrt(lam)
        for i in np.flatnonzero(free):
            rows.append(r)
            cols.append(col[i])
            vals.append(w)
            rhs.append(w * z_t[i])
            r += 1
    position_rows = r
    if lam < 1:
        w = np.sqrt(1.0 - lam)
        pts = world_points[param.world_index] if world_points is not None else param.local_pts
        blend = targets.blend if targets.blend is not None else np.zeros(len(param))
        p = param.local_pts
        silent = targets.silent if targets.silent is not None else np.zeros(len(param), dtype=bool)
        for i, j in _neighbour_pairs(param, aff, polylines, k, pts):
            if silent[i] or not (enh[i] or enh[j]) or (col[i] < 0 and col[j] < 0):
                continue
            n = n_t[i]
            const = n[0] * (p[i, 0] - p[j, 0]) + n[1] * (p[i, 1] - p[j, 1])
            # points keeping their own normal keep the current offset along it
            keep = (1.0 - blend[i]) * (n @ (p[i] - p[j]))
            b = keep - const
            for a, sign in ((i, 1.0), (j, -1.0)):
                if col[a] >= 0:
                    rows.append(r)
                    cols.append(col[a])
                    vals.append(w * sign * n[2])
                else:
                    b -= sign * n[2] * fixed_z[a]
            rhs.append(w * b)
            r += 1
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(r, n_unknown))
    fixed = {int(param.world_index[i]): float(fixed_z[i]) for i in np.flatnonzero(enh & hard)}
    return EnhancementSystem(A, np.asarray(rhs, dtype=float), param.world_index[free], position_rows,
                             r - position_rows, fixed)


def solve_system(system: EnhancementSystem) -> np.ndarray:
    """Least-squares heights through the sparse normal equations."""
    n = system.unknown_count
    if n == 0:
        return np.zeros(0)
    if system.row_count < n:
        raise NumericalError("under-determined system: %d rows for %d unknowns" % (system.row_count, n),
                             stage="solve")
    A = system.matrix.tocsc()
    N = (A.T @ A).tocsc()
    b = A.T @ system.rhs
    diag = N.diagonal()
    scale = max(float(np.max(np.abs(diag))), 1e-300)
    deficit = int(np.sum(diag <= 1e-14 * scale))
    if deficit == 0:
        try:
            lu = splu(N)
            pivots = np.abs(lu.U.diagonal())
            deficit = int(np.sum(pivots <= 1e-12 * max(float(pivots.max()), 1e-300)))
        except RuntimeError:
            deficit = max(1, n - int(np.linalg.matrix_rank(N.toarray()))) if n <= 4000 else 1
    if deficit:
        raise NumericalError("singular normal equations (rank deficit %d)" % deficit, stage="solve")
    z = lu.solve(b)
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite solution", stage="solve")
    return z


@dataclass
class EnhanceResult:
    cloud: PointCloud  # enhanced augmented cloud
    augmented: PointCloud  # augmented cloud before enhancement
    features: FeaturePointSet
    polylines: list
    affiliation: Affiliation
    partition: RegionPartition
    param_before: ParamCloud
    param_after: ParamCloud
    transforms: list
    targets: TargetSet
    system: EnhancementSystem
    delta: np.ndarray  # per node
    adaptive: bool
    rho: float
    residual: float = 0.0  # stacked squared residual at the solution

    @property
    def displacement(self) -> np.ndarray:
        return self.cloud.points - self.augmented.points


def enhance(cloud: PointCloud, mode: str = "conformal", delta: Union[str, float] = "auto", lam: float = 0.5,
            k: int = 12, adaptive: Optional[bool] = None, radius_mult: float = 3.0, noise: bool = False,
            noise_radius_mult: float = 6.0, optimize: bool = True,
            features: Optional[FeaturePointSet] = None,
            polylines: Optional[Sequence[FeaturePolyline]] = None) -> EnhanceResult:
    """Detect feature lines and enhance the points around them.

    Args:
        delta: amplitude in model units, or "auto" (rho for the region
            amplitude; for sharp mode the seed displacement is also
            conjectured from the mean planes).
        adaptive: per-node amplitude r/5 and region r/3; ``None`` switches it
            on when two lines' maintain regions would overlap.
        noise: estimate normals and curvature at ``noise_radius_mult`` rho and
            guard seeds against noise.
    """
    if mode not in MODES:
        raise InputError("unknown mode %r" % mode)
    if not 0.0 <= lam <= 1.0:
        raise InputError("lambda must lie in [0, 1]")
    if k < 4:
        raise InputError("k must be at least 4")
    rho = cloud.rho
    r_mult = noise_radius_mult if noise else radius_mult
    if cloud.normals is None:
        cloud = cloud.with_normals(estimate_normals(cloud, r_mult * rho))
    if features is None:
        field_ = curvature_field(cloud, r_mult * rho)
        epd_radius = (1.5 * r_mult if noise else radius_mult) * rho
        features = detect_features(cloud, epd_radius, field_)
    if polylines is None:
        polylines = extract_polylines(features, cloud)
    if not polylines:
        raise NumericalError("no feature lines found", stage="lines")
    aug = augment_cloud(cloud, polylines, rho)
    aff = affiliate(aug, polylines, rho)
    n_nodes = sum(len(p) for p in polylines)

    auto = isinstance(delta, str)
    if auto and delta != "auto":
        raise InputError("delta must be a number or 'auto'")
    base_delta = rho if auto else float(delta)
    if base_delta < 0:
        raise InputError("delta must be non-negative")
    if adaptive is None:
        adaptive = regions_overlap(polylines, MAINTAIN_MULT * max(base_delta, rho))
    if adaptive:
        d_node, inner = adaptive_amplitude(aff, n_nodes)
        if not auto:
            d_node = np.full(n_nodes, base_delta)
        partition = partition_regions(aff, d_node, inner, inner * MAINTAIN_MULT / ENHANCE_MULT)
    else:
        d_node = np.full(n_nodes, base_delta)
        partition = partition_regions(aff, d_node)
    active = partition.active()

    transforms = polyline_transforms(polylines)
    param = apply_param(aug, aff, transforms, np.isin(np.arange(len(aug)), active))
    if optimize:
        rot = optimize_rotations(param, polylines, transforms, k, rho)
        param, transforms = rot.param, rot.transforms

    if mode == "conformal":
        targets = expected_conformal(aug, polylines, aff, param.world_index, d_node, lam, noise, rho)
    elif mode == "sharp":
        amp = "auto" if auto else base_delta
        targets = expected_sharp(aug, polylines, aff, param.world_index, d_node, amp, lam, rho=rho)
    else:
        targets = expected_cad(aug, polylines, aff, param.world_index, lam, rho=rho)

    system = assemble_system(param, targets, partition, aff, polylines, transforms, lam, k, aug.points)
    z = solve_system(system)

    new_local = param.local_pts.copy()
    pos = {int(w): row for row, w in enumerate(param.world_index)}
    for w, value in zip(system.unknowns, z):
        new_local[pos[int(w)], 2] = value
    for w, value in system.fixed.items():
        new_local[pos[w], 2] = value
    after = ParamCloud(new_local, param.owner_node, param.world_index, param.local_normals)
    moved = np.concatenate([system.unknowns, np.fromiter(system.fixed.keys(), dtype=np.intp)])
    rows = np.array([pos[int(w)] for w in moved], dtype=np.intp)
    world = invert_param(ParamCloud(new_local[rows], param.owner_node[rows], moved), transforms)

    points = aug.points.copy()
    points[moved] = world
    normals = aug.normals.copy()
    normals[moved] = targets.n_tilde[rows]
    out = PointCloud(points, normals, aug.feature_mask.copy(), _rho=rho)
    logger.info("enhanced %d points (%d fixed seeds), %d rows", len(moved), len(system.fixed), system.row_count)
    return EnhanceResult(out, aug, features, list(polylines), aff, partition, param, after, transforms,
                         targets, system, d_node, bool(adaptive), rho, system.objective(z))
