"""Ordered feature polylines, per-node frames, the augmented cloud and affiliation.

Feature positions are linked by a Euclidean minimum spanning forest (edges
capped at 3 rho), short spurs are pruned, and each tree is split into simple
paths by repeatedly taking its longest leaf-to-leaf path.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import cKDTree

from .cloud import RADIUS_SLACK, PointCloud, SpatialIndex, cross
from .errors import InputError, NumericalError
from .ridge_detect import MERGE_RHO, FeaturePointSet

EDGE_RHO = 3.0
SPUR_NODES = 5
MIN_NODES = 3
NORMAL_RHO = 3.0
ON_LINE_TOL = 1e-9

LEFT, ON_LINE, RIGHT = -1, 0, 1


@dataclass
class FeatureNode:
    v: np.ndarray
    dir: np.ndarray
    n: np.ndarray
    l: float
    convexity: int


@dataclass
class FeaturePolyline:
    """Ordered polyline; attribute arrays are ``None`` until :func:`node_attributes`."""

    positions: np.ndarray  # (M, 3)
    convexity: np.ndarray  # (M,)
    source: np.ndarray  # (M,) index into the feature set
    closed: bool = False
    dirs: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    lengths: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_attributes(self) -> bool:
        return self.dirs is not None

    @property
    def nodes(self) -> list[FeatureNode]:
        if not self.has_attributes:
            raise InputError("polyline has no node attributes")
        return [FeatureNode(self.positions[i], self.dirs[i], self.normals[i], float(self.lengths[i]),
                            int(self.convexity[i])) for i in range(len(self))]

    def transformed(self, R, t=(0.0, 0.0, 0.0)) -> "FeaturePolyline":
        """Copy under the rigid motion ``p -> R p + t``."""
        R = np.asarray(R, dtype=float)
        rot = lambda a: None if a is None else a @ R.T
        return FeaturePolyline(self.positions @ R.T + np.asarray(t, float), self.convexity.copy(),
                               self.source.copy(), self.closed, rot(self.dirs), rot(self.normals),
                               None if self.lengths is None else self.lengths.copy())


@dataclass
class Affiliation:
    """Nearest-node assignment of every cloud point.

    ``node_of`` indexes the concatenation of all polyline nodes (-1 when there
    are none); ``polyline_of``/``local_of`` split it into polyline and node
    position.  ``side`` is LEFT (-1), ON_LINE (0) or RIGHT (+1).
    """

    node_of: np.ndarray
    polyline_of: np.ndarray
    local_of: np.ndarray
    side: np.ndarray
    dist: np.ndarray


def _forest(points: np.ndarray, cap: float) -> list[set]:
    n = len(points)
    pairs = cKDTree(points).query_pairs(cap, output_type="ndarray")
    adj = [set() for _ in range(n)]
    if len(pairs) == 0:
        return adj
    w = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
    # csgraph treats stored zeros as missing edges
    w = np.maximum(w, 1e-300)
    mst = minimum_spanning_tree(coo_matrix((w, (pairs[:, 0], pairs[:, 1])), shape=(n, n))).tocoo()
    for a, b in zip(mst.row, mst.col):
        adj[a].add(int(b))
        adj[b].add(int(a))
    return adj


def _prune_spurs(adj: list[set], min_nodes: int) -> None:
    """Remove leaf branches with fewer than ``min_nodes`` nodes hanging off a junction."""
    alive = [True] * len(adj)
    changed = True
    while changed:
        changed = False
        spurs = []
        for leaf in range(len(adj)):
            if not alive[leaf] or len(adj[leaf]) != 1:
                continue
            branch = [leaf]
            prev, cur = leaf, next(iter(adj[leaf]))
            while len(adj[cur]) == 2:
                branch.append(cur)
                prev, cur = cur, next(x for x in adj[cur] if x != prev)
            if len(adj[cur]) >= 3 and len(branch) < min_nodes:
                spurs.append((len(branch), leaf, branch, cur))
        # shortest spur first; re-check, an earlier removal may have made a junction a path
        for _, leaf, branch, junction in sorted(spurs, key=lambda s: (s[0], s[1])):
            if not all(alive[b] for b in branch) or len(adj[junction]) < 3:
                continue
            if len(adj[branch[-1]] - set(branch)) != 1:
                continue
            for a, b in zip(branch, branch[1:] + [junction]):
                adj[a].discard(b)
                adj[b].discard(a)
            for b in branch:
                alive[b] = False
                adj[b].clear()
            changed = True
    for i in range(len(adj)):
        if not alive[i]:
            adj[i].clear()


def _farthest(adj, points, start, allowed):
    dist = {start: 0.0}
    parent = {start: -1}
    queue = deque([start])
    while queue:
        a = queue.popleft()
        for b in sorted(adj[a]):
            if b in allowed and b not in dist:
                dist[b] = dist[a] + float(np.linalg.norm(points[a] - points[b]))
                parent[b] = a
                queue.append(b)
    end = min(dist, key=lambda k: (-dist[k], k))
    return end, parent


def _longest_path(adj, points, component: set) -> list[int]:
    a, _ = _farthest(adj, points, min(component), component)
    b, parent = _farthest(adj, points, a, component)
    path = [b]
    while parent[path[-1]] != -1:
        path.append(parent[path[-1]])
    return path


def _components(adj, nodes: set) -> list[set]:
    seen = set()
    out = []
    for s in sorted(nodes):
        if s in seen:
            continue
        comp = {s}
        queue = deque([s])
        while queue:
            a = queue.popleft()
            for b in adj[a]:
                if b in nodes and b not in comp:
                    comp.add(b)
                    queue.append(b)
        seen |= comp
        out.append(comp)
    return out


def _is_loop(points: np.ndarray, cap: float) -> bool:
    if len(points) < 6:
        return False
    gap = float(np.linalg.norm(points[0] - points[-1]))
    arc = float(np.sum(np.linalg.norm(np.diff(points, axis=0), axis=1)))
    return gap <= cap and arc >= 3 * gap


def build_polylines(features: Union[FeaturePointSet, np.ndarray], rho: Optional[float] = None,
                    convexities: Optional[np.ndarray] = None) -> list[FeaturePolyline]:
    """Link feature positions into ordered simple polylines.

    Args:
        features: a feature set, or raw (M, 3) positions.
        rho: sampling density of the source cloud (taken from the feature set if omitted).

    Returns:
        Polylines with at least 3 nodes, oriented so the first node has the
        lower feature index, ordered by their first feature index.
    """
    if isinstance(features, FeaturePointSet):
        pts = features.positions
        conv = features.convexities
        rho = features.rho if rho is None else rho
    else:
        pts = np.asarray(features, dtype=float).reshape(-1, 3)
        conv = np.zeros(len(pts), dtype=int) if convexities is None else np.asarray(convexities)
    if len(pts) == 0:
        return []
    if rho is None or rho <= 0:
        raise InputError("rho must be positive")
    cap = EDGE_RHO * rho
    adj = _forest(pts, cap)
    _prune_spurs(adj, SPUR_NODES)

    remaining = {i for i in range(len(pts)) if adj[i]}
    paths = []
    work = _components(adj, remaining)
    while work:
        comp = work.pop()
        path = _longest_path(adj, pts, comp)
        if len(path) >= MIN_NODES:
            paths.append(path)
        rest = comp - set(path)
        if rest:
            work.extend(_components(adj, rest))

    out = []
    for path in paths:
        if path[0] > path[-1]:
            path = path[::-1]
        idx = np.asarray(path, dtype=np.intp)
        out.append(FeaturePolyline(pts[idx].copy(), np.asarray(conv)[idx].astype(int), idx,
                                   closed=_is_loop(pts[idx], cap)))
    out.sort(key=lambda p: int(p.source[0]))
    return out


def node_attributes(poly: FeaturePolyline, cloud: PointCloud, radius: Optional[float] = None,
                    rho: Optional[float] = None) -> FeaturePolyline:
    """Fill tangent, normal and cumulative chord length of every node.

    Args:
        radius: normal-averaging radius (default 3 rho of ``cloud``).
    """
    if len(poly) < MIN_NODES:
        raise InputError("polyline needs at least 3 nodes")
    if cloud.normals is None:
        raise InputError("normals required for node attributes")
    rho = cloud.rho if rho is None else rho
    radius = NORMAL_RHO * rho if radius is None else radius
    v = poly.positions
    if poly.closed:
        d = np.roll(v, -1, axis=0) - np.roll(v, 1, axis=0)
    else:
        d = np.empty_like(v)
        d[1:-1] = v[2:] - v[:-2]
        d[0] = v[1] - v[0]
        d[-1] = v[-1] - v[-2]
    norm = np.linalg.norm(d, axis=1)
    if np.any(norm == 0):
        raise NumericalError("coincident nodes around node %d" % int(np.argmin(norm)), stage="lines")
    dirs = d / norm[:, None]

    normals = np.empty_like(v)
    for i, nb in enumerate(cloud.index.radius_many(v, radius)):
        if len(nb) == 0:
            raise NumericalError("no cloud point within %.3g of node %d" % (radius, i), stage="lines")
        m = cloud.normals[nb].mean(axis=0)
        m = m - (m @ dirs[i]) * dirs[i]
        k = np.linalg.norm(m)
        if k == 0:
            raise NumericalError("degenerate normal at node %d" % i, stage="lines")
        normals[i] = m / k
    steps = np.linalg.norm(np.diff(v, axis=0), axis=1)
    lengths = np.concatenate([[0.0], np.cumsum(steps)])
    return FeaturePolyline(v, poly.convexity, poly.source, poly.closed, dirs, normals, lengths)


def _stack_nodes(polylines: Sequence[FeaturePolyline]):
    if not polylines:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    v = np.concatenate([p.positions for p in polylines])
    owner = np.concatenate([np.full(len(p), k, dtype=np.intp) for k, p in enumerate(polylines)])
    local = np.concatenate([np.arange(len(p), dtype=np.intp) for p in polylines])
    return v, owner, local


def augment_cloud(cloud: PointCloud, features: Union[FeaturePointSet, Sequence[FeaturePolyline], np.ndarray],
                  rho: Optional[float] = None) -> PointCloud:
    """Append feature positions to the cloud, flagged in ``is_feature``.

    Polylines contribute their nodes with the node normals; a feature set or
    raw positions take the normal of the nearest original point.  A feature
    within rho/2 of a point already flagged as feature is skipped, so
    augmenting twice adds nothing.  The result keeps the density of the
    original cloud.
    """
    rho = cloud.rho if rho is None else rho
    if isinstance(features, FeaturePointSet):
        pos, nrm = features.positions, None
    elif isinstance(features, np.ndarray):
        pos, nrm = features.reshape(-1, 3), None
    else:
        pos = _stack_nodes(features)[0]
        nrm = np.concatenate([p.normals for p in features]) if features and all(p.has_attributes for p in features) else None
    flags = cloud.feature_mask
    if len(pos) == 0:
        return PointCloud(cloud.points, cloud.normals, flags.copy(), _rho=rho)
    keep = np.ones(len(pos), dtype=bool)
    if flags.any():
        d, _ = cKDTree(cloud.points[flags]).query(pos)
        keep = d > MERGE_RHO * rho
    pos = pos[keep]
    normals = None
    if cloud.normals is not None:
        if nrm is not None:
            new_n = nrm[keep]
        else:
            _, j = cKDTree(cloud.points).query(pos)
            new_n = cloud.normals[np.atleast_1d(j)]
        normals = np.concatenate([cloud.normals, new_n.reshape(-1, 3)])
    points = np.concatenate([cloud.points, pos])
    mask = np.concatenate([flags, np.ones(len(pos), dtype=bool)])
    return PointCloud(points, normals, mask, _rho=rho)


def affiliate(cloud: PointCloud, polylines: Sequence[FeaturePolyline], rho: Optional[float] = None) -> Affiliation:
    """Nearest-node assignment (ties to the lower node index) and side labels."""
    n = len(cloud)
    v, owner, local = _stack_nodes(polylines)
    if len(v) == 0:
        none = np.full(n, -1, dtype=np.intp)
        return Affiliation(none, none.copy(), none.copy(), np.zeros(n, dtype=int), np.full(n, np.inf))
    if not all(p.has_attributes for p in polylines):
        raise InputError("polylines need node attributes before affiliation")
    rho = cloud.rho if rho is None else rho
    nb, d = SpatialIndex(v).knn_many(cloud.points, min(2, len(v)))
    node, dist = nb[:, 0], d[:, 0]
    if nb.shape[1] > 1:
        # distances equal up to rounding count as ties, resolved to the lower index
        tie = d[:, 1] <= d[:, 0] * (1.0 + RADIUS_SLACK)
        node = np.where(tie, np.minimum(nb[:, 0], nb[:, 1]), node)
    dirs = np.concatenate([p.dirs for p in polylines])
    normals = np.concatenate([p.normals for p in polylines])
    binormal = cross(dirs, normals)
    s = np.einsum("ij,ij->i", cloud.points - v[node], binormal[node])
    side = np.where(np.abs(s) < ON_LINE_TOL * rho, ON_LINE, np.where(s > 0, RIGHT, LEFT))
    return Affiliation(node, owner[node], local[node], side.astype(int), dist)


def extract_polylines(features: FeaturePointSet, cloud: PointCloud) -> list[FeaturePolyline]:
    """:func:`build_polylines` followed by :func:`node_attributes` on each result."""
    return [node_attributes(p, cloud, rho=features.rho) for p in build_polylines(features)]
