import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

from ridgeval import synth
from ridgeval.errors import NumericalError
from ridgeval.parameterize import (ParamCloud, apply_param, invert_param, node_transform, optimize_rotations,
                                   polyline_transforms, rot_x, rotation_objective, small_angle_rotate,
                                   smoothness_pairs, strip_z_jump)
from ridgeval.ridge_detect import detect_features
from ridgeval.ridge_lines import FeatureNode, FeaturePolyline, affiliate, augment_cloud, extract_polylines


def node(v=(0, 0, 0), d=(1, 0, 0), n=(0, 0, 1), l=0.0):
    return FeatureNode(np.array(v, float), np.array(d, float), np.array(n, float), l, 1)


def test_identity_transform():
    tr = node_transform(node())
    assert np.allclose(tr.R, np.eye(3)) and np.allclose(tr.t, 0) and tr.theta == 0


def test_node_maps_to_arc_length_on_x_axis():
    tr = node_transform(node(v=(5, 0, 0), l=5.0))
    assert np.allclose(tr.forward([5, 0, 0]), [5, 0, 0], atol=1e-12)
    tr = node_transform(node(v=(1, 2, 3), d=(0, 1, 0), n=(1, 0, 0), l=2.5))
    assert np.allclose(tr.forward([1, 2, 3]), [2.5, 0, 0], atol=1e-12)
    assert np.allclose(tr.forward(np.array([1, 3, 3])), [3.5, 0, 0])
    assert np.allclose(tr.forward(np.array([2, 2, 3])), [2.5, 0, 1])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_transform_rigid_and_proper(seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=3)
    n = rng.normal(size=3)
    d /= np.linalg.norm(d)
    n -= (n @ d) * d
    n /= np.linalg.norm(n)
    tr = node_transform(node(rng.normal(size=3), d, n, float(rng.uniform(0, 10))))
    assert np.allclose(tr.R @ tr.R.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(tr.R) == pytest.approx(1.0, abs=1e-9)
    pts = rng.normal(size=(20, 3))
    assert np.allclose(pdist(tr.forward(pts)), pdist(pts), atol=1e-12)
    assert np.allclose(tr.inverse(tr.forward(pts)), pts, atol=1e-12)


def test_nearly_tangent_normal():
    with pytest.raises(NumericalError):
        node_transform(node(n=(1, 0, 0.5)))
    tr = node_transform(node(n=(0.3, 0, 1)))
    assert np.allclose(tr.R[2], [0, 0, 1])


def test_small_angle_examples():
    p = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(small_angle_rotate(p, 0.0), p)
    assert np.allclose(small_angle_rotate([0, 0, 1], 0.1), [0, -0.1, 1])
    exact = rot_x(0.05) @ p
    assert np.linalg.norm(exact - small_angle_rotate(p, 0.05)) <= 2 * 0.05 ** 2 * np.linalg.norm(p)


@settings(max_examples=200, deadline=None)
@given(st.floats(-0.2, 0.2), st.floats(0, 2 * math.pi), st.floats(0, math.pi))
def test_small_angle_error_is_second_order(dtheta, az, el):
    p = np.array([math.cos(az) * math.sin(el), math.sin(az) * math.sin(el), math.cos(el)])
    err = np.linalg.norm(rot_x(dtheta) @ p - small_angle_rotate(p, dtheta))
    assert err <= dtheta ** 2 + 1e-15


@pytest.fixture(scope="module")
def scene():
    c = synth.sine_sheet(8000)
    polys = extract_polylines(detect_features(c), c)
    aug = augment_cloud(c, polys)
    aff = affiliate(aug, polys)
    mask = aff.dist <= 5 * c.rho
    return c.rho, aug, polys, aff, mask


def test_apply_param_node_and_offset(scene):
    rho, aug, polys, aff, mask = scene
    transforms = polyline_transforms(polys)
    p = polys[0]
    nd = p.nodes[10]
    tr = transforms[10]
    assert np.allclose(tr.forward(nd.v), [nd.l, 0, 0], atol=1e-9)
    q = tr.forward(nd.v + rho * np.cross(nd.dir, nd.n))
    assert abs(abs(q[1]) - rho) < 1e-12 and abs(q[2]) < 1e-12


def test_round_trip_and_rigidity(scene):
    rho, aug, polys, aff, mask = scene
    transforms = polyline_transforms(polys)
    param = apply_param(aug, aff, transforms, mask)
    assert np.allclose(invert_param(param, transforms), aug.points[param.world_index], atol=1e-9)
    sel = param.owner_node == 12
    assert np.allclose(pdist(param.local_pts[sel]), pdist(aug.points[param.world_index[sel]]), atol=1e-12)


def test_param_unchanged_by_rigid_motion(scene):
    rho, aug, polys, aff, mask = scene
    rot = Rotation.from_euler("xyz", [0.5, -0.2, 0.9]).as_matrix()
    t = np.array([2.0, -7, 1])
    moved = [p.transformed(rot, t) for p in polys]
    a = apply_param(aug, aff, polyline_transforms(polys), mask)
    b = apply_param(aug.transformed(rot, t), aff, polyline_transforms(moved), mask)
    assert np.allclose(a.local_pts, b.local_pts, atol=1e-9)


def test_pairs_respect_adjacency(scene):
    rho, aug, polys, aff, mask = scene
    param = apply_param(aug, aff, polyline_transforms(polys), mask)
    pairs = smoothness_pairs(param, polys, 12)
    own = param.owner_node[pairs]
    n0 = len(polys[0])
    same_poly = (own[:, 0] < n0) == (own[:, 1] < n0)
    assert same_poly.all()
    assert np.all(np.abs(own[:, 0] - own[:, 1]) <= 1)


def test_clean_normals_need_no_rotation(scene):
    rho, aug, polys, aff, mask = scene
    transforms = polyline_transforms(polys)
    res = optimize_rotations(apply_param(aug, aff, transforms, mask), polys, transforms, rho=rho)
    assert np.max(np.abs(res.dtheta)) < 1e-6


def rotate_node_normal(polys, k, alpha):
    p = polys[0]
    n = p.normals.copy()
    n[k] = math.cos(alpha) * n[k] + math.sin(alpha) * np.cross(p.dirs[k], n[k])
    return [FeaturePolyline(p.positions, p.convexity, p.source, p.closed, p.dirs, n, p.lengths)] + polys[1:]


@pytest.mark.parametrize("alpha", [0.1, -0.1, 0.15])
def test_constructed_misalignment_recovered(scene, alpha):
    # local = Rx(theta)(R p + t): undoing a normal tilted by alpha about dir needs theta = alpha
    rho, aug, polys, aff, mask = scene
    bad = rotate_node_normal(polys, 20, alpha)
    transforms = polyline_transforms(bad)
    param = apply_param(aug, aff, transforms, mask)
    res = optimize_rotations(param, bad, transforms, rho=rho)
    assert abs(res.dtheta[20] - alpha) < 0.02
    assert res.objective_after <= res.objective_before
    pairs = smoothness_pairs(param, bad, 12)
    assert res.objective_after == pytest.approx(rotation_objective(param, pairs, res.dtheta, rho))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_objective_never_increases(scene, seed):
    rho, aug, polys, aff, mask = scene
    rng = np.random.default_rng(seed)
    out = []
    for p in polys:
        ang = rng.uniform(-0.15, 0.15, len(p))
        b = np.cross(p.dirs, p.normals)
        n = p.normals * np.cos(ang)[:, None] + b * np.sin(ang)[:, None]
        out.append(FeaturePolyline(p.positions, p.convexity, p.source, p.closed, p.dirs, n, p.lengths))
    transforms = polyline_transforms(out)
    param = apply_param(aug, aff, transforms, mask)
    res = optimize_rotations(param, out, transforms, rho=rho)
    assert res.objective_after <= res.objective_before
    assert np.allclose(invert_param(res.param, res.transforms), aug.points[param.world_index], atol=1e-9)
    assert strip_z_jump(aug.points, res.param, out, res.transforms) <= strip_z_jump(aug.points, param, out, transforms)


def test_invert_with_theta_rotates_strip():
    tr = node_transform(node())
    strip = np.column_stack([np.linspace(0, 1, 5), np.linspace(-1, 1, 5), np.zeros(5)])
    param = ParamCloud(strip, np.zeros(5, int), np.arange(5))
    tr.theta = 0.1
    world = invert_param(param, [tr])
    assert np.allclose(world, strip @ rot_x(0.1), atol=1e-12)
    assert np.allclose(world[:, 2], -strip[:, 1] * math.sin(0.1))


def test_no_cross_pairs_gives_zero_rotation():
    poly = FeaturePolyline(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]), np.ones(3, int), np.arange(3),
                           dirs=np.tile([1.0, 0, 0], (3, 1)), normals=np.tile([0.0, 0, 1], (3, 1)),
                           lengths=np.arange(3.0))
    pts = np.array([[0.0, 0.5, 0], [0.0, -0.5, 0]])
    param = ParamCloud(pts, np.zeros(2, int), np.arange(2), np.tile([0.0, 0, 1], (2, 1)))
    res = optimize_rotations(param, [poly], polyline_transforms([poly]), rho=1.0)
    assert np.all(res.dtheta == 0)
