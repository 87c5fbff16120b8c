import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from ridgeval import synth
from ridgeval.cloud import PointCloud
from ridgeval.errors import InputError, NumericalError
from ridgeval.ridge_detect import detect_features
from ridgeval.ridge_lines import (LEFT, ON_LINE, RIGHT, FeaturePolyline, affiliate, augment_cloud,
                                  build_polylines, extract_polylines, node_attributes)


def line(n, spacing=1.0, offset=(0.0, 0.0, 0.0)):
    return np.column_stack([np.arange(n) * spacing, np.zeros(n), np.zeros(n)]) + offset


def test_empty_features_give_no_polylines():
    assert build_polylines(np.zeros((0, 3)), rho=1.0) == []


def test_collinear_points_single_polyline():
    polys = build_polylines(line(12), rho=1.0)
    assert len(polys) == 1
    assert polys[0].source.tolist() == list(range(12))
    assert not polys[0].closed


def test_shuffled_line_is_ordered_along_the_curve():
    pts = line(12)
    perm = np.random.default_rng(0).permutation(12)
    polys = build_polylines(pts[perm], rho=1.0)
    assert len(polys) == 1
    xs = polys[0].positions[:, 0]
    assert np.all(np.diff(xs) > 0) or np.all(np.diff(xs) < 0)
    assert polys[0].source[0] < polys[0].source[-1]


def test_parallel_lines_split():
    pts = np.vstack([line(15), line(15, offset=(0, 10, 0))])
    polys = build_polylines(pts, rho=1.0)
    assert len(polys) == 2
    assert [p.source[0] for p in polys] == [0, 15]


def test_short_spur_pruned():
    main = line(20) + np.random.default_rng(1).normal(0, 0.05, (20, 3)) * [0, 1, 1]
    spur = np.array([[10.0, 1.0, 0], [10.0, 2.0, 0]])
    polys = build_polylines(np.vstack([main, spur]), rho=1.0)
    assert len(polys) == 1
    assert len(polys[0]) == 20
    assert set(polys[0].source.tolist()) == set(range(20))


def test_tiny_fragments_dropped():
    pts = np.vstack([line(10), line(2, offset=(0, 20, 0))])
    polys = build_polylines(pts, rho=1.0)
    assert len(polys) == 1 and len(polys[0]) == 10


def test_circle_detected_as_closed():
    t = np.linspace(0, 2 * math.pi, 40, endpoint=False)
    pts = np.column_stack([5 * np.cos(t), 5 * np.sin(t), np.zeros_like(t)])
    polys = build_polylines(pts, rho=1.0)
    assert len(polys) == 1 and polys[0].closed and len(polys[0]) == 40


def crest_sheet():
    return synth.height_field(lambda x, y: -x * x, lambda x, y: (-2 * x, 0 * y), -1, 1, 0, 2, 3000)


def test_straight_crest_attributes():
    c = crest_sheet()
    h = 0.1
    pts = np.column_stack([np.zeros(15), 0.3 + h * np.arange(15), np.zeros(15)])
    poly = node_attributes(build_polylines(pts, rho=c.rho)[0], c)
    assert np.allclose(np.abs(poly.dirs), [0, 1, 0], atol=1e-12)
    assert np.allclose(poly.normals, [0, 0, 1], atol=1e-9)
    assert np.allclose(poly.lengths, h * np.arange(15), atol=1e-12)
    assert poly.lengths[0] == 0
    assert np.all(np.diff(poly.lengths) > 0)
    nodes = poly.nodes
    assert nodes[3].l == pytest.approx(0.3) and abs(np.linalg.norm(nodes[3].dir) - 1) < 1e-12


def test_interior_dir_is_central_difference():
    c = crest_sheet()
    pts = np.column_stack([0.05 * np.sin(np.arange(12)), 0.3 + 0.1 * np.arange(12), np.zeros(12)])
    poly = node_attributes(build_polylines(pts, rho=c.rho)[0], c)
    v = poly.positions
    expect = (v[2:] - v[:-2]) / np.linalg.norm(v[2:] - v[:-2], axis=1)[:, None]
    assert np.allclose(poly.dirs[1:-1], expect)


def test_torus_crest_tangent():
    torus = synth.torus(R=3.0, r=1.0, n_major=300, n_minor=100)
    t = np.linspace(0, 2 * math.pi, 120, endpoint=False)
    pts = np.column_stack([4 * np.cos(t), 4 * np.sin(t), np.zeros_like(t)])
    polys = build_polylines(pts, rho=torus.rho * 5)
    assert len(polys) == 1 and polys[0].closed
    poly = node_attributes(polys[0], torus, radius=3 * torus.rho)
    tangent = np.column_stack([-np.sin(t), np.cos(t), np.zeros_like(t)])[poly.source]
    ang = np.degrees(np.arccos(np.clip(np.abs(np.sum(poly.dirs * tangent, axis=1)), 0, 1)))
    assert ang.max() < 5


def test_node_without_nearby_points_errors():
    c = crest_sheet()
    pts = np.column_stack([np.zeros(5), 10 + 0.1 * np.arange(5), np.zeros(5)])
    with pytest.raises(NumericalError, match="node 0"):
        node_attributes(build_polylines(pts, rho=c.rho)[0], c)


@pytest.fixture(scope="module")
def sheet():
    c = synth.sine_sheet(8000)
    feats = detect_features(c)
    return c, feats, extract_polylines(feats, c)


def test_sheet_polylines_are_the_feature_lines(sheet):
    c, feats, polys = sheet
    assert len(polys) == 2
    for p, x0 in zip(sorted(polys, key=lambda p: p.positions[0, 0]), (math.pi / 2, 3 * math.pi / 2)):
        assert np.all(np.abs(p.positions[:, 0] - x0) < c.rho)
        assert np.all(np.linalg.norm(np.diff(p.positions, axis=0), axis=1) <= 3 * c.rho)


def test_nodes_are_feature_positions(sheet):
    _, feats, polys = sheet
    for p in polys:
        assert np.array_equal(p.positions, feats.positions[p.source])


def test_augment_counts_and_order(sheet):
    c, feats, polys = sheet
    empty = augment_cloud(c, np.zeros((0, 3)))
    assert np.array_equal(empty.points, c.points) and not empty.feature_mask.any()
    aug = augment_cloud(c, polys)
    m = sum(len(p) for p in polys)
    assert len(aug) == len(c) + m
    assert np.array_equal(aug.points[:len(c)], c.points)
    assert aug.feature_mask[len(c):].all() and not aug.feature_mask[:len(c)].any()
    assert np.allclose(aug.normals[len(c):], np.concatenate([p.normals for p in polys]))
    assert aug.rho == c.rho


def test_augment_feature_set_takes_nearest_normal(sheet):
    c, feats, _ = sheet
    aug = augment_cloud(c, feats)
    assert len(aug) == len(c) + len(feats)
    j = np.argmin(np.linalg.norm(c.points[None] - feats.positions[:5, None], axis=2), axis=1)
    assert np.allclose(aug.normals[len(c):len(c) + 5], c.normals[j])


def test_augment_idempotent(sheet):
    c, _, polys = sheet
    once = augment_cloud(c, polys)
    twice = augment_cloud(once, polys)
    assert len(twice) == len(once)


def test_side_labels_by_construction():
    c = crest_sheet()
    pts = np.column_stack([np.zeros(15), 0.3 + 0.1 * np.arange(15), np.zeros(15)])
    poly = node_attributes(build_polylines(pts, rho=c.rho)[0], c)
    v, b = poly.positions[7], np.cross(poly.dirs[7], poly.normals[7])
    probe = PointCloud(np.array([v + 2 * c.rho * b, v - 2 * c.rho * b, v]))
    aff = affiliate(probe, [poly], rho=c.rho)
    assert aff.side.tolist() == [RIGHT, LEFT, ON_LINE]
    assert aff.node_of.tolist() == [7, 7, 7]


def test_affiliation_nearest_node_and_ties():
    poly = FeaturePolyline(line(3), np.zeros(3, int), np.arange(3), dirs=np.tile([1.0, 0, 0], (3, 1)),
                           normals=np.tile([0.0, 0, 1], (3, 1)), lengths=np.arange(3.0))
    cloud = PointCloud(np.array([[0.5, 1, 0], [1.6, 0, 0], [1.5, 0, 0]]))
    aff = affiliate(cloud, [poly], rho=1.0)
    assert aff.node_of.tolist() == [0, 2, 1]
    assert aff.dist[0] == pytest.approx(math.hypot(0.5, 1))


def test_sheet_sides_balanced(sheet):
    c, _, polys = sheet
    aug = augment_cloud(c, polys)
    aff = affiliate(aug, polys)
    band = aff.dist <= 5 * c.rho
    for k in range(len(polys)):
        sel = band & (aff.polyline_of == k)
        left, right = np.sum(aff.side[sel] == LEFT), np.sum(aff.side[sel] == RIGHT)
        assert abs(left - right) <= 0.1 * (left + right)


def test_affiliation_rigid_covariance(sheet):
    c, _, polys = sheet
    aug = augment_cloud(c, polys)
    aff = affiliate(aug, polys)
    rot = Rotation.from_euler("xyz", [0.2, 1.3, -0.4]).as_matrix()
    t = np.array([5.0, 1, -2])
    moved = aug.transformed(rot, t)
    aff2 = affiliate(moved, [p.transformed(rot, t) for p in polys], rho=c.rho)
    assert np.array_equal(aff.node_of, aff2.node_of)
    assert np.array_equal(aff.side, aff2.side)


def test_affiliation_requires_attributes():
    with pytest.raises(InputError):
        affiliate(PointCloud(line(3)), build_polylines(line(5), rho=1.0))
