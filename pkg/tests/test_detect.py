import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ridgeval import synth
from ridgeval.cloud import PointCloud
from ridgeval.curvature import curvature_field
from ridgeval.errors import InputError, NumericalError
from ridgeval.ridge_detect import (CurvatureQuadric, detect_features, epd, filter_neighbors,
                                   fit_curvature_quadric, merge_features, project_feature,
                                   threshold_candidates)


def samples(fn, n=30, seed=0):
    xy = np.random.default_rng(seed).uniform(-1, 1, (n, 2))
    return xy, fn(xy[:, 0], xy[:, 1])


def test_fit_exact_generating_quadric():
    xy, c = samples(lambda x, y: 2 * x * x + 3 * y * y + x * y + 4 * x + 5 * y + 6)
    assert np.allclose(fit_curvature_quadric(xy, c).b, [2, 3, 1, 4, 5, 6], atol=1e-9)


def test_fit_constant():
    xy, c = samples(lambda x, y: np.full_like(x, 7.0))
    assert np.allclose(fit_curvature_quadric(xy, c).b, [0, 0, 0, 0, 0, 7], atol=1e-12)


def test_fit_matches_dense_oracle():
    xy, c = samples(lambda x, y: -(x - 0.3) ** 2)
    q = fit_curvature_quadric(xy, c)
    assert np.allclose(q.b[[0, 3, 5]], [-1, 0.6, -0.09], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(6, 60))
def test_fit_residual_minimal(seed, n):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-2, 2, (n, 2))
    c = rng.normal(size=n)
    x, y = xy.T
    A = np.column_stack([x * x, y * y, x * y, x, y, np.ones(n)])
    if np.linalg.matrix_rank(A) < 6:
        return
    oracle = np.linalg.lstsq(A, c, rcond=None)[0]
    q = fit_curvature_quadric(xy, c)
    r_fit = np.sum((A @ q.b - c) ** 2)
    r_oracle = np.sum((A @ oracle - c) ** 2)
    assert r_fit <= r_oracle * (1 + 1e-9) + 1e-12


def test_fit_rank_deficient():
    xy = np.column_stack([np.linspace(-1, 1, 10), np.zeros(10)])
    with pytest.raises(NumericalError):
        fit_curvature_quadric(xy, xy[:, 0] ** 2)
    with pytest.raises(NumericalError):
        fit_curvature_quadric(xy[:5], xy[:5, 0])


def test_epd_examples():
    r = epd(CurvatureQuadric(np.array([-1.0, 0, 0, 0.6, 0, -0.09])), 1.0)
    assert r.x_max == pytest.approx(0.3) and r.is_feature
    r = epd(CurvatureQuadric(np.array([1.0, 0, 0, 0, 0, 0])), 1.0)
    assert r.x_max == 0 and r.d == 0 and r.is_feature
    r = epd(CurvatureQuadric(np.array([-1.0, 0, 0, 4, 0, 0])), 1.0)
    assert r.x_max == pytest.approx(2) and not r.is_feature


def test_epd_boundary_is_not_feature():
    r = epd(CurvatureQuadric(np.array([-1.0, 0, 0, 2, 0, 0])), 1.0)
    assert r.d == 1.0 and not r.is_feature


def test_epd_degenerate_parabola():
    r = epd(CurvatureQuadric(np.array([1e-15, 0, 0, 1, 0, 0])), 1.0)
    assert r.d == math.inf and not r.is_feature


def test_epd_rejects_minimum_of_magnitude():
    # positive curvature with an upward parabola: the vertex minimises |c|
    q = CurvatureQuadric(np.array([1.0, 0, 0, 0.2, 0, 1.0]))
    assert epd(q, 1.0, convexity=1).d == math.inf
    assert epd(q, 1.0, convexity=-1).is_feature


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3), st.floats(-10, 10), st.floats(-10, 10))
def test_vertex_is_stationary(b0, b3, b5):
    q = CurvatureQuadric(np.array([b0, 0, 0, b3, 0, b5]))
    x = epd(q, 1.0).x_max
    assert abs(2 * b0 * x + b3) <= 1e-9 * max(1.0, abs(b3))


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3), st.floats(-5, 5), st.floats(1e-3, 1e3))
def test_epd_scale_independent(b0, b3, s):
    # scaling lengths by s: c scales 1/s and x by s, so b0 -> b0/s^3, b3 -> b3/s^2
    base = epd(CurvatureQuadric(np.array([b0, 0, 0, b3, 0, 1.0])), 1.0)
    scaled = epd(CurvatureQuadric(np.array([b0 / s ** 3, 0, 0, b3 / s ** 2, 0, 1.0 / s])), s)
    assert base.is_feature == scaled.is_feature


def two_ridges():
    # unit lattice, ridges at x = +-2 (4 spacings apart) with a valley between
    g = lambda x: 0.5 * np.exp(-(x - 2) ** 2) + 0.5 * np.exp(-(x + 2) ** 2)
    dg = lambda x: -(x - 2) * np.exp(-(x - 2) ** 2) - (x + 2) * np.exp(-(x + 2) ** 2)
    return synth.height_field(lambda x, y: g(x), lambda x, y: (dg(x), 0 * y), -8, 8, 0, 16, 17 * 17)


def test_filter_removes_far_ridge():
    c = two_ridges()
    f = curvature_field(c)
    idx = int(np.argmin(np.hypot(c.points[:, 0] - 2, c.points[:, 1] - 8)))
    radius = 6 * c.rho
    full = c.index.radius(c.points[idx], radius)
    assert np.any(c.points[full, 0] < -1.5)
    kept = filter_neighbors(c, f, idx, radius)
    assert idx in kept
    assert np.all(c.points[kept, 0] > 0)


def test_filter_identity_on_single_ridge():
    c = synth.height_field(lambda x, y: -x * x, lambda x, y: (-2 * x, 0 * y), -0.5, 0.5, 0, 1, 900)
    f = curvature_field(c)
    idx = int(np.argmin(np.hypot(c.points[:, 0], c.points[:, 1] - 0.5)))
    full = c.index.radius(c.points[idx], 3 * c.rho)
    assert filter_neighbors(c, f, idx, 3 * c.rho).tolist() == full.tolist()


def test_filter_drops_opposite_sign():
    c = synth.height_field(lambda x, y: np.sin(x), lambda x, y: (np.cos(x), 0 * y), 0, 2 * math.pi, 0, 1, 3000)
    f = curvature_field(c)
    idx = int(np.argmin(np.hypot(c.points[:, 0] - math.pi, c.points[:, 1] - 0.5)))
    kept = filter_neighbors(c, f, idx, 6 * c.rho)
    assert np.all(np.sign(f.values[kept]) == np.sign(f.values[idx]))


def test_project_onto_crest():
    c = synth.height_field(lambda x, y: -x * x, lambda x, y: (-2 * x, 0 * y), -1, 1, 0, 1, 2000)
    f = curvature_field(c)
    feats = detect_features(c, field=f)
    rho = c.rho
    near = np.flatnonzero(feats.classified & (np.abs(c.points[:, 0]) > 0.2 * rho))
    assert len(near) > 0
    assert np.max(np.abs(feats.raw_positions[near, 0])) < 0.1 * rho
    i = int(near[0])
    at_zero = project_feature(c, f, i, 0.0)
    assert np.allclose(at_zero, c.points[i], atol=1e-9)


def test_plane_has_no_features():
    c = synth.plane(900)
    feats = detect_features(c)
    assert len(feats) == 0 and np.all(np.isinf(feats.epd_heatmap))


def test_needs_normals():
    with pytest.raises(InputError):
        detect_features(PointCloud(np.random.default_rng(0).random((30, 3))))


@pytest.fixture(scope="module")
def sheet():
    c = synth.sine_sheet(8000)
    f = curvature_field(c)
    return c, f, detect_features(c, field=f)


def test_sine_sheet_features_on_lines(sheet):
    c, _, feats = sheet
    x = feats.positions[:, 0]
    d = np.minimum(np.abs(x - math.pi / 2), np.abs(x - 3 * math.pi / 2))
    assert np.all(d < c.rho / 4)
    assert set(np.unique(feats.convexities)) == {-1, 1}
    # ridge at pi/2 is convex (negative mean curvature with upward normals)
    assert np.all(feats.convexities[x < math.pi] == -1)


def test_feature_set_invariants(sheet):
    c, _, feats = sheet
    rho = c.rho
    assert np.all(feats.classified == (feats.epd_heatmap < rho))
    assert np.all(np.isnan(feats.raw_positions[~feats.classified]))
    src = feats.raw_positions[feats.source_indices]
    assert np.all(np.linalg.norm(feats.positions - src, axis=1) <= rho)
    P = feats.positions
    d = np.linalg.norm(P[:, None] - P[None], axis=2)
    np.fill_diagonal(d, np.inf)
    assert d.min() >= rho / 2


def test_epd_subset_of_threshold(sheet):
    c, f, feats = sheet
    cls = np.flatnonzero(feats.classified)
    level = np.abs(f.values[cls]).min()
    cand = threshold_candidates(f, level)
    assert set(cls) <= set(cand) and len(cls) < len(cand)


def test_deterministic(sheet):
    c, f, feats = sheet
    again = detect_features(c, field=f)
    assert np.array_equal(again.positions, feats.positions)
    assert np.array_equal(again.epd_heatmap, feats.epd_heatmap)


def test_deflection_agreement(sheet):
    c, f, feats = sheet
    angles = np.random.default_rng(5).uniform(-math.pi / 6, math.pi / 6, len(c))
    defl = detect_features(c, field=f, deflection=angles)
    assert np.mean(defl.classified == feats.classified) >= 0.95


def test_merge_repeats_until_separated():
    # first pass merges 0 and 0.45 into 0.225, which is then within rho/2 of 0.7
    raw = np.array([[0.0, 0, 0], [0.45, 0, 0], [0.7, 0, 0], [5, 0, 0]])
    pos, src, conv = merge_features(raw, np.ones(4, bool), np.array([1, 1, -1, -1]), 1.0)
    assert len(pos) == 2 and src.tolist() == [0, 3]
    assert pos[0, 0] == pytest.approx((2 * 0.225 + 0.7) / 3)
    assert conv.tolist() == [1, -1]
