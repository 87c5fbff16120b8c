"""Synthetic test surfaces.

Height fields are sampled on a regular (optionally jittered) xy lattice.
``sigma`` is expressed in multiples of the clean cloud's sampling density and
adds isotropic Gaussian noise to the positions.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .cloud import PointCloud, estimate_density


def _lattice(x0, x1, y0, y1, n, jitter, rng, aspect_x: float = 1.0):
    """Regular xy lattice over the rectangle with about ``n`` points.

    ``aspect_x`` shrinks the x spacing relative to y (used for slanted surfaces).
    """
    w, h = x1 - x0, y1 - y0
    step = math.sqrt(w * h / (n * aspect_x))
    nx = max(2, int(round(w / (step * aspect_x))) + 1)
    ny = max(2, int(round(h / step)) + 1)
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    X = X.ravel()
    Y = Y.ravel()
    if jitter:
        dx = xs[1] - xs[0]
        dy = ys[1] - ys[0]
        X = X + rng.uniform(-jitter, jitter, X.shape) * dx
        Y = Y + rng.uniform(-jitter, jitter, Y.shape) * dy
    return X, Y


def height_field(fn: Callable, grad: Callable, x0, x1, y0, y1, n, *, sigma=0.0, seed=0,
                 jitter=0.0, normals=True, aspect_x=1.0) -> PointCloud:
    rng = np.random.default_rng(seed)
    X, Y = _lattice(x0, x1, y0, y1, n, jitter, rng, aspect_x)
    pts = np.column_stack([X, Y, fn(X, Y)])
    nrm = None
    if normals:
        gx, gy = grad(X, Y)
        nrm = np.column_stack([-gx, -gy, np.ones_like(X)])
        nrm /= np.linalg.norm(nrm, axis=1)[:, None]
    if sigma:
        rho = estimate_density(PointCloud(pts))
        pts = pts + rng.normal(0.0, sigma * rho, pts.shape)
    return PointCloud(pts, nrm)


def sine_sheet(n=20000, **kw) -> PointCloud:
    """``z = 2 sin(x) (1 + y/10)`` on [0, 2pi] x [0, pi]; ridge at pi/2, valley at 3pi/2."""
    return height_field(
        lambda x, y: 2 * np.sin(x) * (1 + y / 10),
        lambda x, y: (2 * np.cos(x) * (1 + y / 10), 0.2 * np.sin(x)),
        0.0, 2 * np.pi, 0.0, np.pi, n, **kw)


# window around the ridge-type curvature extremum at x ~ 55.6 (apex of z at x ~ 61.7)
SQRT_CREST_X = (48.0, 64.0)


def sqrt_crest(n=8000, x_range=SQRT_CREST_X, y_range=(0.0, 7.0), **kw) -> PointCloud:
    """Asymmetric surface ``z = sin(sqrt(x))``."""
    def grad(x, y):
        s = np.sqrt(x)
        return np.cos(s) / (2 * s), np.zeros_like(y)
    return height_field(lambda x, y: np.sin(np.sqrt(x)), grad, *x_range, *y_range, n, **kw)


def rounded_tent(x, blend):
    """Profile of ``z = -|x|`` with the apex replaced by a circular fillet.

    Returns (z, dz/dx).
    """
    x = np.asarray(x, dtype=float)
    z = -np.abs(x)
    dz = -np.sign(x)
    if blend > 0:
        t = blend / math.sqrt(2.0)
        inside = np.abs(x) < t
        zc = -blend * math.sqrt(2.0)
        xi = x[inside]
        root = np.sqrt(blend * blend - xi * xi)
        z[inside] = zc + root
        dz[inside] = -xi / root
    return z, dz


def dihedral(n=None, blend_mult=2.0, half_width=12.0, length=24.0, **kw) -> tuple[PointCloud, float]:
    """Right-angle dihedral ``z = -|x|`` along y, apex rounded with radius ``blend_mult * h``.

    Lengths are in units of the nominal 3D spacing h = 1.  The edge line is
    x = 0, z = 0.

    Returns:
        cloud and the blend radius used.
    """
    blend = blend_mult * 1.0
    w = half_width
    # x spacing shrinks by 1/sqrt(2) so the 3D spacing on the slopes is about 1
    area = 2 * w * length
    n_eff = area / (1.0 / math.sqrt(2.0))
    n = int(n) if n else int(n_eff)
    cloud = height_field(
        lambda x, y: rounded_tent(x, blend)[0],
        lambda x, y: (rounded_tent(x, blend)[1], np.zeros_like(y)),
        -w, w, 0.0, length, n, aspect_x=1 / math.sqrt(2.0), **kw)
    return cloud, blend


def plane(n=2500, size=1.0, **kw) -> PointCloud:
    return height_field(lambda x, y: np.zeros_like(x), lambda x, y: (np.zeros_like(x), np.zeros_like(y)),
                        0.0, size, 0.0, size, n, **kw)


def sphere(n=20000, radius=1.0) -> PointCloud:
    """Fibonacci sampling of a sphere with outward normals."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    d = np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])
    return PointCloud(radius * d, d)


def cylinder(radius=1.0, length=2.0, spacing=None, n_around=314) -> PointCloud:
    """Cylinder with axis y, outward normals."""
    spacing = spacing or 2 * np.pi * radius / n_around
    ang = np.arange(n_around) * 2 * np.pi / n_around
    ys = np.arange(0.0, length + 1e-12, spacing)
    A, Y = np.meshgrid(ang, ys)
    A = A.ravel()
    Y = Y.ravel()
    d = np.column_stack([np.cos(A), np.zeros_like(A), np.sin(A)])
    pts = radius * d + np.column_stack([np.zeros_like(Y), Y, np.zeros_like(Y)])
    return PointCloud(pts, d)


def torus(R=3.0, r=1.0, n_major=300, n_minor=100) -> PointCloud:
    """Torus around z with outward normals."""
    u = np.arange(n_major) * 2 * np.pi / n_major
    v = np.arange(n_minor) * 2 * np.pi / n_minor
    U, V = np.meshgrid(u, v)
    U = U.ravel()
    V = V.ravel()
    d = np.column_stack([np.cos(V) * np.cos(U), np.cos(V) * np.sin(U), np.sin(V)])
    centre = np.column_stack([R * np.cos(U), R * np.sin(U), np.zeros_like(U)])
    return PointCloud(centre + r * d, d)


GENERATORS = {
    "sine-sheet": sine_sheet,
    "sqrt-crest": sqrt_crest,
    "dihedral": lambda **kw: dihedral(**kw)[0],
    "plane": plane,
}
