"""Initial data and exact solutions for each target."""
from __future__ import annotations

import numpy as np

from .grid import MapState

# perturbation sizes are normalized on this grid so data do not depend on N
_NORMALIZATION_POINTS = 1024
TORUS_CENTER = np.array([0.5, 0.5])


def _finish(sphere_points, grid, geometry, time=0.0):
    """Turn unit vectors into a MapState of ``geometry`` (sphere or CP^1)."""
    if geometry.key == "sphere2":
        return MapState(sphere_points, grid, geometry, time)
    if geometry.key == "cp1":
        z, chart = geometry.from_sphere(sphere_points)
        return MapState(z, grid, geometry, time, chart)
    raise ValueError(f"no sphere-valued data for target {geometry.key!r}")


def constant(grid, geometry):
    if geometry.key == "torus2":
        return MapState(np.tile(TORUS_CENTER, (grid.n_points, 1)), grid, geometry)
    return _finish(np.tile([0.0, 0.0, 1.0], (grid.n_points, 1)), grid, geometry)


def great_circle(grid, geometry, n=1):
    """Closed geodesic wrapping n times: the equator of S^2, or x -> (n x, 1/2) on the torus."""
    x = grid.nodes
    if geometry.key == "torus2":
        pts = np.stack([np.mod(n * x, 1.0), np.full_like(x, 0.5)], axis=-1)
        return MapState(pts, grid, geometry)
    phi = 2.0 * np.pi * n * x
    pts = np.stack([np.cos(phi), np.sin(phi), np.zeros_like(x)], axis=-1)
    return _finish(pts, grid, geometry)


def spin_wave_frequency(theta, n, target="sphere2"):
    """omega in phi = 2 pi n x - omega t.

    On S^2 (and the isometric CP^1) omega = -(2 pi n)^2 cos(theta); on the
    flat torus the circular plane wave has omega = -(2 pi n)^2.
    """
    k = 2.0 * np.pi * n
    if target == "torus2":
        return -(k**2)
    return -(k**2) * np.cos(theta)


def torus_wave_radius(theta, n):
    """Radius of the circular plane wave used on the torus."""
    return np.sin(theta) / (4.0 * np.pi * n)


def spin_wave_points(x, t, theta, n, target="sphere2"):
    """Exact spin wave at positions ``x`` and time ``t``.

    Sphere: (sin th cos phi, sin th sin phi, cos th). Torus: a circle of
    radius ``torus_wave_radius`` about the cell center.
    """
    x = np.asarray(x, dtype=float)
    phi = 2.0 * np.pi * n * x - spin_wave_frequency(theta, n, target) * t
    if target == "torus2":
        r = torus_wave_radius(theta, n)
        return np.mod(TORUS_CENTER + r * np.stack([np.cos(phi), np.sin(phi)], axis=-1), 1.0)
    s, c = np.sin(theta), np.cos(theta)
    return np.stack([s * np.cos(phi), s * np.sin(phi), np.full_like(phi, c)], axis=-1)


def spin_wave(grid, geometry, theta=np.pi / 4, n=1, t=0.0):
    pts = spin_wave_points(grid.nodes, t, theta, n, geometry.key)
    if geometry.key == "torus2":
        return MapState(pts, grid, geometry, t)
    return _finish(pts, grid, geometry, t)


def exact_spin_wave_state(u, theta, n, t):
    """Analytic spin wave in the representation (and chart) of ``u``."""
    pts = spin_wave_points(u.grid.nodes, t, theta, n, u.geometry.key)
    if u.geometry.key == "cp1":
        pts, _ = u.geometry.from_sphere(pts, chart=u.chart)
    return pts


def _random_field(seed, band, dim, x):
    """Band-limited random field with mode weights 1/k^2, max-normalized on a fixed fine grid."""
    rng = np.random.default_rng(seed)
    coef = rng.standard_normal((band, 2, dim))
    k = np.arange(1, band + 1)

    def evaluate(pts):
        arg = 2.0 * np.pi * np.outer(pts, k)
        return (np.cos(arg) @ (coef[:, 0] / k[:, None] ** 2)
                + np.sin(arg) @ (coef[:, 1] / k[:, None] ** 2))

    fine = evaluate(np.arange(_NORMALIZATION_POINTS) / _NORMALIZATION_POINTS)
    peak = np.max(np.linalg.norm(fine, axis=-1))
    return evaluate(x) / peak


def random_smooth(grid, geometry, seed=1, band=4, amplitude=0.8):
    """Smooth random data: a band-limited perturbation of a constant map.

    On S^2 the perturbation (peak size ``amplitude`` < 1) is added to the
    north pole and the result normalized; on the torus it is scaled by
    1/(2 pi) and added to the cell center.
    """
    if band < 1:
        raise ValueError("band must be >= 1")
    if geometry.key == "torus2":
        pert = _random_field(seed, band, 2, grid.nodes)
        pts = np.mod(TORUS_CENTER + amplitude / (2.0 * np.pi) * pert, 1.0)
        return MapState(pts, grid, geometry)
    if not 0 < amplitude < 1:
        raise ValueError("sphere perturbation amplitude must lie in (0, 1)")
    pts = np.array([0.0, 0.0, 1.0]) + amplitude * _random_field(seed, band, 3, grid.nodes)
    pts /= np.linalg.norm(pts, axis=-1, keepdims=True)
    return _finish(pts, grid, geometry)


def make_initial(kind, grid, geometry, **params):
    """Dispatch on the run-configuration initial-data key."""
    builders = {
        "constant": constant,
        "great_circle": great_circle,
        "spin_wave": spin_wave,
        "random_smooth": random_smooth,
    }
    try:
        build = builders[kind]
    except KeyError:
        raise ValueError(f"unknown initial_data {kind!r}; expected one of {sorted(builders)}") from None
    return build(grid, geometry, **params)


__all__ = [
    "constant", "great_circle", "spin_wave", "spin_wave_points", "spin_wave_frequency",
    "exact_spin_wave_state", "random_smooth", "make_initial",
]
