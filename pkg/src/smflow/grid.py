"""Periodic discrete calculus on the circle and maps into a target.

Scalar fields are arrays whose last axis runs over grid nodes; vector
fields along a map are arrays of shape ``(..., n_points, dim)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import TargetGeometry, _dot


@dataclass(frozen=True)
class PeriodicGrid:
    """Equispaced nodes ``origin + j * length / n_points`` on a periodic cell.

    ``derivative`` selects Fourier differentiation (default) or the
    4th-order centered finite-difference fallback ("fd4").
    """

    n_points: int
    derivative: str = "spectral"
    length: float = 1.0
    origin: float = 0.0

    def __post_init__(self):
        if self.n_points < 8 or self.n_points % 2:
            raise ValueError(f"n_points must be an even integer >= 8, got {self.n_points}")
        if self.derivative not in ("spectral", "fd4"):
            raise ValueError(f"unknown derivative scheme {self.derivative!r}")
        if not self.length > 0:
            raise ValueError("length must be positive")

    @property
    def spacing(self):
        return self.length / self.n_points

    @cached_property
    def nodes(self):
        return self.origin + self.length * np.arange(self.n_points) / self.n_points

    @cached_property
    def wavenumbers(self):
        """rfft angular wavenumbers with the Nyquist entry zeroed."""
        k = 2.0 * np.pi * np.fft.rfftfreq(self.n_points, d=self.spacing)
        k[-1] = 0.0
        k.flags.writeable = False
        return k

    @cached_property
    def second_derivative_matrix(self):
        """Dense matrix of ``second_derivative`` (used by implicit solvers)."""
        d2 = second_derivative(np.eye(self.n_points), self, axis=0)
        d2.flags.writeable = False
        return d2


def _moveaxis_k(k, ndim, axis):
    shape = [1] * ndim
    shape[axis] = k.size
    return k.reshape(shape)


def spectral_derivative(f, grid, axis=-1):
    """Fourier derivative along ``axis``; the Nyquist mode is dropped."""
    f = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f)):
        raise FloatingPointError("spectral_derivative: non-finite input")
    axis = axis % f.ndim
    fh = np.fft.rfft(f, axis=axis)
    fh *= 1j * _moveaxis_k(grid.wavenumbers, f.ndim, axis)
    return np.fft.irfft(fh, n=grid.n_points, axis=axis)


def fd4_derivative(f, grid, axis=-1):
    f = np.asarray(f, dtype=float)
    r = lambda s: np.roll(f, s, axis=axis)
    return (-r(-2) + 8.0 * r(-1) - 8.0 * r(1) + r(2)) / (12.0 * grid.spacing)


def derivative(f, grid, axis=-1):
    if grid.derivative == "fd4":
        return fd4_derivative(f, grid, axis)
    return spectral_derivative(f, grid, axis)


def second_derivative(f, grid, axis=-1):
    """d^2/dx^2 with its own symbol: -k^2 spectrally (Nyquist mode kept) or
    the 5-point 4th-order stencil for "fd4".

    Unlike applying ``derivative`` twice, the symbol is strictly negative
    on every nonconstant mode. The time steppers rely on this: a zero
    symbol at the Nyquist mode has the wrong sign relative to its
    neighbours and seeds a fast instability about curved solutions.
    """
    f = np.asarray(f, dtype=float)
    axis = axis % f.ndim
    if grid.derivative == "fd4":
        r = lambda s: np.roll(f, s, axis=axis)
        return (-r(-2) + 16.0 * r(-1) - 30.0 * f + 16.0 * r(1) - r(2)) / (12.0 * grid.spacing**2)
    k = 2.0 * np.pi * np.fft.rfftfreq(grid.n_points, d=grid.spacing)
    fh = np.fft.rfft(f, axis=axis)
    fh *= -_moveaxis_k(k**2, f.ndim, axis)
    return np.fft.irfft(fh, n=grid.n_points, axis=axis)


def lowpass(f, grid, fraction=2.0 / 3.0, axis=-1):
    """Zero all Fourier modes above ``fraction * n_points / 2``."""
    f = np.asarray(f, dtype=float)
    axis = axis % f.ndim
    fh = np.fft.rfft(f, axis=axis)
    cut = int(fraction * grid.n_points / 2)
    idx = [slice(None)] * f.ndim
    idx[axis] = slice(cut + 1, None)
    fh[tuple(idx)] = 0.0
    return np.fft.irfft(fh, n=grid.n_points, axis=axis)


def integrate_periodic(f, grid, axis=-1):
    """Rectangle rule over one period (spectrally accurate for smooth f)."""
    return np.mean(np.asarray(f, dtype=float), axis=axis) * grid.length


def antiderivative(f, grid):
    """Zero-mean periodic antiderivative of ``f - mean(f)`` along the last axis."""
    f = np.asarray(f, dtype=float)
    fh = np.fft.rfft(f, axis=-1)
    k = grid.wavenumbers.copy()
    k[0] = k[-1] = 1.0
    fh = fh / (1j * k)
    fh[..., 0] = 0.0
    fh[..., -1] = 0.0
    return np.fft.irfft(fh, n=grid.n_points, axis=-1)


def double_integral_kernel(f, grid):
    """K(x) = int_0^1 dy int_y^x f(z) dz on the unit circle.

    Equals F(x) - int_0^1 F for an antiderivative F; for ``f = c + g`` with
    mean-zero ``g`` this is ``c (x - 1/2) + P(x)`` with P the zero-mean
    periodic antiderivative of g.
    """
    if grid.length != 1.0 or grid.origin != 0.0:
        raise ValueError("double_integral_kernel is defined on the unit circle [0, 1)")
    f = np.asarray(f, dtype=float)
    mean = integrate_periodic(f, grid)
    return np.asarray(mean)[..., None] * (grid.nodes - 0.5) + antiderivative(f, grid)


def cumulative_integral(f, grid):
    """C(x) = int_{origin}^x f for data that decays at both ends of the cell."""
    f = np.asarray(f, dtype=float)
    mean = np.mean(f, axis=-1)
    P = antiderivative(f, grid)
    return mean[..., None] * (grid.nodes - grid.origin) + P - P[..., :1]


# ---------------------------------------------------------------------------
# maps into the target


@dataclass(frozen=True, eq=False)
class MapState:
    """Discrete map u: S^1 -> N at one time.

    ``chart`` is the stereographic chart of the whole loop (CP^1 only).
    """

    points: np.ndarray
    grid: PeriodicGrid
    geometry: TargetGeometry
    time: float = 0.0
    chart: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.shape != (self.grid.n_points, self.geometry.dim):
            raise ValueError(
                f"points must have shape {(self.grid.n_points, self.geometry.dim)}, got {pts.shape}"
            )
        if not np.all(np.isfinite(pts)):
            raise FloatingPointError("MapState: non-finite points")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        self.geometry.check_points(pts, self.chart)

    def replace(self, points, time=None, chart=None):
        return MapState(
            points,
            self.grid,
            self.geometry,
            self.time if time is None else time,
            self.chart if chart is None else chart,
        )


def dx_points(points, grid, geometry):
    """Raw derivative of a loop of points (before tangent projection)."""
    lifted, winding = geometry.lift(points)
    if not np.any(winding):
        return derivative(lifted, grid, axis=-2)
    periodic = lifted - grid.nodes[:, None] * winding[..., None, :]
    return derivative(periodic, grid, axis=-2) + winding[..., None, :]


def dxx_points(points, grid, geometry):
    """Raw second derivative of a loop of points (the linear winding drops out)."""
    lifted, winding = geometry.lift(points)
    if np.any(winding):
        lifted = lifted - grid.nodes[:, None] * winding[..., None, :]
    return second_derivative(lifted, grid, axis=-2)


def partial_x_points(points, grid, geometry):
    raw = dx_points(points, grid, geometry)
    if geometry.representation == "embedded":
        return raw - _dot(raw, points)[..., None] * points
    return raw


def covariant_points(points, ux, V, grid, geometry):
    """nabla_x V = d/dx V + Gamma(u_x, V), tangent-projected when embedded."""
    out = derivative(V, grid, axis=-2) + geometry._gamma(points, ux, V)
    if geometry.representation == "embedded":
        out = out - _dot(out, points)[..., None] * points
    return out


def _check_chart(u):
    u.geometry.check_points(u.points, u.chart)


def partial_x_map(u):
    """d/dx u as a tangent field along ``u``."""
    if "ux" not in u._cache:
        _check_chart(u)
        u._cache["ux"] = partial_x_points(u.points, u.grid, u.geometry)
    return u._cache["ux"]


def projection_residual(u):
    """Largest normal component discarded when projecting d/dx u (embedded only)."""
    if u.geometry.representation != "embedded":
        return 0.0
    raw = dx_points(u.points, u.grid, u.geometry)
    return float(np.max(np.abs(_dot(raw, u.points))))


def covariant_x(u, V):
    _check_chart(u)
    V = np.asarray(V, dtype=float)
    if V.shape != u.points.shape:
        raise ValueError("tangent field shape does not match the map")
    return covariant_points(u.points, partial_x_map(u), V, u.grid, u.geometry)


def tension(u):
    """Tension field tau(u) = nabla_x d/dx u."""
    if "tau" not in u._cache:
        u._cache["tau"] = covariant_x(u, partial_x_map(u))
    return u._cache["tau"]
