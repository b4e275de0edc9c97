"""Pointwise Kähler geometry of the three shipped target manifolds.

Every operation is vectorized: points and tangent vectors are arrays whose
last axis holds the components (3 ambient components for the embedded
sphere, 2 chart components otherwise) and whose leading axes broadcast.
"""
from __future__ import annotations

import numpy as np

TANGENCY_TOL = 1e-8


class ContractViolation(ValueError):
    """An input does not satisfy an operation's precondition."""


class DegenerateInputError(ValueError):
    """A point cannot be projected onto the target (e.g. zero vector)."""


class RechartRequired(RuntimeError):
    """A chart-represented state left the validity disc of its chart."""


def _dot(X, Y):
    return np.einsum("...i,...i->...", X, Y)


class TargetGeometry:
    """Base class: metric, complex structure J, connection and curvature.

    Subclasses provide the closed forms; the quartic invariant is built
    generically from ``curvature_op`` and ``apply_J``.
    """

    key: str = ""
    representation: str = ""
    dim: int = 0
    # zero curvature derivatives: every shipped target is locally symmetric
    locally_symmetric: bool = True

    def _check(self, p, *vectors):
        p = np.asarray(p, dtype=float)
        if p.shape[-1:] != (self.dim,):
            raise ContractViolation(
                f"{self.key}: point has {p.shape[-1:]} components, expected {self.dim}"
            )
        out = [p]
        for v in vectors:
            v = np.asarray(v, dtype=float)
            if v.shape[-1:] != (self.dim,):
                raise ContractViolation(
                    f"{self.key}: vector has {v.shape[-1:]} components, expected {self.dim}"
                )
            out.append(v)
        return out

    # metric ------------------------------------------------------------
    def metric_factor(self, p):
        """Conformal factor of the metric relative to the Euclidean one."""
        return np.ones(np.shape(p)[:-1])

    def inner(self, p, X, Y):
        p, X, Y = self._check(p, X, Y)
        return self._inner(p, X, Y)

    def _inner(self, p, X, Y):
        return self.metric_factor(p) * _dot(X, Y)

    def norm(self, p, X):
        return np.sqrt(self._inner(p, X, X))

    # complex structure --------------------------------------------------
    def apply_J(self, p, X):
        p, X = self._check(p, X)
        return self._J(p, X)

    def _J(self, p, X):
        out = np.empty(np.broadcast_shapes(np.shape(p), np.shape(X)))
        out[..., 0] = -X[..., 1]
        out[..., 1] = X[..., 0]
        return out

    # connection and curvature ------------------------------------------
    def connection_correction(self, p, V, W):
        p, V, W = self._check(p, V, W)
        return self._gamma(p, V, W)

    def _gamma(self, p, V, W):
        raise NotImplementedError

    def curvature_op(self, p, X, Y, Z):
        p, X, Y, Z = self._check(p, X, Y, Z)
        return self._curvature(p, X, Y, Z)

    def _curvature(self, p, X, Y, Z):
        raise NotImplementedError

    def curvature_quartic(self, p, X):
        """<R(X, JX)X, JX>; quartic in X."""
        p, X = self._check(p, X)
        return self._quartic(p, X)

    def _quartic(self, p, X):
        JX = self._J(p, X)
        return self._inner(p, self._curvature(p, X, JX, X), JX)

    # projections and lifts ----------------------------------------------
    def project_point(self, p):
        (p,) = self._check(p)
        return p.copy()

    def project_tangent(self, p, v):
        p, v = self._check(p, v)
        return np.broadcast_to(v, np.broadcast_shapes(p.shape, v.shape)).copy()

    def lift(self, points):
        """Continuous lift of a closed loop of points along axis -2.

        Returns ``(lifted, winding)`` such that ``lifted`` is continuous and
        ``lifted(x + 1) = lifted(x) + winding``.
        """
        return points, np.zeros(np.shape(points)[:-2] + (self.dim,))

    def reduce(self, points, chart=0):
        """Canonical representative of a state after an accepted step."""
        return points, chart

    def check_points(self, points, chart=0):
        """Raise if a state's points violate the point invariant."""

    def to_sphere(self, points, chart=0):
        raise NotImplementedError(f"{self.key} has no embedding into S^2")


class Sphere2(TargetGeometry):
    """Unit sphere in R^3, J_p V = p x V, sectional curvature +1."""

    key = "sphere2"
    representation = "embedded"
    dim = 3

    def _inner(self, p, X, Y):
        return _dot(X, Y)

    def apply_J(self, p, X):
        p, X = self._check(p, X)
        scale = np.maximum(1.0, np.linalg.norm(X, axis=-1))
        if np.any(np.abs(_dot(p, X)) > TANGENCY_TOL * scale):
            raise ContractViolation("sphere2: vector is not tangent at p")
        return self._J(p, X)

    def _J(self, p, X):
        return np.cross(p, X)

    def _gamma(self, p, V, W):
        # second fundamental form term: d/dx V = nabla_x V - <u_x, V> u
        return _dot(V, W)[..., None] * p

    def _curvature(self, p, X, Y, Z):
        return _dot(Y, Z)[..., None] * X - _dot(X, Z)[..., None] * Y

    def project_point(self, p):
        (p,) = self._check(p)
        r = np.linalg.norm(p, axis=-1, keepdims=True)
        if np.any(r < 1e-12):
            raise DegenerateInputError("sphere2: cannot project the zero vector")
        return p / r

    def project_tangent(self, p, v):
        p, v = self._check(p, v)
        p = self.project_point(p)
        return v - _dot(v, p)[..., None] * p

    def check_points(self, points, chart=0):
        err = np.max(np.abs(np.linalg.norm(points, axis=-1) - 1.0), initial=0.0)
        if err > 1e-10:
            raise ContractViolation(f"sphere2: |u| deviates from 1 by {err:.3e}")

    def to_sphere(self, points, chart=0):
        return np.asarray(points, dtype=float)


class FlatTorus2(TargetGeometry):
    """R^2 / Z^2 with the identity metric and J = rotation by +90 degrees."""

    key = "torus2"
    representation = "chart"
    dim = 2

    def _inner(self, p, X, Y):
        return _dot(X, Y)

    def _gamma(self, p, V, W):
        return np.zeros(np.broadcast_shapes(np.shape(p), np.shape(V), np.shape(W)))

    def _curvature(self, p, X, Y, Z):
        return np.zeros(np.broadcast_shapes(np.shape(p), np.shape(X), np.shape(Y), np.shape(Z)))

    def project_point(self, p):
        (p,) = self._check(p)
        return np.mod(p, 1.0)

    def lift(self, points):
        points = np.asarray(points, dtype=float)
        steps = np.diff(points, axis=-2, append=points[..., :1, :])
        steps -= np.round(steps)
        winding = np.round(steps.sum(axis=-2))
        lifted = np.concatenate(
            [points[..., :1, :], points[..., :1, :] + np.cumsum(steps[..., :-1, :], axis=-2)],
            axis=-2,
        )
        return lifted, winding

    def reduce(self, points, chart=0):
        return np.mod(points, 1.0), chart


class FubiniStudyCP1(TargetGeometry):
    """CP^1 in stereographic charts with metric 4|dz|^2 / (1 + |z|^2)^2.

    The metric is normalized to Gaussian curvature +1 so that CP^1 runs are
    isometric to unit-sphere runs. Chart 0 is z = (p1 + i p2) / (1 + p3),
    chart 1 is w = 1/z; both are holomorphic so J is multiplication by i in
    either chart.
    """

    key = "cp1"
    representation = "chart"
    dim = 2

    def __init__(self, chart_switch_radius=1.5, migrate_radius=2.0):
        if not 1.0 < chart_switch_radius < migrate_radius:
            raise ValueError("need 1 < chart_switch_radius < migrate_radius")
        self.chart_switch_radius = float(chart_switch_radius)
        self.migrate_radius = float(migrate_radius)

    def metric_factor(self, p):
        r2 = _dot(p, p)
        return 4.0 / (1.0 + r2) ** 2

    def _grad_log_factor(self, p):
        # phi = log(2 / (1 + |z|^2)) so that g = e^{2 phi} |dz|^2
        return -2.0 * p / (1.0 + _dot(p, p))[..., None]

    def _gamma(self, p, V, W):
        dphi = self._grad_log_factor(p)
        return (
            _dot(dphi, V)[..., None] * W
            + _dot(dphi, W)[..., None] * V
            - _dot(V, W)[..., None] * dphi
        )

    def _curvature(self, p, X, Y, Z):
        return self._inner(p, Y, Z)[..., None] * X - self._inner(p, X, Z)[..., None] * Y

    def check_points(self, points, chart=0):
        r = np.max(np.linalg.norm(points, axis=-1), initial=0.0)
        if r > self.migrate_radius:
            raise RechartRequired(
                f"cp1: |z| = {r:.3f} exceeds the chart radius {self.migrate_radius}"
            )

    @staticmethod
    def invert(points):
        """Transition map z -> 1/z between the two charts."""
        r2 = _dot(points, points)[..., None]
        out = np.array(points, dtype=float)
        out[..., 1] *= -1.0
        return out / r2

    @staticmethod
    def invert_tangent(points, v):
        """Push a tangent vector through z -> 1/z (dw = -dz / z^2)."""
        z = points[..., 0] + 1j * points[..., 1]
        dv = -(v[..., 0] + 1j * v[..., 1]) / z**2
        return np.stack([dv.real, dv.imag], axis=-1)

    def from_sphere(self, p, chart=None):
        """Stereographic chart coordinates of unit vectors ``p``.

        With ``chart=None`` the chart is chosen for the whole loop: chart 0
        if it keeps every point inside ``chart_switch_radius``, otherwise
        whichever chart has the smaller maximal modulus.
        """
        p = np.asarray(p, dtype=float)
        if chart is None:
            with np.errstate(divide="ignore", invalid="ignore"):
                r0 = np.max(np.linalg.norm(p[..., :2], axis=-1) / (1.0 + p[..., 2]))
                r1 = np.max(np.linalg.norm(p[..., :2], axis=-1) / (1.0 - p[..., 2]))
            chart = 0 if (r0 <= self.chart_switch_radius or r0 <= r1) else 1
        if chart == 0:
            z = p[..., :2] / (1.0 + p[..., 2:3])
        else:
            z = np.stack([p[..., 0], -p[..., 1]], axis=-1) / (1.0 - p[..., 2:3])
        return z, chart

    def to_sphere(self, points, chart=0):
        z = np.asarray(points, dtype=float)
        if chart == 1:
            z = self.invert(z)
        r2 = _dot(z, z)[..., None]
        return np.concatenate([2.0 * z, 1.0 - r2], axis=-1) / (1.0 + r2)

    def reduce(self, points, chart=0):
        r = np.max(np.linalg.norm(points, axis=-1), initial=0.0)
        if r <= self.migrate_radius:
            return points, chart
        other = self.invert(points)
        if np.max(np.linalg.norm(other, axis=-1)) >= self.migrate_radius:
            raise RechartRequired("cp1: loop leaves both stereographic charts")
        return other, 1 - chart


_TARGETS = {"sphere2": Sphere2, "torus2": FlatTorus2, "cp1": FubiniStudyCP1}


def make_geometry(key, **kwargs):
    """Geometry for a run-configuration target key."""
    try:
        cls = _TARGETS[key]
    except KeyError:
        raise ValueError(f"unknown target {key!r}; expected one of {sorted(_TARGETS)}") from None
    return cls(**kwargs)
