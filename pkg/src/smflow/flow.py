"""Time integration of the Schrödinger map flow d/dt u = -J tau(u).

Two method-of-lines schemes are provided: the implicit midpoint rule (the
default, solved by simplified Newton iterations with a dense Jacobian, or
by plain Picard iteration) and an explicit projected RK4 step used for
cross-validation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from . import diagnostics
from .geometry import RechartRequired, _dot
from .grid import (
    MapState,
    covariant_points,
    dx_points,
    dxx_points,
    lowpass,
    partial_x_points,
    tension,
)

log = logging.getLogger(__name__)

SCHEMES = {
    "implicit_midpoint": "implicit_midpoint",
    "implicitmidpoint": "implicit_midpoint",
    "projected_rk4": "projected_rk4",
    "projectedrk4": "projected_rk4",
    "rk4_projected": "projected_rk4",
    "rk4": "projected_rk4",
}


class StabilityError(ValueError):
    """Time step exceeds the dispersive stability rule."""


class NonConvergenceError(RuntimeError):
    """The implicit-midpoint fixed-point solve did not converge."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class SchemeConfig:
    """Time-stepping parameters.

    ``solver`` picks the iteration used by the implicit midpoint rule:
    "newton" (simplified Newton, dense Jacobian reused across steps) or
    "picard". ``dealias`` applies the 2/3-rule filter to RK4 stage slopes.
    """

    scheme: str = "implicit_midpoint"
    dt: float = 1e-4
    fixed_point_tol: float = 1e-12
    max_fixed_point_iters: int = 100
    cfl_safety: float = 0.25
    force_dt: bool = False
    solver: str = "newton"
    dealias: bool = True

    def __post_init__(self):
        key = str(self.scheme).lower().replace("-", "_")
        if key not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        object.__setattr__(self, "scheme", SCHEMES[key])
        if self.solver not in ("newton", "picard"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if not self.fixed_point_tol > 0 or self.max_fixed_point_iters < 1:
            raise ValueError("fixed_point_tol must be positive and max_fixed_point_iters >= 1")
        if not self.cfl_safety > 0:
            raise ValueError("cfl_safety must be positive")

    def max_dt(self, grid):
        """Stability bound cfl_safety * (2 pi h)^2, h the grid spacing."""
        return self.cfl_safety * (2.0 * np.pi * grid.spacing) ** 2

    def validate(self, grid):
        if self.force_dt:
            return
        if not abs(self.dt) <= self.max_dt(grid):
            raise StabilityError(
                f"dt = {self.dt:g} exceeds cfl_safety*(2*pi*h)^2 = {self.max_dt(grid):.3e} "
                f"for n_points = {grid.n_points}; set force_dt to override"
            )


@dataclass
class Trajectory:
    """States stored every ``diag_stride`` steps of size ``scheme.dt``."""

    states: list
    scheme: SchemeConfig
    diag_stride: int = 1
    aborted: bool = False
    abort_reason: str | None = None

    @property
    def times(self):
        return np.array([s.time for s in self.states])

    @property
    def sample_spacing(self):
        return self.diag_stride * self.scheme.dt

    @property
    def final(self):
        return self.states[-1]


# ---------------------------------------------------------------------------
# vector fields


def velocity_points(points, grid, geometry):
    ux = partial_x_points(points, grid, geometry)
    tau = covariant_points(points, ux, ux, grid, geometry)
    return -geometry._J(points, tau)


def velocity(u):
    """-J tau(u) at every node."""
    return -u.geometry._J(u.points, tension(u))


def _cross_matrices(v):
    """Stack of 3x3 matrices C with C @ w = v x w."""
    C = np.zeros(v.shape[:-1] + (3, 3))
    C[..., 0, 1], C[..., 0, 2] = -v[..., 2], v[..., 1]
    C[..., 1, 0], C[..., 1, 2] = v[..., 2], -v[..., 0]
    C[..., 2, 0], C[..., 2, 1] = -v[..., 1], v[..., 0]
    return C


class MidpointField:
    """Vector field evaluated at the chord midpoint of an implicit step.

    On the embedded sphere the base point is the projected midpoint m/|m|
    and the second derivative is taken of the chord midpoint itself:
    F(m) = -(m/|m|) x D^2 m. F(m) is orthogonal to m pointwise (so each
    |u_j| is preserved) and to D^2 m (so sum <u, -D^2 u> is preserved).
    Chart targets use F(m) = -J (D^2 m + Gamma(Dm, Dm)) at the unprojected
    midpoint. D^2 is ``grid.second_derivative``, which keeps the Nyquist
    mode.
    """

    def __init__(self, grid, geometry):
        self.grid = grid
        self.geometry = geometry

    def __call__(self, m):
        g = self.geometry
        d2m = dxx_points(m, self.grid, g)
        if g.key == "sphere2":
            mhat = m / np.linalg.norm(m, axis=-1, keepdims=True)
            return -np.cross(mhat, d2m)
        dm = dx_points(m, self.grid, g)
        return -g._J(m, d2m + g._gamma(m, dm, dm))

    def jacobian(self, m):
        """Dense Jacobian of the flattened field (C-order over (node, component))."""
        g = self.geometry
        n, d = m.shape
        D2 = self.grid.second_derivative_matrix
        if g.key == "sphere2":
            r = np.linalg.norm(m, axis=-1)
            mhat = m / r[:, None]
            d2m = D2 @ m
            proj = np.eye(3) - mhat[:, :, None] * mhat[:, None, :]
            local = _cross_matrices(d2m) @ proj / r[:, None, None]
            Cm = _cross_matrices(mhat)
            J = -np.einsum("jac,jl->jalc", Cm, D2)
            J[np.arange(n), :, np.arange(n), :] += local
            return J.reshape(n * d, n * d)
        if g.key == "torus2":
            rot = np.array([[0.0, -1.0], [1.0, 0.0]])
            return -np.einsum("ac,jl->jalc", rot, D2).reshape(n * d, n * d)
        return self.fd_jacobian(m)

    def fd_jacobian(self, m, eps=1e-6):
        """Central finite-difference Jacobian, all columns in one batch."""
        n, d = m.shape
        E = (eps * np.eye(n * d)).reshape(n * d, n, d)
        cols = (self(m[None] + E) - self(m[None] - E)) / (2.0 * eps)
        return cols.reshape(n * d, n * d).T


class MidpointSolver:
    """Solves u+ = u + dt F((u + u+)/2) for the increment u+ - u.

    The Newton matrix I - dt/2 J_F is factored once and reused across
    iterations and steps; it is refactored when the iteration contracts
    slower than ``refresh_rate`` per sweep or dt changes.
    """

    refresh_rate = 0.1

    def __init__(self, grid, geometry, cfg):
        self.field = MidpointField(grid, geometry)
        self.cfg = cfg
        self._lu = None
        self._lu_dt = None
        self._stale = False
        self.iterations = 0
        self.factorizations = 0

    def _factor(self, m, dt):
        J = self.field.jacobian(m)
        self._lu = lu_factor(np.eye(J.shape[0]) - 0.5 * dt * J, check_finite=False)
        self._lu_dt = dt
        self._stale = False
        self.factorizations += 1

    def step(self, points, dt):
        cfg = self.cfg
        u = np.asarray(points, dtype=float)
        if dt == 0:
            return u.copy()
        F = self.field
        newton = cfg.solver == "newton"
        if newton and (self._lu is None or self._lu_dt != dt or self._stale):
            self._factor(u, dt)
        floor = 8.0 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(u))))
        delta = dt * F(u)
        prev_change = None
        refreshed = False
        change = np.inf
        with np.errstate(all="raise"):
            try:
                for it in range(1, cfg.max_fixed_point_iters + 1):
                    Fm = F(u + 0.5 * delta)
                    if newton:
                        G = (delta - dt * Fm).ravel()
                        new = delta - lu_solve(self._lu, G, check_finite=False).reshape(u.shape)
                    else:
                        new = dt * Fm
                    change = float(np.max(np.abs(new - delta)))
                    delta = new
                    self.iterations += 1
                    rate = change / prev_change if prev_change else None
                    if rate is not None and rate > self.refresh_rate and change > floor:
                        self._stale = True
                    # past the tolerance, keep iterating while the iteration still
                    # contracts: leftover error at high wavenumbers is amplified
                    # by the final field evaluation
                    if change <= cfg.fixed_point_tol and (
                        change <= floor or (rate is not None and rate > 0.25)
                    ):
                        break
                    if rate is not None and rate > 0.5 and change > cfg.fixed_point_tol:
                        if newton and not refreshed:
                            self._factor(u + 0.5 * delta, dt)
                            refreshed = True
                        elif change > 1e6 * prev_change or change > 1e3:
                            raise NonConvergenceError("fixed-point iteration diverged", change)
                    prev_change = change
                else:
                    if change > cfg.fixed_point_tol:
                        raise NonConvergenceError(
                            f"no convergence after {cfg.max_fixed_point_iters} iterations", change
                        )
                # final evaluation: u+ = u + dt F(mid) exactly, which carries the
                # pointwise orthogonality of F into the update
                delta = dt * F(u + 0.5 * delta)
            except (FloatingPointError, ValueError) as exc:
                if isinstance(exc, NonConvergenceError):
                    raise
                raise NonConvergenceError(f"fixed-point iteration failed: {exc}", change) from None
        return u + delta


def step_implicit_midpoint(u, cfg, solver=None):
    """One implicit-midpoint step of size ``cfg.dt``; returns a new MapState."""
    if solver is None:
        solver = MidpointSolver(u.grid, u.geometry, cfg)
    pts = solver.step(u.points, cfg.dt)
    pts, chart = u.geometry.reduce(pts, u.chart)
    return u.replace(pts, time=u.time + cfg.dt, chart=chart)


def _rk4_points(points, dt, grid, geometry, dealias):
    def f(y):
        v = velocity_points(geometry.project_point(y) if geometry.representation == "embedded" else y,
                            grid, geometry)
        return lowpass(v, grid, axis=-2) if dealias else v

    k1 = f(points)
    k2 = f(points + 0.5 * dt * k1)
    k3 = f(points + 0.5 * dt * k2)
    k4 = f(points + dt * k3)
    out = points + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if geometry.representation == "embedded":
        out = geometry.project_point(out)
    return out


def step_rk4_projected(u, cfg):
    """Classical RK4 on the ambient/chart coordinates, then projection."""
    if cfg.dt == 0:
        return u.replace(u.points)
    pts = _rk4_points(u.points, cfg.dt, u.grid, u.geometry, cfg.dealias)
    pts, chart = u.geometry.reduce(pts, u.chart)
    return u.replace(pts, time=u.time + cfg.dt, chart=chart)


def evolve(u0, T, cfg, diag_stride=1, progress=None):
    """Integrate from ``u0.time`` over a horizon ``T``.

    Returns ``(trajectory, series)``. A solver failure or a non-finite
    state ends the run early with ``trajectory.aborted`` set; everything
    recorded up to that point is kept.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    if diag_stride < 1:
        raise ValueError("diag_stride must be >= 1")
    cfg.validate(u0.grid)
    dt = cfg.dt
    n_steps = int(round(T / abs(dt)))
    if n_steps == 0 or abs(n_steps * abs(dt) - T) > 1e-9 * T:
        raise ValueError(f"T = {T:g} is not an integer multiple of dt = {dt:g}")
    if n_steps % diag_stride:
        raise ValueError(f"{n_steps} steps is not a multiple of diag_stride = {diag_stride}")

    solver = MidpointSolver(u0.grid, u0.geometry, cfg) if cfg.scheme == "implicit_midpoint" else None
    geometry = u0.geometry
    traj = Trajectory([u0], cfg, diag_stride)
    series = diagnostics.DiagnosticsSeries()
    diagnostics.accumulate_xi(series, diagnostics.sample(u0))

    u = u0
    for step in range(1, n_steps + 1):
        try:
            if solver is not None:
                pts = solver.step(u.points, dt)
            else:
                pts = _rk4_points(u.points, dt, u.grid, geometry, cfg.dealias)
            if not np.all(np.isfinite(pts)):
                raise FloatingPointError("non-finite state")
            pts, chart = geometry.reduce(pts, u.chart)
            u = u.replace(pts, time=u0.time + step * dt, chart=chart)
        except (NonConvergenceError, FloatingPointError, RechartRequired) as exc:
            traj.aborted = True
            traj.abort_reason = f"step {step}: {exc}"
            log.warning("run aborted at t=%g: %s", u.time, exc)
            break
        if step % diag_stride == 0:
            traj.states.append(u)
            diagnostics.accumulate_xi(series, diagnostics.sample(u))
            if progress is not None:
                progress(step, n_steps)

    if len(traj.states) >= 3:
        series.balance1_residual_norm = list(diagnostics.balance1_residual(traj))
        series.balance2_residual_norm = list(diagnostics.balance2_residual(traj))
    if solver is not None:
        log.debug("midpoint solver: %d iterations, %d factorizations over %d steps",
                  solver.iterations, solver.factorizations, n_steps)
    return traj, series
