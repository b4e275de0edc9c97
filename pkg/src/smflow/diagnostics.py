"""Scalar diagnostics, densities and balance-law residuals of a run.

Notation along a map u: ux = d/dx u, tau = nabla_x ux, tau_x = nabla_x tau,
b = <J ux, tau>, q = <R(ux, J ux) ux, J ux>. The determinant densities
come from the 2x2 matrix with entries a = |ux|^2 / 2, b = c as above and
d = |tau|^2 - <tau_x, ux> + q / 4.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .geometry import ContractViolation
from .grid import covariant_x, derivative, integrate_periodic, partial_x_map, projection_residual, tension

CSV_COLUMNS = (
    "t", "m", "E", "b_integral", "Q", "detA_int", "detAm_int",
    "xi1", "xi2", "bal1_res", "bal2_res", "si1_ratio", "proj_residual",
)


@dataclass(frozen=True)
class Densities:
    """Pointwise densities of one state, each of shape (n_points,)."""

    ux2: np.ndarray
    tau2: np.ndarray
    b: np.ndarray
    q: np.ndarray
    tau_x_ux: np.ndarray
    tau_ux: np.ndarray

    @property
    def a(self):
        return 0.5 * self.ux2

    @property
    def d(self):
        return self.tau2 - self.tau_x_ux + 0.25 * self.q

    @property
    def detA(self):
        return self.a * self.d - self.b**2

    @property
    def detAm(self):
        return self.tau_ux**2


def densities(u):
    if "dens" not in u._cache:
        g, p = u.geometry, u.points
        ux = partial_x_map(u)
        tau = tension(u)
        tau_x = covariant_x(u, tau)
        u._cache["dens"] = Densities(
            ux2=g._inner(p, ux, ux),
            tau2=g._inner(p, tau, tau),
            b=g._inner(p, g._J(p, ux), tau),
            q=g._quartic(p, ux),
            tau_x_ux=g._inner(p, tau_x, ux),
            tau_ux=g._inner(p, tau, ux),
        )
    return u._cache["dens"]


def _integral(f, u):
    return float(integrate_periodic(f, u.grid))


def momentum(u):
    """m = int |ux|^2."""
    return _integral(densities(u).ux2, u)


def energy(u):
    """E = int |tau|^2."""
    return _integral(densities(u).tau2, u)


def b_field(u):
    """Pointwise b = <J ux, tau>."""
    return densities(u).b.copy()


def det_fields(u):
    """(detA, detAm) as pointwise fields."""
    dens = densities(u)
    return dens.detA, dens.detAm


def conserved_Q(u):
    """Q = E/2 + (1/8) int q, conserved on locally symmetric targets."""
    dens = densities(u)
    return 0.5 * _integral(dens.tau2, u) + 0.125 * _integral(dens.q, u)


def identity_residual(u):
    """Integrated determinant identity:
    int detA - [int detAm + int (|ux|^2 |tau|^2 - b^2) + (1/8) int |ux|^2 q].

    The pointwise identity also carries -(1/2) d/dx(|ux|^2 <tau, ux>), which
    integrates to zero over the circle.
    """
    dens = densities(u)
    rest = dens.detAm + dens.ux2 * dens.tau2 - dens.b**2 + 0.125 * dens.ux2 * dens.q
    return _integral(dens.detA - rest, u)


@dataclass(frozen=True)
class DiagnosticsSample:
    time: float
    m: float
    E: float
    b_integral: float
    Q: float
    detA_integral: float
    detAm_integral: float
    proj_residual: float
    sup_ux4: float
    ux5_integral: float = 0.0
    ux6_integral: float = 0.0
    ux8_integral: float = 0.0
    dx_ux2_l2: float = 0.0
    identity_residual: float = 0.0

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def sample(u):
    """All per-time scalars of a state."""
    dens = densities(u)
    s = np.sqrt(np.maximum(dens.ux2, 0.0))
    dx_ux2 = derivative(dens.ux2, u.grid)
    integ = lambda f: _integral(f, u)
    return DiagnosticsSample(
        time=float(u.time),
        m=integ(dens.ux2),
        E=integ(dens.tau2),
        b_integral=integ(dens.b),
        Q=0.5 * integ(dens.tau2) + 0.125 * integ(dens.q),
        detA_integral=integ(dens.detA),
        detAm_integral=integ(dens.detAm),
        proj_residual=projection_residual(u),
        sup_ux4=integ(s**4),
        ux5_integral=integ(s**5),
        ux6_integral=integ(s**6),
        ux8_integral=integ(s**8),
        dx_ux2_l2=math.sqrt(integ(dx_ux2**2)),
        identity_residual=identity_residual(u),
    )


@dataclass
class DiagnosticsSeries:
    samples: list = field(default_factory=list)
    xi1: list = field(default_factory=list)
    xi2: list = field(default_factory=list)
    balance1_residual_norm: list = field(default_factory=list)
    balance2_residual_norm: list = field(default_factory=list)

    def column(self, name):
        return np.array([getattr(s, name) for s in self.samples])

    @property
    def times(self):
        return self.column("time")


def accumulate_xi(series, smp, stride_rtol=1e-9):
    """Append ``smp`` and extend xi1 = int int detAm, xi2 = int int detA by the trapezoid rule."""
    if not series.samples:
        series.samples.append(smp)
        series.xi1.append(0.0)
        series.xi2.append(0.0)
        return series
    prev = series.samples[-1]
    h = smp.time - prev.time
    if len(series.samples) >= 2:
        h0 = prev.time - series.samples[-2].time
        if abs(h - h0) > stride_rtol * max(abs(h0), 1e-300) + 1e-14:
            raise ContractViolation(f"non-uniform sample spacing: {h0!r} then {h!r}")
    if h == 0:
        raise ContractViolation("repeated sample time")
    series.samples.append(smp)
    series.xi1.append(series.xi1[-1] + 0.5 * h * (prev.detAm_integral + smp.detAm_integral))
    series.xi2.append(series.xi2[-1] + 0.5 * h * (prev.detA_integral + smp.detA_integral))
    return series


# ---------------------------------------------------------------------------
# balance laws


def _stack(traj, fn):
    return np.stack([fn(densities(s)) for s in traj.states])


def _time_derivative(rho, spacing):
    return np.gradient(rho, spacing, axis=0, edge_order=2)


def _l2_per_time(res, grid):
    return np.sqrt(integrate_periodic(res**2, grid))


def _check_traj(traj):
    if len(traj.states) < 3:
        raise ValueError("balance residuals need at least 3 stored states")
    return traj.states[0].grid, traj.sample_spacing


def balance1_residual(traj):
    """L2 norm per stored time of (1/2) d/dt |ux|^2 - d/dx b."""
    grid, h = _check_traj(traj)
    ux2 = _stack(traj, lambda d: d.ux2)
    b = _stack(traj, lambda d: d.b)
    res = 0.5 * _time_derivative(ux2, h) - derivative(b, grid)
    return _l2_per_time(res, grid)


def balance2_residual(traj):
    """L2 norm per stored time of d/dt b - d/dx(|tau|^2 - <tau_x, ux>) - (1/4) d/dx q.

    The curvature-derivative source vanishes on every shipped target.
    """
    grid, h = _check_traj(traj)
    if not traj.states[0].geometry.locally_symmetric:
        raise NotImplementedError("balance2 source term for non-symmetric targets")
    b = _stack(traj, lambda d: d.b)
    flux = _stack(traj, lambda d: d.tau2 - d.tau_x_ux + 0.25 * d.q)
    res = _time_derivative(b, h) - derivative(flux, grid)
    return _l2_per_time(res, grid)


# ---------------------------------------------------------------------------
# interpolation monitors


def _ratio(lhs, rhs):
    if rhs > 0:
        return lhs / rhs
    return None


def interpolation_monitors(smp):
    """Both sides and ratio of each Gagliardo-Nirenberg type inequality.

    With m = || |ux|^2 ||_1 and g = || d/dx |ux|^2 ||_2:
      si1    int |ux|^4 <~ E^(1/2) m^(3/2) + m^2
      si2_l4 || |ux|^2 ||_4^2 <~ g m + m^2
      dcs2   int |ux|^4 <~ g^(2/3) m^(4/3) + m^2
      dcs3   int |ux|^5 <~ g m^(3/2) + m^(5/2)
      dcs4   int |ux|^6 <~ g^(4/3) m^(5/3) + m^3
    Ratios are None when the right side vanishes.
    """
    m, E, g = smp.m, max(smp.E, 0.0), smp.dx_ux2_l2
    m = max(m, 0.0)
    pairs = {
        "si1": (smp.sup_ux4, math.sqrt(E) * m**1.5 + m**2),
        "si2_l4": (math.sqrt(max(smp.ux8_integral, 0.0)), g * m + m**2),
        "dcs2": (smp.sup_ux4, g ** (2 / 3) * m ** (4 / 3) + m**2),
        "dcs3": (smp.ux5_integral, g * m**1.5 + m**2.5),
        "dcs4": (smp.ux6_integral, g ** (4 / 3) * m ** (5 / 3) + m**3),
    }
    return {k: {"lhs": l, "rhs": r, "ratio": _ratio(l, r)} for k, (l, r) in pairs.items()}


# ---------------------------------------------------------------------------
# output


def _fmt(x):
    if x is None:
        return "nan"
    return format(float(x), ".17g")


def series_rows(series):
    n = len(series.samples)
    bal1 = series.balance1_residual_norm or [None] * n
    bal2 = series.balance2_residual_norm or [None] * n
    for i, s in enumerate(series.samples):
        yield (
            s.time, s.m, s.E, s.b_integral, s.Q, s.detA_integral, s.detAm_integral,
            series.xi1[i], series.xi2[i], bal1[i], bal2[i],
            interpolation_monitors(s)["si1"]["ratio"], s.proj_residual,
        )


def series_csv(series):
    """CSV text of a series, columns in the fixed order of ``CSV_COLUMNS``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in series_rows(series):
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()
