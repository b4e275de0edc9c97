"""Numerical certification of periodic and real-line div-curl estimates.

A balance system is a set of space-time fields on a uniform (t, x) grid
satisfying

    d/dt f11 + d/dx f12 = G1,        d/dt f21 - d/dx f22 = G2.

The estimate bounds the paired integral int_0^T int (f11 f22 + f12 f21)
by the product of the L1-type sizes of (f11, G1) and (f21, G2), plus (on
the circle) the interaction of the spatial means. The left side is
computed twice: by direct quadrature and through the kernel
K = int_0^1 dy int_y^x f11 after removing the mean of f11.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import simpson

from .grid import PeriodicGrid, cumulative_integral, derivative, double_integral_kernel

MAGIC = b"SMFDCV01"
FIELD_ORDER = ("f11", "f12", "f21", "f22", "G1", "G2")
DEFAULT_TOL = 1e-5
DECAY_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class BalanceSystem:
    """Six fields of shape (n_t, n_x) sampled at t_k = k T / (n_t - 1).

    ``domain`` is "periodic" (x in [0, 1)) or "line" (x in [-L, L)).
    """

    f11: np.ndarray
    f12: np.ndarray
    f21: np.ndarray
    f22: np.ndarray
    G1: np.ndarray
    G2: np.ndarray
    T: float
    domain: str = "periodic"
    L: float = 0.0

    def __post_init__(self):
        if self.domain not in ("periodic", "line"):
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.domain == "line" and not self.L > 0:
            raise ValueError("line systems need a positive half-length L")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        shape = None
        for name in FIELD_ORDER:
            a = np.array(getattr(self, name), dtype=float)
            if a.ndim != 2:
                raise ValueError(f"{name} must be a 2-d (t, x) array")
            if shape is None:
                shape = a.shape
            elif a.shape != shape:
                raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"{name} has non-finite entries")
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        if shape[0] < 2:
            raise ValueError("need at least two time slices")
        PeriodicGrid(shape[1])  # validates n_x

    @property
    def n_t(self):
        return self.f11.shape[0]

    @property
    def n_x(self):
        return self.f11.shape[1]

    @property
    def grid(self):
        if self.domain == "line":
            return PeriodicGrid(self.n_x, length=2.0 * self.L, origin=-self.L)
        return PeriodicGrid(self.n_x)

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.n_t)

    @property
    def dt(self):
        return self.T / (self.n_t - 1)

    def fields(self):
        return {name: getattr(self, name) for name in FIELD_ORDER}

    def replace(self, **changes):
        kw = self.fields()
        kw.update(T=self.T, domain=self.domain, L=self.L)
        kw.update(changes)
        return BalanceSystem(**kw)


@dataclass
class DivCurlReport:
    lhs: float
    lhs_constructive: float
    route_gap: float
    rhs_product_term: float
    rhs_mean_term: float
    rhs_mean_term_abs: float
    hypothesis_residuals: tuple
    empirical_ratio: float | None
    constant_estimate: float | None
    holds: bool
    certified: bool
    ratio_cap: float
    valid: bool
    reason: str = ""
    domain: str = "periodic"
    terms: dict = field(default_factory=dict)
    norms: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["hypothesis_residuals"] = list(self.hypothesis_residuals)
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, **kw)


# ---------------------------------------------------------------------------
# quadrature and differencing


def time_integral(f, T):
    """int_0^T of samples on the uniform time grid (composite Simpson)."""
    f = np.asarray(f, dtype=float)
    if f.shape[0] == 2:
        return 0.5 * T * (f[0] + f[1])
    return simpson(f, dx=T / (f.shape[0] - 1), axis=0)


def space_integral(f, grid):
    return np.mean(f, axis=-1) * grid.length


def time_derivative(f, h):
    """Fourth-order finite differences along axis 0 (second order if n_t < 5)."""
    f = np.asarray(f, dtype=float)
    n = f.shape[0]
    if n < 5:
        return np.gradient(f, h, axis=0, edge_order=2 if n >= 3 else 1)
    out = np.empty_like(f)
    out[2:-2] = (f[:-4] - 8.0 * f[1:-3] + 8.0 * f[3:-1] - f[4:]) / (12.0 * h)
    out[0] = (-25 * f[0] + 48 * f[1] - 36 * f[2] + 16 * f[3] - 3 * f[4]) / (12.0 * h)
    out[1] = (-3 * f[0] - 10 * f[1] + 18 * f[2] - 6 * f[3] + f[4]) / (12.0 * h)
    out[-1] = (25 * f[-1] - 48 * f[-2] + 36 * f[-3] - 16 * f[-4] + 3 * f[-5]) / (12.0 * h)
    out[-2] = (3 * f[-1] + 10 * f[-2] - 18 * f[-3] + 6 * f[-4] - f[-5]) / (12.0 * h)
    return out


def hypothesis_residuals(sys):
    """Max-in-time L2 residual of each balance law, relative to the size of the law.

    The scale is the largest of 1, the L2 norms of d/dt(density), d/dx(flux)
    and the source, the flux norm per unit length and the density norm per
    unit time, so fields whose derivatives vanish identically are still
    measured against their own magnitude.
    """
    grid, h = sys.grid, sys.dt

    def norm(r):
        return float(np.max(np.sqrt(space_integral(r**2, grid))))

    out = []
    for dens, flux, src, sign in (
        (sys.f11, sys.f12, sys.G1, 1.0),
        (sys.f21, sys.f22, sys.G2, -1.0),
    ):
        dt_dens = time_derivative(dens, h)
        dx_flux = derivative(flux, grid)
        scale = max(1.0, norm(dt_dens), norm(dx_flux), norm(src),
                    norm(flux) / grid.length, norm(dens) / sys.T)
        out.append(norm(dt_dens + sign * dx_flux - src) / scale)
    return tuple(out)


# ---------------------------------------------------------------------------
# left and right sides


def direct_lhs(sys):
    """int_0^T int (f11 f22 + f12 f21) by Simpson in t and the rectangle rule in x."""
    return float(time_integral(space_integral(sys.f11 * sys.f22 + sys.f12 * sys.f21, sys.grid), sys.T))


def l1_sizes(sys):
    grid, T = sys.grid, sys.T
    l1 = lambda f: space_integral(np.abs(f), grid)
    n = {}
    for dens, src, tag in ((sys.f11, sys.G1, "1"), (sys.f21, sys.G2, "2")):
        norms_t = l1(dens)
        n[f"f{tag}1_l1_initial"] = float(norms_t[0])
        n[f"f{tag}1_l1_sup"] = float(np.max(norms_t))
        n[f"G{tag}_l1_spacetime"] = float(time_integral(l1(src), T))
    return n


def product_term(norms):
    first = norms["f11_l1_initial"] + norms["f11_l1_sup"] + norms["G1_l1_spacetime"]
    second = norms["f21_l1_initial"] + norms["f21_l1_sup"] + norms["G2_l1_spacetime"]
    return first * second


def mean_terms(sys):
    """Signed and absolute versions of int_0^T (int f11 int f22 + int f12 int f21)."""
    grid, T = sys.grid, sys.T
    m = {k: space_integral(v, grid) for k, v in sys.fields().items()}
    inner = m["f11"] * m["f22"] + m["f12"] * m["f21"]
    return float(time_integral(inner, T)), float(time_integral(np.abs(inner), T))


def constructive_terms(sys):
    """Kernel decomposition of the left side.

    Periodic: with f11~ = f11 - int f11 and G1~ = G1 - int G1,
    K = kernel(f11~), KG = kernel(G1~):
        A1 = int K f21 |_{t=0} - int K f21 |_{t=T}
        A2 = int int f21 KG
        A3 = int int G2 K
        A4 = int_0^T int f12 int f21
        M  = int_0^T int f11 int f22
    Line: K and KG are cumulative integrals from -L, and A4 = M = 0.
    """
    grid, T = sys.grid, sys.T
    if sys.domain == "periodic":
        m11 = space_integral(sys.f11, grid)
        mG1 = space_integral(sys.G1, grid)
        K = double_integral_kernel(sys.f11 - m11[:, None], grid)
        KG = double_integral_kernel(sys.G1 - mG1[:, None], grid)
    else:
        K = cumulative_integral(sys.f11, grid)
        KG = cumulative_integral(sys.G1, grid)
    Kf21 = space_integral(K * sys.f21, grid)
    terms = {
        "A1": float(Kf21[0] - Kf21[-1]),
        "A2": float(time_integral(space_integral(sys.f21 * KG, grid), T)),
        "A3": float(time_integral(space_integral(sys.G2 * K, grid), T)),
        "A4": 0.0,
        "M": 0.0,
    }
    if sys.domain == "periodic":
        terms["A4"] = float(time_integral(space_integral(sys.f12, grid) * space_integral(sys.f21, grid), T))
        terms["M"] = float(time_integral(m11 * space_integral(sys.f22, grid), T))
    return terms


def boundary_magnitude(sys):
    """Largest |field| on the two end nodes of a line system."""
    return max(float(np.max(np.abs(a[:, [0, -1]]))) for a in sys.fields().values())


def _report(sys, tol, ratio_cap, reasons):
    res = hypothesis_residuals(sys)
    if max(res) > tol:
        reasons.append(
            f"balance-law residuals {res[0]:.2e}, {res[1]:.2e} exceed tol {tol:.1e}; "
            "refine the time sampling or check the inputs"
        )
    lhs = direct_lhs(sys)
    terms = constructive_terms(sys)
    lhs_c = sum(terms.values())
    scale = max(abs(lhs), sum(abs(v) for v in terms.values()), 1e-300)
    norms = l1_sizes(sys)
    product = product_term(norms)
    if sys.domain == "periodic":
        mean, mean_abs = mean_terms(sys)
    else:
        mean, mean_abs = 0.0, 0.0
    denom = product + mean
    ratio = lhs / denom if denom > 0 else None
    const = (lhs - mean) / product if product > 0 else None
    tol_eq = 1e-12 * max(1.0, abs(lhs), abs(denom))
    return DivCurlReport(
        lhs=lhs,
        lhs_constructive=lhs_c,
        route_gap=abs(lhs - lhs_c) / scale if scale > 1e-300 else 0.0,
        rhs_product_term=product,
        rhs_mean_term=mean,
        rhs_mean_term_abs=mean_abs,
        hypothesis_residuals=res,
        empirical_ratio=ratio,
        constant_estimate=const,
        holds=bool(lhs <= denom + tol_eq),
        certified=bool(lhs <= ratio_cap * product + mean + tol_eq),
        ratio_cap=ratio_cap,
        valid=not reasons,
        reason="; ".join(reasons),
        domain=sys.domain,
        terms=terms,
        norms=norms,
    )


def verify_periodic(sys, tol=DEFAULT_TOL, ratio_cap=10.0):
    """Certify the periodic estimate for a system on the unit circle."""
    if sys.domain != "periodic":
        raise ValueError("verify_periodic needs a periodic system; use verify_line")
    return _report(sys, tol, ratio_cap, [])


def verify_line(sys, tol=DEFAULT_TOL, ratio_cap=10.0, decay_tol=DECAY_TOL):
    """Certify the real-line estimate on the truncated interval [-L, L)."""
    if sys.domain != "line":
        raise ValueError("verify_line needs a line system; use verify_periodic")
    reasons = []
    edge = boundary_magnitude(sys)
    if edge > decay_tol:
        reasons.append(
            f"fields reach {edge:.2e} at x = +-L (limit {decay_tol:.0e}); increase L"
        )
    return _report(sys, tol, ratio_cap, reasons)


def from_flow(traj):
    """Balance system of the determinant matrix entries along a trajectory.

    f11 = |ux|^2 / 2, f12 = -b, f21 = b, f22 = d, G1 = G2 = 0, so the left
    side is int int detA.
    """
    from .diagnostics import densities

    u0 = traj.states[0]
    if not u0.geometry.locally_symmetric:
        raise NotImplementedError("flow sources for non locally symmetric targets")
    if u0.grid.length != 1.0:
        raise ValueError("flow systems live on the unit circle")
    if len(traj.states) < 2:
        raise ValueError("need at least two stored states")
    dens = [densities(s) for s in traj.states]
    b = np.stack([d.b for d in dens])
    zero = np.zeros_like(b)
    T = traj.states[-1].time - u0.time
    return BalanceSystem(
        f11=np.stack([d.a for d in dens]),
        f12=-b,
        f21=b,
        f22=np.stack([d.d for d in dens]),
        G1=zero,
        G2=zero,
        T=T,
    )


def verify_flow(traj, tol=DEFAULT_TOL, ratio_cap=10.0):
    rep = verify_periodic(from_flow(traj), tol, ratio_cap)
    if not rep.valid:
        rep.reason += "; use a smaller diag_stride"
    return rep


# ---------------------------------------------------------------------------
# serialization


def _atomic_write(path, data):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_system(sys):
    header = {
        "domain": sys.domain,
        "n_t": sys.n_t,
        "n_x": sys.n_x,
        "T": sys.T,
        "L": sys.L,
        "fields": list(FIELD_ORDER),
        "dtype": "<f8",
        "layout": "t-major",
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(getattr(sys, n), dtype="<f8").tobytes() for n in FIELD_ORDER)
    return MAGIC + struct.pack("<I", len(hb)) + hb + body


def loads_system(data):
    if data[:8] != MAGIC:
        raise ValueError("not a balance-system file (bad magic)")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen].decode())
    n_t, n_x = header["n_t"], header["n_x"]
    body = np.frombuffer(data, dtype="<f8", offset=12 + hlen)
    if body.size != len(FIELD_ORDER) * n_t * n_x:
        raise ValueError("balance-system file is truncated or has trailing data")
    arrays = body.reshape(len(FIELD_ORDER), n_t, n_x)
    kw = {n: arrays[i].astype(float) for i, n in enumerate(header["fields"])}
    return BalanceSystem(T=header["T"], domain=header["domain"], L=header["L"], **kw)


def save_system(path, sys):
    _atomic_write(path, dumps_system(sys))


def load_system(path):
    with open(path, "rb") as fh:
        return loads_system(fh.read())


def save_report(path, report):
    _atomic_write(path, (report.to_json() + "\n").encode())
