import json
import math
import struct

import numpy as np
import pytest

from smflow import divcurl as dc
from smflow.flow import SchemeConfig, evolve
from smflow.geometry import FlatTorus2, Sphere2
from smflow.grid import MapState, PeriodicGrid
from smflow.initial import great_circle, random_smooth, spin_wave

from conftest import dft_antiderivative

S2, T2 = Sphere2(), FlatTorus2()


# ---------------------------------------------------------------------------
# builders


def periodic_grid_xt(N, n_t, T=1.0):
    x = np.arange(N) / N
    t = np.linspace(0.0, T, n_t)
    return np.meshgrid(t, x, indexing="ij")


def example_cos_system(N=4096, n_t=3):
    t, x = periodic_grid_xt(N, n_t)
    z = np.zeros_like(x)
    c = np.cos(2 * np.pi * x)
    return dc.BalanceSystem(f11=z, f12=c, f21=c, f22=z, G1=-2 * np.pi * np.sin(2 * np.pi * x), G2=z, T=1.0)


def example_orthogonal_system(N=256, n_t=41):
    t, x = periodic_grid_xt(N, n_t)
    z = np.zeros_like(x)
    return dc.BalanceSystem(f11=np.sin(2 * np.pi * x) * np.cos(t), f12=z, f21=np.cos(2 * np.pi * x), f22=z,
                            G1=-np.sin(2 * np.pi * x) * np.sin(t), G2=z, T=1.0)


def example_gaussian_line(N=8192, n_t=3, L=8.0):
    t = np.linspace(0.0, 1.0, n_t)
    x = -L + 2 * L * np.arange(N) / N
    _, X = np.meshgrid(t, x, indexing="ij")
    g = np.exp(-X**2)
    z = np.zeros_like(X)
    return dc.BalanceSystem(f11=z, f12=g, f21=g, f22=z, G1=-2 * X * g, G2=z, T=1.0, domain="line", L=L)


class Field:
    """Random sum of c cos(w t + a) cos(2 pi k x + b) with exact derivatives."""

    def __init__(self, rng, n_terms=4, kmax=3, wmax=2.0, mean=True):
        k = rng.integers(0 if mean else 1, kmax + 1, n_terms)
        self.p = [(rng.standard_normal(), rng.uniform(0, wmax), rng.uniform(0, 2 * np.pi), kk,
                   rng.uniform(0, 2 * np.pi)) for kk in k]

    def __call__(self, t, x, d_t=0, d_x=0):
        out = np.zeros(np.broadcast_shapes(np.shape(t), np.shape(x)))
        for c, w, a, k, b in self.p:
            out += c * w**d_t * np.cos(w * t + a + d_t * np.pi / 2) * (2 * np.pi * k) ** d_x * np.cos(
                2 * np.pi * k * x + b + d_x * np.pi / 2)
        return out


def random_system(rng, N=32, n_t=81, T=1.0):
    t, x = periodic_grid_xt(N, n_t, T)
    f11, f12, f21, f22 = (Field(rng) for _ in range(4))
    return dc.BalanceSystem(
        f11=f11(t, x), f12=f12(t, x), f21=f21(t, x), f22=f22(t, x),
        G1=f11(t, x, d_t=1) + f12(t, x, d_x=1),
        G2=f21(t, x, d_t=1) - f22(t, x, d_x=1),
        T=T,
    )


def simpson_weights(n_t, T):
    assert n_t % 2 == 1
    w = np.ones(n_t)
    w[1:-1:2], w[2:-1:2] = 4.0, 2.0
    return w * (T / (n_t - 1)) / 3.0


# ---------------------------------------------------------------------------
# closed-form examples


def test_all_zero_system():
    z = np.zeros((5, 16))
    rep = dc.verify_periodic(dc.BalanceSystem(f11=z, f12=z, f21=z, f22=z, G1=z, G2=z, T=1.0))
    assert rep.lhs == 0 and rep.rhs_product_term == 0 and rep.rhs_mean_term == 0
    assert rep.valid and rep.holds and rep.empirical_ratio is None
    line = dc.BalanceSystem(f11=z, f12=z, f21=z, f22=z, G1=z, G2=z, T=1.0, domain="line", L=4.0)
    rep = dc.verify_line(line)
    assert rep.valid and rep.lhs == 0 and rep.rhs_product_term == 0 and rep.holds


def test_periodic_cosine_example():
    rep = dc.verify_periodic(example_cos_system())
    assert rep.valid
    assert abs(rep.lhs - 0.5) <= 1e-8
    assert abs(rep.rhs_product_term - 16 / np.pi) <= 1e-6 * 16 / np.pi
    assert rep.norms["G1_l1_spacetime"] == pytest.approx(4.0, rel=1e-6)
    assert rep.norms["f21_l1_initial"] == pytest.approx(2 / np.pi, rel=1e-6)
    assert rep.rhs_mean_term == pytest.approx(0.0, abs=1e-12)
    assert rep.holds and rep.empirical_ratio == pytest.approx(np.pi / 32, rel=1e-5)
    assert rep.route_gap <= 1e-7


def test_periodic_orthogonal_example():
    rep = dc.verify_periodic(example_orthogonal_system())
    assert rep.valid
    assert abs(rep.lhs) <= 1e-12
    assert rep.rhs_product_term > 0 and rep.holds
    assert rep.route_gap <= 1e-7 or abs(rep.lhs - rep.lhs_constructive) <= 1e-12


def test_line_gaussian_example():
    rep = dc.verify_line(example_gaussian_line())
    assert rep.valid
    assert abs(rep.lhs - math.sqrt(math.pi / 2)) <= 1e-6 * math.sqrt(math.pi / 2)
    # (0 + 0 + int |d/dx e^{-x^2}| = 2) * (sqrt(pi) + sqrt(pi) + 0)
    assert abs(rep.rhs_product_term - 4 * math.sqrt(math.pi)) <= 1e-6 * 4 * math.sqrt(math.pi)
    assert rep.rhs_mean_term == 0.0
    assert rep.holds and rep.route_gap <= 1e-7


def test_line_decay_violation():
    sys = example_gaussian_line(N=512)
    rep = dc.verify_line(sys.replace(f21=np.ones_like(sys.f21), f22=np.zeros_like(sys.f22)))
    assert not rep.valid and "increase L" in rep.reason


def test_hypothesis_violation_flags_invalid():
    sys = example_cos_system(N=64)
    rep = dc.verify_periodic(sys.replace(G1=np.zeros_like(sys.G1)))
    assert not rep.valid and "exceed tol" in rep.reason
    assert rep.hypothesis_residuals[0] > 1e-5


def test_domain_mismatch_raises():
    with pytest.raises(ValueError):
        dc.verify_line(example_cos_system(N=16))
    with pytest.raises(ValueError):
        dc.verify_periodic(example_gaussian_line(N=64))


def test_system_validation():
    z = np.zeros((3, 16))
    with pytest.raises(ValueError):
        dc.BalanceSystem(f11=z, f12=z, f21=z, f22=z, G1=z, G2=np.zeros((3, 8)), T=1.0)
    with pytest.raises(ValueError):
        dc.BalanceSystem(f11=z, f12=z, f21=z, f22=z, G1=z, G2=z, T=0.0)
    bad = z.copy()
    bad[0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        dc.BalanceSystem(f11=bad, f12=z, f21=z, f22=z, G1=z, G2=z, T=1.0)


# ---------------------------------------------------------------------------
# random systems


def test_random_systems_route_equivalence_and_certification():
    rng = np.random.default_rng(2024)
    ratios = []
    for _ in range(100):
        rep = dc.verify_periodic(random_system(rng))
        assert rep.valid, rep.reason
        assert rep.route_gap <= 1e-7
        assert rep.empirical_ratio is not None and np.isfinite(rep.empirical_ratio)
        assert rep.certified
        ratios.append(rep.empirical_ratio)
    assert max(ratios) <= 10


def test_route_gap_converges_at_fourth_order_in_time():
    gaps = []
    for n_t in (21, 41, 81):
        gaps.append(dc.verify_periodic(random_system(np.random.default_rng(11), n_t=n_t)).route_gap)
    assert gaps[0] / gaps[1] > 10 and gaps[1] / gaps[2] > 10


def test_mean_zero_reduction_consistency():
    rng = np.random.default_rng(7)
    for _ in range(10):
        sys = random_system(rng)
        grid = sys.grid
        m11 = dc.space_integral(sys.f11, grid)[:, None]
        mG1 = dc.space_integral(sys.G1, grid)[:, None]
        reduced = sys.replace(f11=sys.f11 - m11, G1=sys.G1 - mG1)
        full, red = dc.verify_periodic(sys), dc.verify_periodic(reduced)
        assert red.valid
        mean_term = full.terms["M"]
        assert abs(full.lhs - (red.lhs + mean_term)) <= 1e-9 * max(1.0, abs(full.lhs))
        assert abs(full.lhs_constructive - (red.lhs_constructive + mean_term)) <= 1e-9 * max(1.0, abs(full.lhs))
        assert abs(red.terms["M"]) <= 1e-12


# ---------------------------------------------------------------------------
# brute-force oracles


@pytest.mark.parametrize("N,n_t", [(8, 5), (16, 17), (32, 31)])
def test_quadratures_match_brute_force_sums(N, n_t):
    rng = np.random.default_rng(N)
    sys = random_system(rng, N=N, n_t=n_t)
    h = 1.0 / N
    w = simpson_weights(n_t, sys.T)
    F = sys.fields()

    def spacetime(f):
        total = 0.0
        for k in range(n_t):
            for j in range(N):
                total += w[k] * h * f[k][j]
        return total

    def space(f, k):
        return sum(h * f[k][j] for j in range(N))

    lhs = spacetime(sys.f11 * sys.f22 + sys.f12 * sys.f21)
    assert abs(dc.direct_lhs(sys) - lhs) <= 1e-8 * max(1.0, abs(lhs))

    norms = dc.l1_sizes(sys)
    for tag, dens, src in (("1", F["f11"], F["G1"]), ("2", F["f21"], F["G2"])):
        l1 = [space(np.abs(dens), k) for k in range(n_t)]
        assert abs(norms[f"f{tag}1_l1_initial"] - l1[0]) <= 1e-12
        assert abs(norms[f"f{tag}1_l1_sup"] - max(l1)) <= 1e-12
        assert abs(norms[f"G{tag}_l1_spacetime"] - spacetime(np.abs(src))) <= 1e-8

    mean = sum(w[k] * (space(F["f11"], k) * space(F["f22"], k) + space(F["f12"], k) * space(F["f21"], k))
               for k in range(n_t))
    assert abs(dc.mean_terms(sys)[0] - mean) <= 1e-8 * max(1.0, abs(mean))

    # constructive kernels from the O(N^2) direct DFT antiderivative
    x = np.arange(N) / N
    terms = dc.constructive_terms(sys)
    Kf21 = []
    A2 = 0.0
    for k in range(n_t):
        f11 = F["f11"][k] - space(F["f11"], k)
        G1 = F["G1"][k] - space(F["G1"], k)
        K, _ = dft_antiderivative(f11, x)
        KG, _ = dft_antiderivative(G1, x)
        K, KG = K - K.mean(), KG - KG.mean()
        Kf21.append(space(K[None] * F["f21"][k][None], 0))
        A2 += w[k] * space(F["f21"][k][None] * KG[None], 0)
    assert abs(terms["A1"] - (Kf21[0] - Kf21[-1])) <= 1e-8
    assert abs(terms["A2"] - A2) <= 1e-8


def test_simpson_matches_explicit_weights():
    f = np.cos(np.linspace(0, 1, 9)) ** 3
    assert dc.time_integral(f, 1.0) == pytest.approx(np.dot(simpson_weights(9, 1.0), f), abs=1e-15)
    assert dc.time_integral(np.array([1.0, 3.0]), 2.0) == 4.0


def test_time_derivative_is_fourth_order():
    errs = []
    for n in (41, 81):
        t = np.linspace(0, 1, n)
        f = np.sin(3 * t)[:, None] * np.ones((1, 4))
        errs.append(np.max(np.abs(dc.time_derivative(f, t[1] - t[0]) - 3 * np.cos(3 * t)[:, None])))
    assert errs[0] / errs[1] > 12


# ---------------------------------------------------------------------------
# flow-generated systems


def test_from_flow_great_circle():
    g = PeriodicGrid(16)
    traj, series = evolve(great_circle(g, S2), 0.01, SchemeConfig(dt=1e-4), diag_stride=10)
    sys = dc.from_flow(traj)
    for name in ("f11", "f12", "f21", "f22"):
        field = getattr(sys, name)
        assert np.max(np.abs(field - field[:1])) <= 1e-8 * max(1.0, np.max(np.abs(field)))
    assert np.max(np.abs(sys.f21)) <= 1e-8
    rep = dc.verify_periodic(sys)
    assert rep.valid
    assert abs(rep.lhs - series.xi2[-1]) <= 1e-8
    assert rep.route_gap <= 1e-7


def test_from_flow_spin_wave():
    g = PeriodicGrid(64)
    traj, series = evolve(spin_wave(g, S2, theta=np.pi / 4), 0.02, SchemeConfig(dt=1e-4), diag_stride=10)
    rep = dc.verify_flow(traj)
    assert rep.valid, rep.reason
    xi2 = series.xi2[-1]
    assert abs(rep.lhs - xi2) <= 1e-6 * max(1.0, abs(xi2))
    assert rep.route_gap <= 1e-7
    assert rep.certified


def test_from_flow_random_sphere_run_converges_in_dt():
    """Flow fields obey the balance laws up to the O(dt^2) error of the scheme."""
    g = PeriodicGrid(64)
    u0 = random_smooth(g, S2, seed=1, band=1, amplitude=0.3)
    reps = []
    for dt in (1e-4, 5e-5):
        traj, series = evolve(u0, 0.01, SchemeConfig(dt=dt), diag_stride=1)
        reps.append(dc.verify_flow(traj))
        # xi2 accumulates by the trapezoid rule
        assert abs(reps[-1].lhs - series.xi2[-1]) <= 1e-5 * max(1.0, abs(series.xi2[-1]))
    assert reps[1].valid and max(reps[0].hypothesis_residuals) > 1e-5
    for i in (0, 1):
        ratio = reps[0].hypothesis_residuals[i] / reps[1].hypothesis_residuals[i]
        assert 3.5 < ratio < 4.5
    assert 3.5 < reps[0].route_gap / reps[1].route_gap < 4.5
    assert reps[1].route_gap <= 2e-7
    assert all(np.isfinite(r.empirical_ratio) and r.certified for r in reps)


def test_from_flow_coarse_sampling_is_flagged():
    g = PeriodicGrid(64)
    traj, _ = evolve(random_smooth(g, S2, seed=1, band=2), 0.01, SchemeConfig(dt=1e-4), diag_stride=2)
    rep = dc.verify_flow(traj)
    assert not rep.valid and "diag_stride" in rep.reason


def test_from_flow_flat_torus_closed_form():
    """z = c + A e^{i(k1 x + k1^2 t)} + B e^{i(k2 x + k2^2 t)} solves d/dt z = -i z_xx."""
    N, dt, T = 64, 1e-5, 1e-3
    g = PeriodicGrid(N)
    x = g.nodes
    k1, k2, A, B = 2 * np.pi, 4 * np.pi, 0.03, 0.01j

    def z(t, d=0):
        return (np.where(d == 0, 0.5 + 0.5j, 0.0)
                + A * (1j * k1) ** d * np.exp(1j * (k1 * x + k1**2 * t))
                + B * (1j * k2) ** d * np.exp(1j * (k2 * x + k2**2 * t)))

    u0 = MapState(np.mod(np.stack([z(0).real, z(0).imag], axis=-1), 1.0), g, T2)
    traj, _ = evolve(u0, T, SchemeConfig(dt=dt), diag_stride=20)
    sys = dc.from_flow(traj)
    detA_num = sys.f11 * sys.f22 + sys.f12 * sys.f21
    ip = lambda P, Q: (P * np.conj(Q)).real
    for i, s in enumerate(traj.states):
        zx, zxx, zxxx = z(s.time, 1), z(s.time, 2), z(s.time, 3)
        a = 0.5 * ip(zx, zx)
        b = ip(1j * zx, zxx)
        d = ip(zxx, zxx) - ip(zxxx, zx)
        detA = a * d - b * b
        assert np.max(np.abs(detA_num[i] - detA)) <= 1e-7 * np.max(np.abs(detA))


def test_from_flow_requires_two_states():
    from smflow.flow import Trajectory

    traj = Trajectory([great_circle(PeriodicGrid(16), S2)], SchemeConfig())
    with pytest.raises(ValueError):
        dc.from_flow(traj)


# ---------------------------------------------------------------------------
# serialization


def test_serialization_round_trip(tmp_path):
    sys = random_system(np.random.default_rng(3), N=16, n_t=9)
    path = tmp_path / "sys.smfdcv"
    dc.save_system(path, sys)
    raw = path.read_bytes()
    assert raw[:8] == b"SMFDCV01"
    back = dc.load_system(path)
    for name in dc.FIELD_ORDER:
        np.testing.assert_array_equal(getattr(back, name), getattr(sys, name))
    assert back.T == sys.T and back.domain == sys.domain
    assert dc.dumps_system(back) == raw


def test_serialization_layout_is_t_major():
    sys = random_system(np.random.default_rng(4), N=8, n_t=5)
    raw = dc.dumps_system(sys)
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    assert header["fields"] == list(dc.FIELD_ORDER) and header["layout"] == "t-major"
    body = np.frombuffer(raw[12 + hlen:], dtype="<f8")
    np.testing.assert_array_equal(body[:8], sys.f11[0])
    np.testing.assert_array_equal(body[8:16], sys.f11[1])
    np.testing.assert_array_equal(body[5 * 40:5 * 40 + 8], sys.G2[0])


def test_serialization_rejects_bad_input():
    sys = random_system(np.random.default_rng(5), N=8, n_t=3)
    raw = dc.dumps_system(sys)
    with pytest.raises(ValueError):
        dc.loads_system(b"NOTMAGIC" + raw[8:])
    with pytest.raises(ValueError):
        dc.loads_system(raw[:-8])


def test_line_system_round_trip():
    sys = example_gaussian_line(N=64)
    back = dc.loads_system(dc.dumps_system(sys))
    assert back.domain == "line" and back.L == 8.0
    np.testing.assert_array_equal(back.f12, sys.f12)


def test_report_json(tmp_path):
    rep = dc.verify_periodic(example_cos_system(N=64))
    path = tmp_path / "divcurl.json"
    dc.save_report(path, rep)
    data = json.loads(path.read_text())
    for key in ("lhs", "rhs_product_term", "rhs_mean_term", "rhs_mean_term_abs", "hypothesis_residuals",
                "empirical_ratio", "route_gap", "valid"):
        assert key in data
    assert data["lhs"] == rep.lhs
