import numpy as np
import pytest

from smflow.geometry import FlatTorus2, FubiniStudyCP1, Sphere2


def random_point(geom, rng, size=None):
    shape = (size,) if size is not None else ()
    if geom.key == "sphere2":
        p = rng.standard_normal(shape + (3,))
        return p / np.linalg.norm(p, axis=-1, keepdims=True)
    if geom.key == "torus2":
        return rng.random(shape + (2,))
    r = 1.9 * np.sqrt(rng.random(shape))
    a = 2 * np.pi * rng.random(shape)
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=-1)


def random_tangent(geom, p, rng):
    v = rng.standard_normal(np.shape(p))
    if geom.key == "sphere2":
        v = v - np.sum(v * p, axis=-1, keepdims=True) * p
    return v


def dft_antiderivative(f, x_eval):
    """O(N^2) direct-sum oracle: F(x) = c0 x + sum_k c_k e^{2 pi i k x} / (2 pi i k)."""
    N = len(f)
    xj = np.arange(N) / N
    F = np.full(len(x_eval), 0.0, dtype=complex)
    c0 = 0.0
    for k in range(-(N // 2) + 1, N // 2):
        ck = sum(f[j] * np.exp(-2j * np.pi * k * xj[j]) for j in range(N)) / N
        if k == 0:
            c0 = ck.real
        else:
            F += ck * np.exp(2j * np.pi * k * x_eval) / (2j * np.pi * k)
    return c0 * x_eval + F.real, c0


@pytest.fixture(params=["sphere2", "torus2", "cp1"])
def geometry(request):
    return {"sphere2": Sphere2, "torus2": FlatTorus2, "cp1": FubiniStudyCP1}[request.param]()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = {}


def record_acceptance(label, passed, detail):
    line = f"{label} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[label] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for label in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[label])
