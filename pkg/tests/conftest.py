import numpy as np
import pytest

from deformcast.mesh import TriMesh


def cube_mesh(lo=0.0, hi=1.0):
    v = np.array([[x, y, z] for x in (lo, hi) for y in (lo, hi) for z in (lo, hi)], dtype=float)
    f = [
        (0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5),
        (0, 4, 5), (0, 5, 1), (2, 3, 7), (2, 7, 6),
        (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3),
    ]
    return TriMesh(v, f)


def grid_mesh(n, m=None, size=1.0):
    m = m or n
    xs, ys = np.meshgrid(np.linspace(0, size, n), np.linspace(0, size, m), indexing="ij")
    v = np.c_[xs.ravel(), ys.ravel(), np.zeros(n * m)]
    faces = []
    for i in range(n - 1):
        for j in range(m - 1):
            a = i * m + j
            faces += [(a, a + m, a + 1), (a + 1, a + m, a + m + 1)]
    return TriMesh(v, faces)


def random_mesh(rng, max_faces=500):
    n = int(rng.integers(3, 120))
    nf = int(rng.integers(1, max_faces + 1))
    faces = np.stack([rng.choice(n, size=3, replace=False) for _ in range(nf)])
    return TriMesh(rng.normal(size=(n, 3)), faces)


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def kink_safe_difference(f, flat, i, steps=(1e-5, 1e-6, 1e-7)):
    """Central difference at ``flat[i]``, shrinking the step when the left and
    right one-sided slopes disagree (a relu kink lies inside the stencil)."""
    old = flat[i]
    f0 = f()
    for h in steps:
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        right, left = (fp - f0) / h, (f0 - fm) / h
        if abs(right - left) <= 1e-3 * max(abs(right), abs(left)) + 1e-6:
            break
    return (fp - fm) / (2 * h)


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    """Elementwise relative error below ``rtol`` (entries near zero judged by ``atol``)."""
    err = np.abs(analytic - numeric)
    bound = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    bad = err > bound
    assert not bad.any(), f"max rel err {np.max(err / (np.abs(numeric) + 1e-12))}"


@pytest.fixture
def cube():
    return cube_mesh()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Two objects x five scenarios (8 train / 2 test), generated once per session."""
    from deformcast.dataset import generate_dataset

    root = tmp_path_factory.mktemp("dataset")
    manifest = generate_dataset(["ball", "donut"], 5, 3, root)
    return root, manifest


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        default = f"[{n:>2}/10] NOT RUN"
        if n == 7 and not mod.FULL:
            default = f"[ 7/10] SKIP  learning signal at scale-down: multi-hour run, set DEFORMCAST_FULL=1"
        terminalreporter.write_line(mod.RESULTS.get(n, default))
