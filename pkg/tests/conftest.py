import numpy as np
import pytest

from diopt.errors import OracleError
from diopt.oracles import _free_box, label_dataset
from diopt.problems import Dataset, generate_family, generate_instances


@pytest.fixture(scope="session")
def toy_family():
    return generate_family("TOY2D")


@pytest.fixture(scope="session")
def toy_dataset(toy_family):
    ds, fails = label_dataset(Dataset(toy_family, np.zeros((16, 0))))
    assert not fails
    return ds


@pytest.fixture(scope="session")
def small_qp():
    return generate_family("QP", n=10, n_eq=4, n_ineq=8, seed=3)


@pytest.fixture(scope="session")
def small_qp_dataset(small_qp):
    ds, fails = label_dataset(Dataset(small_qp, generate_instances(small_qp, 40, 7)))
    assert not fails
    return ds


def fd_grad(f, a, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. array ``a`` (in place)."""
    g = np.zeros_like(a)
    it = np.nditer(a, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = a[i]
        a[i] = old + h
        fp = f()
        a[i] = old - h
        fm = f()
        a[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    """Norm-wise relative error; differences below ``floor`` count as zero."""
    diff = float(np.linalg.norm(a - b))
    if diff <= floor:
        return 0.0
    return diff / max(np.linalg.norm(a), np.linalg.norm(b))


def random_small_qps(count, seed=0):
    """Convex QP families with one or two free variables and a bounded region, plus one condition each."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        n = int(rng.integers(3, 5))
        fam = generate_family("QP", n=n, n_eq=n - 2, n_ineq=2 * n + 2, seed=int(rng.integers(1 << 30)))
        x = generate_instances(fam, 1, int(rng.integers(1 << 30)))[0]
        try:
            _free_box(fam, x)
        except OracleError:
            continue  # unbounded region: no grid oracle, redraw
        out.append((fam, x))
    return out
