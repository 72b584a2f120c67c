"""Time each hot kernel on its numba and pure-numpy paths.

    python benchmarks/bench_kernels.py [--repeat 5]

Both paths are called directly, so the ``DIOPT_NUMBA`` flag does not
matter here.  Compilation happens in a warm-up call before timing.
"""

import argparse
import time

import numpy as np

from diopt import kernels
from diopt.problems import generate_family


def cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((256, 128)) * 4
    yield "mish 256x128", kernels.mish_numba, kernels.mish_numpy, (x,)

    pts = rng.standard_normal((1 << 15, 4))
    nrm = rng.standard_normal((1 << 15, 4, 4))
    yield "cone_count 32k d=4", kernels.cone_count_numba, kernels.cone_count_numpy, (pts, nrm)

    fam = generate_family("QPSR", n=4, n_eq=2, n_ineq=8, seed=1)
    xc = np.array([0.3, -0.2])
    u = v = np.linspace(-3, 3, 401)
    yield ("grid_best 401^2", kernels.grid_best_numba, kernels.grid_best_numpy,
           (u, v, fam.M, fam.N @ xc, fam.G, fam.h, fam.qdiag, fam.p, fam.alpha, fam.sine, 1e-9))

    fam = generate_family("QP", n=50, n_eq=25, n_ineq=50, seed=0)
    xq = rng.uniform(-1, 1, 25)
    C = np.vstack([fam.A, fam.G])
    lo = np.concatenate([xq, np.full(50, -1e20)])
    hi = np.concatenate([xq, fam.h])
    eq = np.arange(75) < 25
    yield ("admm n=50", kernels.admm_numba, kernels.admm_numpy,
           (np.diag(fam.qdiag), fam.p, C, lo, hi, eq, 0.1, 1e-6, 1.6, 1e-8, 1e-6, 20000, 25))

    fam = generate_family("CQP", n=50, n_eq=25, n_ineq=50, seed=0)
    z0 = fam.anchor(xq)[fam.free]
    yield ("penalty_descent n=50", kernels.penalty_descent_numba, kernels.penalty_descent_numpy,
           (z0, fam.M, fam.N @ xq, fam.G, fam.h, fam.qdiag, fam.p, fam.alpha, fam.sine, 10.0,
            1e-6, 2000))


def best_of(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':<24}{'numba ms':>12}{'numpy ms':>12}{'speed-up':>10}")
    for name, fast, slow, a in cases():
        tn = best_of(fast, a, args.repeat)
        tp = best_of(slow, a, args.repeat)
        print(f"{name:<24}{tn * 1e3:>12.3f}{tp * 1e3:>12.3f}{tp / tn:>9.1f}x")


if __name__ == "__main__":
    main()
