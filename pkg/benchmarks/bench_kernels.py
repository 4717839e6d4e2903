"""Time the numba kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is called once untimed (numba compilation) and then timed as
the best of ``--repeat`` runs.  The two paths are also checked to agree.
``KOOPGAME_NO_NUMBA=1`` has no effect here, because both paths are loaded
explicitly.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from koopgame._kernels import NUMBA_KERNELS, NUMPY_KERNELS
from koopgame.dictionary import turret_rbf_basis


def best_of(fn, args, repeat):
    fn(*args)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    b = turret_rbf_basis()
    centers = b.centroids
    scale = np.asarray(b.scale, dtype=float)
    B, n = 4096, 100
    x0 = np.c_[rng.uniform(0.1, 1, B), rng.uniform(0, np.pi, B)]
    u, vp, vq = (rng.uniform(-1, 1, (B, n)) for _ in range(3))
    X = np.c_[rng.uniform(0, 1, 10000), rng.uniform(0, np.pi, 10000)]
    coef = rng.normal(scale=0.3, size=(3, b.n_basis))
    x0_cl = x0[:400]
    return {
        f"turret_rk4 ({B} x {n} steps)": ("turret_rk4", (x0, u, vp, vq, 0.01, 0.1)),
        f"rbf_matrices ({len(X)} pts x {b.n_basis})": ("rbf_matrices", (X, centers, scale, b.eps2)),
        f"turret_closed_loop ({len(x0_cl)} x {n} steps)": (
            "turret_closed_loop", (x0_cl, centers, scale, b.eps2, coef, 0.01, n, 0.1, 1.0, 1.0)),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if NUMBA_KERNELS is None:
        print("numba is not installed; only the numpy path is available")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<40} {'numpy [ms]':>11} {'numba [ms]':>11} {'speedup':>8} {'max |diff|':>11}")
    for label, (name, a) in cases(rng).items():
        t_np = best_of(getattr(NUMPY_KERNELS, name), a, args.repeat)
        if NUMBA_KERNELS is None:
            print(f"{label:<40} {1e3 * t_np:>11.2f} {'-':>11} {'-':>8} {'-':>11}")
            continue
        t_nb = best_of(getattr(NUMBA_KERNELS, name), a, args.repeat)
        r_np = getattr(NUMPY_KERNELS, name)(*a)
        r_nb = getattr(NUMBA_KERNELS, name)(*a)
        diff = max(float(np.abs(x - y).max()) for x, y in zip(r_np, r_nb))
        print(f"{label:<40} {1e3 * t_np:>11.2f} {1e3 * t_nb:>11.2f} {t_np / t_nb:>7.1f}x {diff:>11.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
