"""Time the numba kernels against their numpy twins, plus an end-to-end fit.

    python3 benchmarks/bench_kernels.py [--n 5000] [--repeat 5]

The end-to-end rows run in subprocesses so that ECAP_DISABLE_NUMBA takes
effect at import time.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from ecap import _kernels
from ecap._accel import HAVE_NUMBA
from ecap.estimator import DEFAULT_GAMMA_GRID, DEFAULT_THETA_GRID
from ecap.spline import build_basis


def best_of(fn, repeat):
    fn()  # warm-up (jit compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(n, seed=0):
    rng = np.random.default_rng(seed)
    x = np.minimum(rng.beta(4, 4, n), 0.5)
    basis = build_basis(x)
    g = 0.5 - x
    gp = -np.ones_like(x)
    target = (rng.random(n) < x).astype(float)
    gammas = np.asarray(DEFAULT_GAMMA_GRID)
    thetas = np.asarray(DEFAULT_THETA_GRID)
    adj = np.clip(x + 0.01, 0, 0.5)
    w = np.ones(n)
    idx = rng.integers(0, n, size=(500, n))
    args = {
        "design_rows": (x, basis.t, basis.S),
        "adjust_flipped": (x, g, gp, 0.005, -1.0, False, 1.0, 1.0, 1e-12, 1e-6),
        "grid_objective": (x, g, gp, target, gammas, thetas, False, 1.0, 1.0, 1e-12, 1e-6,
                           _kernels.MODE_LOGLIK),
        "bootstrap_ec": (target, adj, w, idx),
    }
    return args


END_TO_END = """
import time, numpy as np
from ecap import fit, EcapConfig
rng = np.random.default_rng(1)
p = rng.beta(4, 4, {n}); pt = rng.beta(p / 0.005, (1 - p) / 0.005); z = (rng.random({n}) < p).astype(float)
fit(pt[:200], EcapConfig(), z=z[:200])
t0 = time.perf_counter(); fit(pt, EcapConfig(), z=z); print(time.perf_counter() - t0)
"""


def end_to_end(n, disable):
    env = dict(os.environ, ECAP_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", END_TO_END.format(n=n)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-end-to-end", action="store_true")
    args = ap.parse_args()

    if not HAVE_NUMBA:
        print("numba unavailable (or disabled); only numpy timings are meaningful")
    print(f"n = {args.n}")
    print(f"{'kernel':<16}{'numpy [ms]':>12}{'numba [ms]':>12}{'speed-up':>10}")
    for name, a in kernel_cases(args.n).items():
        t_np = best_of(lambda: getattr(_kernels, name + "_numpy")(*a), args.repeat)
        t_nb = best_of(lambda: getattr(_kernels, name + "_numba")(*a), args.repeat)
        print(f"{name:<16}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>9.1f}x")

    if not args.skip_end_to_end:
        t_np = end_to_end(args.n, disable=True)
        t_nb = end_to_end(args.n, disable=False)
        print(f"{'fit (end to end)':<16}{1e3 * t_np:>12.0f}{1e3 * t_nb:>12.0f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
