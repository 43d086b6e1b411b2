"""Max-min allocation: numba loop vs numpy fallback.

Builds random FT-like flow sets (each flow from one VM egress to another VM
ingress, mixed priorities) and times both kernels on identical inputs.

    python3 benchmarks/bench_maxmin.py [--flows 64,512,4096] [--reps 20]
"""
import argparse
import time

import numpy as np

from functree import kernels


def make_case(n_flows, n_hosts, seed=0):
    rng = np.random.default_rng(seed)
    cap = np.full(2 * n_hosts, 125e6)
    cap[0] = cap[1] = 1.25e9  # registry-sized host
    src = 2 * rng.integers(0, n_hosts, n_flows) + 1   # egress endpoints are odd
    dst = 2 * rng.integers(0, n_hosts, n_flows)       # ingress endpoints are even
    prio = rng.integers(0, 3, n_flows)
    active = rng.random(n_flows) < 0.9
    return cap, src.astype(np.int64), dst.astype(np.int64), prio.astype(np.int64), active


def timeit(fn, args, reps):
    fn(*args)  # warm-up (and JIT compile)
    t0 = time.perf_counter()
    for _ in range(reps):
        out = fn(*args)
    return (time.perf_counter() - t0) / reps, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--flows", default="64,512,4096")
    ap.add_argument("--reps", type=int, default=20)
    args = ap.parse_args()

    if kernels.maxmin_numba is None:
        print("numba unavailable (or FUNCTREE_NO_NUMBA set); timing numpy only")
    print(f"{'flows':>7} {'hosts':>6} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max|diff|':>10}")
    for n in (int(x) for x in args.flows.split(",")):
        case = make_case(n, max(8, n // 2))
        t_np, r_np = timeit(kernels.maxmin_numpy, case, args.reps)
        if kernels.maxmin_numba is not None:
            t_nb, r_nb = timeit(kernels.maxmin_numba, case, args.reps)
            diff = float(np.max(np.abs(r_np - r_nb))) if n else 0.0
            print(f"{n:>7} {len(case[0]) // 2:>6} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} "
                  f"{t_np / t_nb:>8.1f} {diff:>10.3g}")
        else:
            print(f"{n:>7} {len(case[0]) // 2:>6} {t_np * 1e3:>10.3f} {'-':>10} {'-':>8} {'-':>10}")


if __name__ == "__main__":
    main()
