"""Numba kernels against their numpy fallbacks.

Times the plain linear-recurrence scans and the fused selective-scan
forward/backward at several sequence lengths, checks that both backends agree,
and prints a table (optionally written as CSV).

    python benchmarks/bench_backends.py --lengths 1024,4096,32768 --csv bench.csv
"""
import argparse
import sys
import time

import numpy as np

from nnmamba import kernels
from nnmamba._jit import JIT_ENABLED


def best_of(fn, repeat):
    fn()  # warm-up, also triggers compilation
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def inputs(rng, L, E, N):
    u = rng.normal(size=(1, L, E))
    delta = np.exp(rng.uniform(np.log(1e-3), np.log(0.1), size=(1, L, E)))
    A = -np.tile(np.arange(1.0, N + 1), (E, 1))
    return u, delta, A, rng.normal(size=(1, L, N)), rng.normal(size=(1, L, N))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lengths", default="1024,4096,32768")
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--state-size", type=int, default=8)
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if not JIT_ENABLED:
        print("numba is disabled (NNM_DISABLE_NUMBA set or numba missing); nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    for L in (int(x) for x in args.lengths.split(",")):
        u, delta, A, Bm, Cm = (x.astype(args.dtype) for x in inputs(rng, L, args.channels, args.state_size))
        gy = rng.normal(size=u.shape).astype(args.dtype)
        a = np.exp(delta[0][:, :, None] * A[None]).reshape(1, L, -1)
        b = rng.normal(size=a.shape).astype(args.dtype)
        ops = {
            "sequential_scan": lambda be: kernels.sequential_scan(a, b, backend=be),
            "chunked_scan": lambda be: kernels.chunked_scan(a, b, backend=be),
            "selective_fwd": lambda be: kernels.selective_scan_fwd(u, delta, A, Bm, Cm, backend=be)[0],
            "selective_bwd": lambda be: kernels.selective_scan_bwd(
                gy, u, delta, A, Bm, Cm, kernels.selective_scan_fwd(u, delta, A, Bm, Cm, backend=be)[1],
                backend=be)[0],
        }
        for name, op in ops.items():
            t_np, y_np = best_of(lambda: op("numpy"), args.repeat)
            t_nb, y_nb = best_of(lambda: op("numba"), args.repeat)
            diff = float(np.abs(y_np - y_nb).max() / max(np.abs(y_np).max(), 1e-30))
            rows.append((L, name, t_np, t_nb, t_np / t_nb, diff))
    print(f"{'L':>7} {'kernel':>16} {'numpy s':>10} {'numba s':>10} {'speedup':>8} {'rel diff':>9}")
    for L, name, t_np, t_nb, sp, diff in rows:
        print(f"{L:>7} {name:>16} {t_np:>10.4f} {t_nb:>10.4f} {sp:>8.1f} {diff:>9.1e}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("L,kernel,numpy_seconds,numba_seconds,speedup,rel_diff\n")
            for row in rows:
                fh.write(",".join(str(v) for v in row) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
