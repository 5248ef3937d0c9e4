"""Compare numba and numpy kernel backends on ghost norms and materialization.

    python benchmarks/bench_kernels.py [--batch 256] [--width 512] [--repeats 20]

Both variants are imported side by side, so no environment flag is needed.
With ``GROUPCLIP_DISABLE_NUMBA=1`` the "numba" column times the plain Python
loops instead, which is slow but still a correctness cross-check.
"""

import argparse
import time

import numpy as np

from groupclip import kernels
from groupclip._accel import backend


def best_of(fn, repeats):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--seq", type=int, default=16)
    p.add_argument("--repeats", type=int, default=20)
    args = p.parse_args()
    rng = np.random.default_rng(0)
    B, d, T = args.batch, args.width, args.seq
    a2, e2 = rng.standard_normal((B, d)), rng.standard_normal((B, d))
    a3, e3 = rng.standard_normal((B // 8, T, d // 4)), rng.standard_normal((B // 8, T, d // 4))
    small_a, small_e = a2[:, : d // 4], e2[:, : d // 4]

    cases = [
        ("ghost 2-D", lambda: kernels.ghost_sq_2d_np(a2, e2), lambda: kernels.ghost_sq_2d_nb(a2, e2)),
        ("ghost seq", lambda: kernels.ghost_sq_seq_np(a3, e3), lambda: kernels.ghost_sq_seq_nb(a3, e3)),
        ("materialize", lambda: kernels.materialize_np(small_a, small_e),
         lambda: kernels.materialize_nb(small_a, small_e)),
    ]
    print(f"backend selected at import: {backend()}")
    print(f"{'kernel':<14}{'numpy ms':>10}{'numba ms':>10}{'ratio':>8}{'max |diff|':>12}")
    for name, f_np, f_nb in cases:
        diff = max(float(np.max(np.abs(x - y))) for x, y in zip(f_np(), f_nb()))
        t_np, t_nb = best_of(f_np, args.repeats), best_of(f_nb, args.repeats)
        print(f"{name:<14}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.2f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
