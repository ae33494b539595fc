"""Compare the compiled loop kernels against their vectorized numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs once first so compilation is excluded from the timings.
Exits early with a note when numba is disabled or unavailable.
"""
import argparse
import timeit

import numpy as np

from motionscale import kernels
from motionscale._accel import NUMBA_ENABLED


def cases(rng):
    tracks = np.cumsum(rng.normal([1.0, 0.0], 0.3, (64, 24, 2)), axis=1)
    tokens, _, _ = kernels.verlet_encode(tracks, 13, 1.0)
    rollouts = np.cumsum(rng.normal([1.0, 0.0], 0.5, (256, 22, 2)), axis=1)
    ego = np.zeros((300, 5))
    ego[:, 0] = np.linspace(0, 300, 300)
    ego[:, 3:] = [4.8, 2.0]
    others = np.zeros((32, 300, 5))
    others[:, :, 0] = rng.uniform(0, 300, (32, 1))
    others[:, :, 1] = rng.uniform(3, 30, (32, 1))
    others[:, :, 3:] = [4.8, 2.0]
    valid = np.ones((32, 300), dtype=bool)
    n, steps = 24, 300
    ctrl = (
        rng.normal(0, 10, (n, 2)), rng.uniform(-3, 3, n), rng.uniform(0, 15, n),
        rng.uniform(0, 15, (n, steps)), rng.normal(0, 0.05, (n, steps)), np.full(n, 3.0), 1.5, 0.1,
    )
    return {
        "verlet_encode": (tracks, 13, 1.0),
        "verlet_decode": (tokens, tracks[:, :2], 13, 1.0),
        "cross_ade": (rollouts, rollouts[:12]),
        "kmeans": (rollouts, rollouts[:12].copy(), 100),
        "first_overlap": (ego, others, valid),
        "integrate": ctrl,
    }


def bench(fn, args, repeat):
    fn(*args)
    t = timeit.repeat(lambda: fn(*args), number=1, repeat=repeat)
    return min(t)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not NUMBA_ENABLED:
        print("numba is disabled (MOTIONSCALE_DISABLE_NUMBA) or missing; nothing to compare")
        return
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<16}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, a in cases(rng).items():
        compiled = getattr(kernels, "_nb_" + name)
        t_nb = bench(compiled, a, args.repeat)
        t_np = bench(kernels.numpy_reference(name), a, args.repeat)
        print(f"{name:<16}{t_nb * 1e3:>12.3f}{t_np * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
