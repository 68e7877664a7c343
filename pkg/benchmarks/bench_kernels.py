"""Compare the numba kernels with their numpy twins.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5] [--size 1000000]

Each kernel is run once to trigger compilation, then timed with timeit; the
best of ``--repeat`` runs is reported together with the numba speedup.
"""

import argparse
import timeit

import numpy as np

from qprop import _kernels as K


def cases(size):
    rng = np.random.default_rng(0)
    h, k = rng.normal(0, 1.5, (2, size))
    r = rng.uniform(-0.99, 0.99, size)
    offsets = np.linspace(-1.0, 1.0, 15)
    levels = np.linspace(-1.0, 1.0, 16)
    x = rng.standard_normal(size)
    z1, z2 = rng.standard_normal((2, size))
    m = rng.standard_normal((500, 500))
    m = m + m.T
    return {
        "bvn_upper": ((h, k, r), K.np_bvn_upper, getattr(K, "nb_bvn_upper", None)),
        "staircase_eval": ((x, offsets, levels), K.np_staircase_eval, getattr(K, "nb_staircase_eval", None)),
        "pair_product_stats": (
            (z1, z2, 1.0, 1.2, 0.4, offsets, levels),
            K.np_pair_product_stats,
            getattr(K, "nb_pair_product_stats", None),
        ),
        "band_means": ((m,), K.np_band_means, getattr(K, "nb_band_means", None)),
    }


def best_time(fn, args, repeat):
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--size", type=int, default=1_000_000)
    args = p.parse_args(argv)
    print(f"{'kernel':<20} {'numpy [s]':>12} {'numba [s]':>12} {'speedup':>9}")
    for name, (fargs, np_fn, nb_fn) in cases(args.size).items():
        t_np = best_time(np_fn, fargs, args.repeat)
        if nb_fn is None:
            print(f"{name:<20} {t_np:>12.4f} {'n/a':>12} {'n/a':>9}")
            continue
        t_nb = best_time(nb_fn, fargs, args.repeat)
        print(f"{name:<20} {t_np:>12.4f} {t_nb:>12.4f} {t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
