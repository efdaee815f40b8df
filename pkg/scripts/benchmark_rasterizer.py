"""Benchmark the tiled rasterizer against the brute-force oracle.

The oracle evaluates every splat at every pixel, so its cost grows with
splats x pixels; expect minutes at the largest sizes when --oracle is on.

    python3 scripts/benchmark_rasterizer.py --splats 1000 10000 100000 --size 512
"""
import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from gsavatar import set_threads
from gsavatar.cameras import Splats2D
from gsavatar.raster import rasterize_forward, rasterize_reference, sort_splats


def random_splats(rng, n, size):
    means = rng.uniform(-2, size + 1, size=(n, 2))
    theta = rng.uniform(0, np.pi, n)
    s1 = rng.uniform(0.6, 3.0, n) ** 2
    s2 = rng.uniform(0.6, 3.0, n) ** 2
    c, s = np.cos(theta), np.sin(theta)
    return Splats2D(
        means=means,
        covs=np.stack([c * c * s1 + s * s * s2,
                       c * s * (s1 - s2),
                       s * s * s1 + c * c * s2], axis=1),
        depths=rng.uniform(1.0, 10.0, n),
        opacities=rng.uniform(0.05, 0.6, n),
        colors=rng.uniform(0, 1, size=(n, 3)),
    )


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--splats", type=int, nargs="+", default=[1000, 10000, 100000])
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--oracle", action="store_true",
                    help="also time the brute-force oracle (slow at scale)")
    args = ap.parse_args()
    if args.threads is not None:
        set_threads(args.threads)

    W = H = args.size
    print(f"image {W}x{H}, best of {args.repeats}")
    header = f"{'splats':>8}  {'tiled':>10}"
    if args.oracle:
        header += f"  {'oracle':>10}  {'speedup':>8}"
    print(header)
    for n in args.splats:
        rng = np.random.default_rng(args.seed)
        splats, _ = sort_splats(random_splats(rng, n, args.size))
        rasterize_forward(splats, W, H)  # warm the JIT at this shape
        t_tile = best_of(lambda: rasterize_forward(splats, W, H), args.repeats)
        line = f"{n:>8}  {t_tile * 1e3:>8.1f}ms"
        if args.oracle:
            t_ref = best_of(lambda: rasterize_reference(splats, W, H), 1)
            line += f"  {t_ref * 1e3:>8.1f}ms  {t_ref / t_tile:>7.1f}x"
        print(line)


if __name__ == "__main__":
    main()
