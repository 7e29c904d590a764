"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--quick]

Each kernel is run through the public API with ``backend=`` forced, so the
numbers include the same wrapper overhead a caller pays.
"""

import argparse
import time

import numpy as np

from toothfill import _backend
from toothfill.geometry import cube_grid, sample_to_grid, simplex_noise
from toothfill.meshio import SignedDistance, icosphere, marching_cubes


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(quick: bool):
    n = 24 if quick else 48
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, (20_000 if quick else 200_000, 3))
    o, s = cube_grid(n)
    grid = sample_to_grid(lambda p: np.linalg.norm(p, axis=-1) - 0.7 + 0.05 * np.sin(9 * p[..., 0]), n, o, s)
    mesh = icosphere(3 if quick else 4, 0.7)
    queries = rng.uniform(-1, 1, (2_000 if quick else 20_000, 3))
    return {
        f"simplex noise, {len(pts)} points": lambda b: simplex_noise(pts, 42, backend=b),
        f"marching cubes, {n}^3 grid": lambda b: marching_cubes(grid, backend=b),
        f"mesh distance, {mesh.n_faces} faces x {len(queries)} points": lambda b: SignedDistance(mesh, b).query(queries),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="small inputs, for smoke runs")
    args = ap.parse_args(argv)
    backends = sorted(_backend.BACKENDS)
    rows = []
    for name, fn in cases(args.quick).items():
        t = {b: best_of(lambda: fn(b), args.repeat) for b in backends}
        rows.append((name, t))
    print(f"{'kernel':<44}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, t in rows:
        line = f"{name:<44}" + "".join(f"{t[b] * 1e3:>10.1f}ms" for b in backends)
        if "compiled" in t:
            line += f"{t['python'] / t['compiled']:>11.1f}x"
        print(line)
    if len(backends) == 1:
        print("compiled kernels are not built; only the fallback was timed")
    return rows


if __name__ == "__main__":
    main()
