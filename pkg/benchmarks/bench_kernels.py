#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure-numpy fallback.

Times the three matmul kernels and the k-means assignment on shapes
representative of the desk suite, then a short end-to-end training run.

    python benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from pqpack._kernels import fallback

try:
    from pqpack._kernels import _core as compiled
except ImportError:
    compiled = None


SHAPES = [
    # (rows, contracted, cols) mirroring conv im2col and FC calls
    ("conv 16x16 head", 8192, 9, 16),
    ("conv 8x8 body", 2048, 144, 32),
    ("conv 4x4 deep", 512, 288, 64),
    ("fc wide", 32, 128, 128),
    ("fc head", 32, 2, 128),
]

KMEANS_SHAPES = [
    ("3x3 slices", 1888, 256, 9),
    ("1x1/fc slices", 6168, 256, 4),
]


def _time(fn, *args, repeats=5):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_matmuls(repeats):
    # backward kernels are BLAS-backed in both backends; only the
    # order-pinned forward differs
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'shape':>22s} {'python':>10s} {'compiled':>10s} "
          f"{'speedup':>8s}")
    for name, n, k, j in SHAPES:
        x = rng.standard_normal((n, k)).astype(np.float32)
        w = rng.standard_normal((k, j)).astype(np.float32)
        t_py = _time(fallback.fc_forward, x, w, repeats=repeats)
        if compiled is not None:
            t_c = _time(compiled.fc_forward, x, w, repeats=repeats)
            print(f"{'fc_forward':24s} {f'{name} {n}x{k}x{j}':>22s} "
                  f"{1e3 * t_py:9.2f}ms {1e3 * t_c:9.2f}ms "
                  f"{t_py / t_c:7.1f}x")
        else:
            print(f"{'fc_forward':24s} {f'{name} {n}x{k}x{j}':>22s} "
                  f"{1e3 * t_py:9.2f}ms {'n/a':>10s} {'':>8s}")


def bench_kmeans(repeats):
    rng = np.random.default_rng(1)
    for name, n, k, d in KMEANS_SHAPES:
        p = rng.standard_normal((n, d)).astype(np.float32)
        c = rng.standard_normal((k, d)).astype(np.float32)
        t_py = _time(fallback.kmeans_assign, p, c, repeats=repeats)
        if compiled is not None:
            t_c = _time(compiled.kmeans_assign, p, c, repeats=repeats)
            print(f"{'kmeans_assign':24s} {f'{name} {n}x{k}x{d}':>22s} "
                  f"{1e3 * t_py:9.2f}ms {1e3 * t_c:9.2f}ms {t_py / t_c:7.1f}x")
        else:
            print(f"{'kmeans_assign':24s} {f'{name} {n}x{k}x{d}':>22s} "
                  f"{1e3 * t_py:9.2f}ms {'n/a':>10s}")


def bench_end_to_end():
    """One training epoch of the digits architecture under each backend."""
    import importlib
    import os
    import subprocess
    import sys

    code = (
        "import time, numpy as np\n"
        "from pqpack.harness import digits_cnn\n"
        "from pqpack.nn import TrainConfig, train\n"
        "from pqpack.datasets import make_glyph_digits\n"
        "import pqpack\n"
        "ds = make_glyph_digits(1000, seed=0)\n"
        "m = digits_cnn(10, seed=1)\n"
        "t0 = time.time()\n"
        "train(m, ds.x, ds.y, TrainConfig(epochs=2, seed=2))\n"
        "print(f'{pqpack.kernel_backend}: {time.time() - t0:.2f}s / 2 epochs')\n"
    )
    for backend in ("compiled", "python"):
        env = dict(os.environ, PQPACK_BACKEND=backend)
        try:
            out = subprocess.run([sys.executable, "-c", code], env=env,
                                 capture_output=True, text=True, check=True)
            print("  " + out.stdout.strip())
        except subprocess.CalledProcessError as exc:
            print(f"  {backend}: failed ({exc.stderr.strip().splitlines()[-1]})")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    if compiled is None:
        print("compiled kernels not available; showing fallback only\n")
    bench_matmuls(args.repeats)
    bench_kmeans(args.repeats)
    print("\nend-to-end (2 training epochs, digits architecture):")
    bench_end_to_end()


if __name__ == "__main__":
    main()
