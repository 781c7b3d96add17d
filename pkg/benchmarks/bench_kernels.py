"""Benchmark the compiled kernel core against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times the three hot kernels at dense-evaluation scales plus one end-to-end
equivariance evaluation per backend. The numpy fallback leans on BLAS for
the argmax matmul, so the compiled core's edge concentrates in the gather /
scatter / conv loops; both backends must agree numerically (asserted here).
"""

import argparse
import time

import numpy as np

from mveq.kernels import available_backends
from mveq.rng import SplitMix64


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    backends = available_backends()
    if "c" not in backends:
        print("compiled backend unavailable; benchmarking the numpy fallback alone")

    rng = SplitMix64(99)
    cand = np.ascontiguousarray(rng.normal_array(4096 * 64).reshape(4096, 64))
    queries = np.ascontiguousarray(rng.normal_array(1024 * 64).reshape(1024, 64))
    grid = np.ascontiguousarray(rng.normal_array(64 * 64 * 32).reshape(64, 64, 32).astype(np.float32))
    xs = rng.normal_array(20000) * 30 + 31
    ys = rng.normal_array(20000) * 30 + 31
    conv_x = np.ascontiguousarray(rng.normal_array(37 * 37 * 64).reshape(37, 37, 64))
    conv_w = np.ascontiguousarray(rng.normal_array(64 * 64 * 9).reshape(64, 64, 3, 3) * 0.1)
    conv_b = np.ascontiguousarray(rng.normal_array(64))
    d_out = np.ascontiguousarray(rng.normal_array(37 * 37 * 64).reshape(37, 37, 64))

    cases = {
        "nn_argmax 1024x4096x64": lambda m: m.nn_argmax(cand, queries),
        "bilinear_gather 20k pts": lambda m: m.bilinear_gather(grid, xs, ys),
        "conv3x3_forward 37x37x64": lambda m: m.conv3x3_forward(conv_x, conv_w, conv_b),
        "conv3x3_backward 37x37x64": lambda m: m.conv3x3_backward(conv_x, conv_w, d_out),
    }

    print(f"{'kernel':<28}" + "".join(f"{name:>12}" for name in backends))
    reference = {}
    for label, fn in cases.items():
        row = []
        for name, mod in backends.items():
            row.append(_time(lambda: fn(mod), args.repeat))
            out = fn(mod)
            key = label
            if key not in reference:
                reference[key] = out
            else:
                ref = reference[key]
                if isinstance(out, tuple):
                    for a, b in zip(ref, out):
                        np.testing.assert_allclose(np.asarray(a, float), np.asarray(b, float), atol=1e-9)
                else:
                    np.testing.assert_allclose(ref, out, atol=1e-9)
        print(f"{label:<28}" + "".join(f"{t * 1e3:>10.2f}ms" for t in row))

    # End-to-end: one dense equivariance pass per backend.
    import os
    import subprocess
    import sys
    import tempfile

    print(f"{'eval-equivariance (e2e)':<28}", end="")
    for name in backends:
        with tempfile.TemporaryDirectory() as td:
            env = dict(os.environ, MVEQ_KERNELS=name)
            subprocess.run(
                [sys.executable, "-m", "mveq.cli", "gen-synth", "--scene", "sphere",
                 "--n-views", "8", "--image-size", "64", "--out", td],
                check=True, capture_output=True, env=env,
            )
            start = time.perf_counter()
            subprocess.run(
                [sys.executable, "-m", "mveq.cli", "eval-equivariance", "--manifest",
                 f"{td}/manifest.json", "--stride", "2", "--report", f"{td}/r.json"],
                check=True, capture_output=True, env=env,
            )
            print(f"{(time.perf_counter() - start) * 1e3:>10.0f}ms", end="")
    print()


if __name__ == "__main__":
    main()
