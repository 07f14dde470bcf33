#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Times the three hot kernels on rollout-shaped (single row) and batched
workloads, then an end-to-end rollout + gradient loop re-executed in a
subprocess per backend (backend choice binds at import time).

Usage: python3 benchmarks/bench_kernels.py [--quick]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from stopcascade._kernels import compiled_backend, python_backend

SHAPES = [
    ("rollout clf", 1, 16, 97),
    ("rollout policy", 1, 4, 8),
    ("batch 128", 128, 16, 97),
    ("batch 256 wide", 256, 64, 64),
]


def time_fn(fn, *args, repeat=5, min_time=0.15):
    best = float("inf")
    for _ in range(repeat):
        n = 0
        t0 = time.perf_counter()
        while True:
            fn(*args)
            n += 1
            dt = time.perf_counter() - t0
            if dt > min_time:
                break
        best = min(best, dt / n)
    return best


def bench_kernels(quick):
    rng = np.random.default_rng(0)
    rows = []
    for name, n, d, m in SHAPES:
        x = rng.standard_normal((n, d))
        w = rng.standard_normal((d, m))
        b = rng.standard_normal(m)
        dout = rng.standard_normal((n, m))
        repeat = 2 if quick else 5
        for op, make in (
            ("affine", lambda be: lambda: be.affine(x, w, b, True)),
            ("affine_backward",
             lambda be: lambda: be.affine_backward(
                 x, w, x @ w + b, dout, True)),
        ):
            t_py = time_fn(make(python_backend), repeat=repeat)
            row = {"workload": f"{name} {op}", "python_us": t_py * 1e6}
            if compiled_backend is not None:
                t_cy = time_fn(make(compiled_backend), repeat=repeat)
                row["cython_us"] = t_cy * 1e6
                row["speedup"] = t_py / t_cy
            rows.append(row)
    return rows


END_TO_END = r"""
import time
import numpy as np
from stopcascade import presets, BACKEND_NAME
from stopcascade.cascade import run_rollout
from stopcascade.training import sample_gradient

cascade = presets.frontier_cascade()
dataset = presets.frontier_dataset()
spec = presets.tiny_reward_spec(alpha=0.25)
rng = np.random.default_rng(0)
n = int(%d)
t0 = time.perf_counter()
for i in range(n):
    ro = run_rollout(cascade, dataset.features[i %% dataset.n_samples],
                     int(dataset.labels[i %% dataset.n_samples]), rng, spec)
    sample_gradient(cascade, ro, 0.0, spec)
dt = time.perf_counter() - t0
print(f"{BACKEND_NAME} {dt / n * 1e6:.1f}")
"""


def bench_end_to_end(quick):
    n = 2000 if quick else 10000
    out = {}
    for backend in ("python", "cython"):
        if backend == "cython" and compiled_backend is None:
            continue
        env = dict(os.environ, STOPCASCADE_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, "-c", END_TO_END % n],
            env=env, capture_output=True, text=True)
        if proc.returncode != 0:
            print(proc.stderr, file=sys.stderr)
            continue
        name, us = proc.stdout.split()
        out[name] = float(us)
    return out


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--quick", action="store_true")
    args = parser.parse_args()
    if compiled_backend is None:
        print("note: compiled extension not built; timing the fallback only")
    print(f"{'workload':34} {'python us':>10} {'cython us':>10} {'speedup':>8}")
    for row in bench_kernels(args.quick):
        cy = f"{row['cython_us']:10.2f}" if "cython_us" in row else " " * 10
        sp = f"{row['speedup']:7.1f}x" if "speedup" in row else ""
        print(f"{row['workload']:34} {row['python_us']:10.2f} {cy} {sp}")
    print("\nend-to-end rollout + gradient (per sample):")
    for name, us in bench_end_to_end(args.quick).items():
        print(f"  {name:8} {us:8.1f} us")


if __name__ == "__main__":
    main()
