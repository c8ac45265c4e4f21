"""Compiled vs numpy kernels: IPOT plan, Lloyd iterations and IMF sums.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from vlflow import _kernels_py

try:
    from vlflow import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    cost = rng.random((16, 12))
    mu, nu = np.full(16, 1 / 16), np.full(12, 1 / 12)
    x = rng.normal(size=(30, 64))
    c0 = x[:2].copy()
    flow = rng.random((30, 30))
    flow /= flow.sum(axis=1, keepdims=True)
    vision, language = np.arange(1, 17), np.arange(18, 30)
    return {
        "ipot 16x12 (50 outer)": lambda k: k.ipot_plan(cost, mu, nu, 0.5, 50, 1),
        "lloyd 30x64": lambda k: k.lloyd(x, c0, 100),
        "imf_sums 30x30": lambda k: k.imf_sums(flow, vision, language),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels not built; only the numpy path is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy us':>12}{'cython us':>12}{'speed-up':>10}")
    for name, fn in cases(rng).items():
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=args.number, repeat=args.repeat))
        py_us = py / args.number * 1e6
        if _ckernels is None:
            print(f"{name:<24}{py_us:>12.1f}{'-':>12}{'-':>10}")
            continue
        cy = min(timeit.repeat(lambda: fn(_ckernels), number=args.number, repeat=args.repeat))
        cy_us = cy / args.number * 1e6
        print(f"{name:<24}{py_us:>12.1f}{cy_us:>12.1f}{py_us / cy_us:>9.1f}x")


if __name__ == "__main__":
    main()
